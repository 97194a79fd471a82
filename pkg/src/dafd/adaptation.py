"""Domain adaptation procedures on the shared backbone.

DANN (gradient reversal + discriminator), multi-kernel MMD on the feature
layer, and AdaBN statistic replacement, all driven by one training loop.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigurationError, DataError, TrainingError, UsageError
from .models import BackboneModel, build_model
from .optim import Adam, seeded_streams
from .signal import WindowedDataset

log = logging.getLogger(__name__)

METHODS = ("none", "dann", "mmd", "adabn")
LAMBDA_POOL = (0.1, 1.0, 10.0)
KERNEL_WIDTHS = (1.0, 2.0, 4.0, 8.0, 16.0)
PRECISIONS = ("float64", "float32")


@dataclass
class AdaptationConfig:
    method: str = "none"
    lambda_d: float = 1.0
    lambda_mmd: float = 1.0
    kernel_widths: tuple[float, ...] = KERNEL_WIDTHS
    epochs: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-4
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.method == "baseline":
            self.method = "none"
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        self.kernel_widths = tuple(float(w) for w in self.kernel_widths)
        if not self.kernel_widths or min(self.kernel_widths) <= 0:
            raise ConfigurationError("kernel widths must be strictly positive")
        if self.lambda_d < 0 or self.lambda_mmd < 0:
            raise ConfigurationError("adaptation weights must be non-negative")
        if self.batch_size < 2 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 2 and epochs >= 0")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")


@dataclass
class TrainStepRecord:
    epoch: int
    l_clf: float
    l_align: float
    ms: float


@dataclass
class TrainResult:
    model: BackboneModel
    records: list[TrainStepRecord] = field(default_factory=list)
    seconds: float = 0.0


def write_trace(records: Sequence[TrainStepRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_clf", "l_align", "ms"])
        for r in records:
            w.writerow([r.epoch, repr(r.l_clf), repr(r.l_align), f"{r.ms:.3f}"])


# ----------------------------------------------------------------------
# MMD


def gaussian_kernel_sum(sq_dist: Tensor, widths: Sequence[float]) -> Tensor:
    """Equal-weight sum of exp(-d^2 / (2 sigma^2)) over the widths."""
    total = None
    for sigma in widths:
        k = ad.exp(ad.mul(sq_dist, -1.0 / (2.0 * sigma * sigma)))
        total = k if total is None else ad.add(total, k)
    return total


def mmd_multikernel(fs, ft, widths: Sequence[float] = KERNEL_WIDTHS) -> Tensor:
    """Biased (V-statistic) multi-kernel MMD^2 between two feature batches."""
    fs = fs if isinstance(fs, Tensor) else Tensor(fs)
    ft = ft if isinstance(ft, Tensor) else Tensor(ft)
    if fs.shape[0] == 0 or ft.shape[0] == 0:
        raise UsageError("mmd_multikernel needs non-empty batches")
    k_ss = gaussian_kernel_sum(ad.sq_distances(fs, fs), widths)
    k_tt = gaussian_kernel_sum(ad.sq_distances(ft, ft), widths)
    k_st = gaussian_kernel_sum(ad.sq_distances(fs, ft), widths)
    return ad.add(ad.add(ad.mean(k_ss), ad.mean(k_tt)), ad.mul(ad.mean(k_st), -2.0))


# ----------------------------------------------------------------------
# training


class _Cycler:
    """Endless reshuffled index stream over a dataset."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos : self.pos + k]
            self.pos += len(chunk)
            k -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)


def _fit(
    source: WindowedDataset,
    target: WindowedDataset | None,
    cfg: AdaptationConfig,
    method: str,
    variant_method: str,
) -> TrainResult:
    streams = seeded_streams(cfg.seed)
    # initial draws are made in float64 so both precisions start from the same point
    model = build_model(variant_method, streams["init"], streams["disc_init"]).astype(cfg.precision)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    xs_all, ys_all = source.features.astype(cfg.precision, copy=False), source.labels
    n = len(source)
    if n == 0:
        raise DataError("source dataset is empty")
    if method in ("dann", "mmd"):
        if target is None or len(target) == 0:
            raise DataError(f"{method} needs unlabeled target data")
        cycler = _Cycler(len(target), streams["shuffle_target"])
        xt_all = target.features.astype(cfg.precision, copy=False)
    drop_s, drop_t = streams["dropout_source"], streams["dropout_target"]
    records = []
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = streams["shuffle_source"].permutation(n)
        sums = np.zeros(2)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            with Tape() as tape:
                fs = model.features(xs_all[idx], "train", drop_s)
                l_clf = ad.softmax_cross_entropy(model.classify(fs, "train", drop_s), ys_all[idx])
                loss, l_align = l_clf, None
                if method in ("dann", "mmd"):
                    ft = model.features(xt_all[cycler.take(len(idx))], "train", drop_t)
                if method == "dann":
                    h = ad.gradient_reversal(ad.concat([fs, ft]), cfg.lambda_d)
                    domains = np.repeat([0, 1], [len(idx), ft.shape[0]])
                    l_align = ad.softmax_cross_entropy(model.discriminate(h), domains)
                    loss = ad.add(l_clf, l_align)
                elif method == "mmd":
                    l_align = mmd_multikernel(fs, ft, cfg.kernel_widths)
                    loss = ad.add(l_clf, ad.mul(l_align, cfg.lambda_mmd))
            lc = float(l_clf.data)
            la = float(l_align.data) if l_align is not None else 0.0
            if not (np.isfinite(lc) and np.isfinite(la)):
                raise TrainingError(
                    f"non-finite loss in {method} at epoch {epoch}, step {steps}: l_clf={lc}, l_align={la}"
                )
            tape.backward(loss)
            opt.step()
            sums += (lc, la)
            steps += 1
        ms = (time.perf_counter() - t0) * 1000.0
        if steps:
            records.append(TrainStepRecord(epoch, sums[0] / steps, sums[1] / steps, ms))
    return TrainResult(model, records, time.perf_counter() - t_start)


def train_baseline(source: WindowedDataset, cfg: AdaptationConfig, variant: str = "plain") -> TrainResult:
    """Source-only training of the backbone (``variant='bn'`` adds BN layers)."""
    return _fit(source, None, cfg, "none", "adabn" if variant == "bn" else "baseline")


def train_dann(source: WindowedDataset, target_unlabeled: WindowedDataset, cfg: AdaptationConfig) -> TrainResult:
    return _fit(source, target_unlabeled, cfg, "dann", "dann")


def train_mmd(source: WindowedDataset, target_unlabeled: WindowedDataset, cfg: AdaptationConfig) -> TrainResult:
    return _fit(source, target_unlabeled, cfg, "mmd", "mmd")


def adapt_adabn(model: BackboneModel, target_unlabeled) -> BackboneModel:
    """Copy of ``model`` whose BN statistics are recomputed on the target set.

    One eval-mode pass over the whole target set; each BN layer takes the
    population mean/variance of its input, which already reflects the
    replaced statistics of the layers before it. Trainable parameters are
    untouched.
    """
    if not model.bn:
        raise ConfigurationError("AdaBN needs a model built with the BN variant")
    x = target_unlabeled.features if isinstance(target_unlabeled, WindowedDataset) else np.asarray(target_unlabeled)
    if len(x) < 2:
        raise DataError("AdaBN needs at least 2 target rows")
    adapted = copy.deepcopy(model)
    adapted.features(np.asarray(x, dtype=model.dtype), "adapt")
    return adapted


def train_adabn(source: WindowedDataset, target_unlabeled: WindowedDataset, cfg: AdaptationConfig) -> TrainResult:
    result = train_baseline(source, cfg, variant="bn")
    t0 = time.perf_counter()
    result.model = adapt_adabn(result.model, target_unlabeled)
    result.seconds += time.perf_counter() - t0
    return result


def train(source: WindowedDataset, target: WindowedDataset | None, cfg: AdaptationConfig) -> TrainResult:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "none":
        return train_baseline(source, cfg)
    if cfg.method == "dann":
        return train_dann(source, target, cfg)
    if cfg.method == "mmd":
        return train_mmd(source, target, cfg)
    return train_adabn(source, target, cfg)


def accuracy(model: BackboneModel, ds: WindowedDataset) -> float:
    """Percentage of rows classified correctly (eval mode)."""
    if len(ds) == 0:
        raise DataError("cannot score an empty dataset")
    return 100.0 * float(np.mean(model.predict(ds.features) == ds.labels))


# ----------------------------------------------------------------------
# diagnostics


def proxy_a_distance(fs, ft, seed: int = 0, steps: int = 200, lr: float = 1e-2) -> float:
    """2 (1 - 2 err) of a logistic domain classifier, clamped to [0, 2].

    The classifier is fit on a random half of the pooled rows and ``err``
    is its error on the other half.
    """
    fs, ft = np.asarray(fs, dtype=np.float64), np.asarray(ft, dtype=np.float64)
    if len(fs) < 20 or len(ft) < 20:
        raise DataError("proxy A-distance needs at least 20 samples per domain")
    x = np.concatenate([fs, ft]).reshape(len(fs) + len(ft), -1)
    y = np.repeat([0, 1], [len(fs), len(ft)])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    half = len(x) // 2
    tr, te = order[:half], order[half:]
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    w = Tensor(np.zeros((x.shape[1], 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([w, b], lr=lr)
    xt = Tensor(x[tr])
    for _ in range(steps):
        opt.zero_grad()
        with Tape() as tape:
            loss = ad.softmax_cross_entropy(ad.dense(xt, w, b), y[tr])
        tape.backward(loss)
        opt.step()
    pred = np.argmax(x[te] @ w.data + b.data, axis=1)
    err = float(np.mean(pred != y[te]))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))
