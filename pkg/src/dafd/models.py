"""Shared 1D-CNN backbone, domain discriminator and BN variant."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError, TrainingError

INPUT_WIDTH = 512
CONV_CHANNELS = 10
KERNEL_SIZE = 3
FEATURE_SIZE = 256
CLASSIFIER_HIDDEN = 256
DISC_HIDDEN = 1024
N_CLASSES = 10
DROPOUT = 0.5

METHOD_VARIANTS = {
    "baseline": ("plain", False),
    "none": ("plain", False),
    "dann": ("plain", True),
    "mmd": ("plain", False),
    "adabn": ("bn", False),
}


# Initial bias of the last conv layer. With zero bias every flattened unit sits
# near sigmoid(0) = 0.5, a common mode about ten times the between-sample spread;
# Adam's per-weight steps then move all 256 features together and the classifier
# ReLUs switch off for every sample at once. Starting at sigmoid(-4) ~ 0.02 keeps
# the flattened layer sparse.
LAST_CONV_BIAS = -4.0


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def constant(shape, value: float, name: str) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True, name=name)


class BnLayer:
    """Batch normalisation with running statistics.

    Modes: ``train`` (batch statistics, running averages updated),
    ``eval`` (running statistics) and ``adapt`` (population statistics of
    the given input replace the running ones, then normalise with them).
    """

    def __init__(self, p: int, name: str, eps: float = 1e-5, momentum: float = 0.9):
        self.name = name
        self.gamma = Tensor(np.ones(p), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(p), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(p)
        self.running_var = np.ones(p)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if mode == "train":
            rows = int(np.prod(x.shape[:-1]))
            if x.shape[0] < 2 or rows < 2:
                raise TrainingError("batch normalisation in train mode needs at least 2 samples")
            y, mu, var = ad.batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu
            self.running_var = m * self.running_var + (1.0 - m) * var
            return y
        if mode == "adapt":
            axes = tuple(range(x.data.ndim - 1))
            self.running_mean = x.data.mean(axis=axes)
            self.running_var = x.data.var(axis=axes)
        scale = self.gamma * (1.0 / np.sqrt(self.running_var + self.eps))
        return ad.add(ad.mul(ad.add(x, -self.running_mean), scale), self.beta)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class BackboneModel:
    """Feature extractor + classifier, with optional BN layers and discriminator."""

    def __init__(
        self,
        rng: np.random.Generator,
        variant: str = "plain",
        with_discriminator: bool = False,
        disc_rng: np.random.Generator | None = None,
    ):
        if variant not in ("plain", "bn"):
            raise ValueError(f"unknown backbone variant {variant!r}")
        self.variant = variant
        k, c = KERNEL_SIZE, CONV_CHANNELS
        self.convs = []
        cin = 1
        for i in range(3):
            w = glorot(rng, (k, cin, c), k * cin, k * c, f"conv{i + 1}.kernel")
            b = constant(c, LAST_CONV_BIAS, f"conv{i + 1}.bias") if i == 2 else zeros(c, f"conv{i + 1}.bias")
            self.convs.append((w, b))
            cin = c
        flat = INPUT_WIDTH * c
        self.feature_dense = (
            glorot(rng, (flat, FEATURE_SIZE), flat, FEATURE_SIZE, "feature.weight"),
            zeros(FEATURE_SIZE, "feature.bias"),
        )
        self.clf1 = (
            glorot(rng, (FEATURE_SIZE, CLASSIFIER_HIDDEN), FEATURE_SIZE, CLASSIFIER_HIDDEN, "clf1.weight"),
            zeros(CLASSIFIER_HIDDEN, "clf1.bias"),
        )
        self.clf2 = (
            glorot(rng, (CLASSIFIER_HIDDEN, N_CLASSES), CLASSIFIER_HIDDEN, N_CLASSES, "clf2.weight"),
            zeros(N_CLASSES, "clf2.bias"),
        )
        self.bn = []
        if variant == "bn":
            self.bn = [BnLayer(c, f"bn{i + 1}") for i in range(3)] + [BnLayer(FEATURE_SIZE, "bn_feature")]
        self.disc = []
        if with_discriminator:
            drng = disc_rng if disc_rng is not None else rng
            dims = [FEATURE_SIZE, DISC_HIDDEN, DISC_HIDDEN, 2]
            for i in range(3):
                self.disc.append(
                    (
                        glorot(drng, (dims[i], dims[i + 1]), dims[i], dims[i + 1], f"disc{i + 1}.weight"),
                        zeros(dims[i + 1], f"disc{i + 1}.bias"),
                    )
                )

    # -- parameter bookkeeping -------------------------------------------------

    def extractor_parameters(self) -> list[Tensor]:
        out = [t for pair in self.convs for t in pair] + list(self.feature_dense)
        return out + [t for layer in self.bn for t in layer.parameters()]

    def classifier_parameters(self) -> list[Tensor]:
        return list(self.clf1) + list(self.clf2)

    def discriminator_parameters(self) -> list[Tensor]:
        return [t for pair in self.disc for t in pair]

    def parameters(self) -> list[Tensor]:
        return self.extractor_parameters() + self.classifier_parameters() + self.discriminator_parameters()

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus BN running statistics, keyed by name."""
        out = {p.name: p.data for p in self.parameters()}
        for layer in self.bn:
            out[f"{layer.name}.running_mean"] = layer.running_mean
            out[f"{layer.name}.running_var"] = layer.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.named_arrays()
        dtype = self.dtype
        if set(arrays) != set(expected):
            raise DataError(f"checkpoint names differ: {sorted(set(arrays) ^ set(expected))}")
        for p in self.parameters():
            if arrays[p.name].shape != p.shape:
                raise DataError(f"{p.name}: checkpoint shape {arrays[p.name].shape} != {p.shape}")
            p.data = np.array(arrays[p.name], dtype=dtype)
        for layer in self.bn:
            layer.running_mean = np.array(arrays[f"{layer.name}.running_mean"], dtype=dtype)
            layer.running_var = np.array(arrays[f"{layer.name}.running_var"], dtype=dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.convs[0][0].data.dtype

    def astype(self, dtype) -> "BackboneModel":
        """Cast parameters and BN statistics in place; returns self."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for layer in self.bn:
            layer.running_mean = layer.running_mean.astype(dtype)
            layer.running_var = layer.running_var.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- forward passes --------------------------------------------------------

    def features(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """[B, 512] spectra -> [B, 256] features.

        ``mode`` is ``train``, ``eval`` or ``adapt`` (see :class:`BnLayer`);
        dropout is active only in ``train``.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != INPUT_WIDTH:
            raise ShapeError(f"expected input of shape [B, {INPUT_WIDTH}], got {x.shape}")
        training = mode == "train"
        h = ad.reshape(x, (x.shape[0], INPUT_WIDTH, 1))
        for i, (w, b) in enumerate(self.convs):
            h = ad.conv1d(h, w, b)
            if self.bn:
                h = self.bn[i](h, mode)
            h = ad.dropout(ad.sigmoid(h), DROPOUT, training, rng)
        h = ad.reshape(h, (x.shape[0], INPUT_WIDTH * CONV_CHANNELS))
        h = ad.dense(h, *self.feature_dense)
        if self.bn:
            h = self.bn[3](h, mode)
        return h

    def classify(self, f: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if f.data.ndim != 2 or f.shape[1] != FEATURE_SIZE:
            raise ShapeError(f"expected features of shape [B, {FEATURE_SIZE}], got {f.shape}")
        h = ad.relu(ad.dense(f, *self.clf1))
        h = ad.dropout(h, DROPOUT, mode == "train", rng)
        return ad.dense(h, *self.clf2)

    def discriminate(self, f: Tensor) -> Tensor:
        if not self.disc:
            raise ValueError("model was built without a discriminator")
        if f.data.ndim != 2 or f.shape[1] != FEATURE_SIZE:
            raise ShapeError(f"expected features of shape [B, {FEATURE_SIZE}], got {f.shape}")
        h = f
        for i, (w, b) in enumerate(self.disc):
            h = ad.dense(h, w, b)
            if i < len(self.disc) - 1:
                h = ad.relu(h)
        return h

    def logits(self, x, mode: str = "eval", rng=None) -> Tensor:
        return self.classify(self.features(x, mode, rng), mode, rng)

    def predict(self, x, chunk: int = 500) -> np.ndarray:
        """Eval-mode class predictions; ties go to the lowest class index."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        out = [np.argmax(self.logits(x[i : i + chunk]).data, axis=1) for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_model(method: str, rng: np.random.Generator, disc_rng=None) -> BackboneModel:
    try:
        variant, with_disc = METHOD_VARIANTS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None
    return BackboneModel(rng, variant, with_disc, disc_rng)


def count_parameters(model_variant: str) -> int:
    """Trainable parameter count of the model used by a method."""
    rng = np.random.default_rng(0)
    return build_model(model_variant, rng).num_parameters()


# -- checkpoint container -------------------------------------------------------

MAGIC = b"DAFD"
VERSION = 1


def save_checkpoint(model: BackboneModel, path) -> None:
    """Flat binary: magic, version byte, then (name, shape, float64 payload) records."""
    chunks = [MAGIC, bytes([VERSION])]
    for name, arr in model.named_arrays().items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a DAFD checkpoint")
    if len(buf) < 5 or buf[4] != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version")
    pos, out = 5, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}Q", buf, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise DataError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    return out


def load_checkpoint(model: BackboneModel, path) -> BackboneModel:
    model.load_arrays(read_checkpoint(path))
    return model
