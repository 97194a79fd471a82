"""Raw vibration signal -> normalised Fourier-feature dataset."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, UsageError
from .fft import fft

TRUNCATE_LIMIT = 120_000
WINDOWS_PER_CLASS = 200
WINDOW_WIDTH = 1024
N_FEATURES = 512
N_CLASSES = 10
NORMALIZATION_FACTORS = (1, 8, 64, 512)


@dataclass
class RawSignal:
    samples: np.ndarray
    sampling_rate_hz: int = 12_000
    source_load: int = 0
    class_label: int = 0
    origin: str = "<memory>"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sampling_rate_hz <= 0:
            raise DataError(f"sampling rate must be positive, got {self.sampling_rate_hz}")

    def __len__(self) -> int:
        return len(self.samples)

    def with_samples(self, samples) -> "RawSignal":
        return RawSignal(samples, self.sampling_rate_hz, self.source_load, self.class_label, self.origin)


@dataclass
class WindowedDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_tag: str = "source"
    load_id: int = 0
    normalization_factor: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} do not line up"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def as_domain(self, tag: str) -> "WindowedDataset":
        return WindowedDataset(
            self.features, self.labels, tag, self.load_id, self.normalization_factor, dict(self.meta)
        )

    def renormalized(self, factor: int) -> "WindowedDataset":
        """Same windows divided by a different factor (from the raw magnitudes)."""
        raw = self.features * self.normalization_factor
        return WindowedDataset(
            normalize(raw, factor), self.labels, self.domain_tag, self.load_id, factor, dict(self.meta)
        )


def truncate(signal: RawSignal, limit: int = TRUNCATE_LIMIT) -> RawSignal:
    n = len(signal)
    if n < limit:
        raise DataError(
            f"{signal.origin}: signal has {n} samples, needs {limit} (short by {limit - n})"
        )
    return signal.with_samples(signal.samples[:limit])


def window_stride(length: int, count: int, width: int) -> int:
    if count == 1:
        if length < width:
            raise DataError(f"signal of {length} samples cannot hold a window of {width}")
        return 0
    stride = (length - width) // (count - 1)
    if length < width or stride < 1:
        raise DataError(f"signal of {length} samples too short for {count} windows of {width}")
    return stride


def window(signal, count: int = WINDOWS_PER_CLASS, width: int = WINDOW_WIDTH) -> np.ndarray:
    """``count`` evenly strided, overlapping windows as a [count, width] array.

    Window i starts at ``i * stride`` with ``stride = (len - width) // (count - 1)``.
    """
    x = signal.samples if isinstance(signal, RawSignal) else np.asarray(signal, dtype=np.float64)
    stride = window_stride(len(x), count, width)
    starts = np.arange(count) * stride
    return x[starts[:, None] + np.arange(width)]


def fft_features(windows) -> np.ndarray:
    """Magnitudes of DFT bins 0 .. n/2-1 for one window or a stack of windows."""
    w = np.asarray(windows, dtype=np.float64)
    n = w.shape[-1]
    if n < 2 or n & (n - 1):
        raise UsageError(f"window length must be a power of two, got {n}")
    return np.abs(fft(w)[..., : n // 2])


def normalize(features, factor: int) -> np.ndarray:
    if factor not in NORMALIZATION_FACTORS:
        raise ConfigurationError(f"normalization factor must be one of {NORMALIZATION_FACTORS}, got {factor}")
    return np.asarray(features, dtype=np.float64) / factor


def decimate(signal: RawSignal, factor: int = 4, prefilter: bool = False) -> RawSignal:
    """Down-sample by keeping every ``factor``-th sample.

    With ``prefilter`` a 9-tap Hamming-windowed sinc low-pass at the new
    Nyquist frequency is applied first.
    """
    if factor < 1 or signal.sampling_rate_hz % factor:
        raise ConfigurationError(f"cannot decimate {signal.sampling_rate_hz} Hz by {factor}")
    x = signal.samples
    if prefilter:
        taps = np.arange(9) - 4
        h = np.sinc(taps / factor) * np.hamming(9)
        x = np.convolve(x, h / h.sum(), mode="same")
    out = signal.with_samples(x[::factor])
    out.sampling_rate_hz = signal.sampling_rate_hz // factor
    return out


def build_dataset(
    signals: Sequence[RawSignal],
    factor: int = 1,
    windows_per_class: int = WINDOWS_PER_CLASS,
    limit: int = TRUNCATE_LIMIT,
    domain_tag: str = "source",
) -> WindowedDataset:
    """Stack the features of one load's ten class signals, class-major."""
    by_class: dict[int, RawSignal] = {}
    for s in signals:
        if s.class_label in by_class:
            raise DataError(f"class {s.class_label} supplied more than once")
        by_class[s.class_label] = s
    missing = sorted(set(range(N_CLASSES)) - set(by_class))
    if missing:
        raise DataError(f"missing classes: {missing}")
    loads = {s.source_load for s in signals}
    if len(loads) != 1:
        raise DataError(f"signals come from several loads: {sorted(loads)}")
    blocks = []
    for c in range(N_CLASSES):
        w = window(truncate(by_class[c], limit), windows_per_class, WINDOW_WIDTH)
        blocks.append(fft_features(w))
    features = normalize(np.concatenate(blocks), factor)
    labels = np.repeat(np.arange(N_CLASSES), windows_per_class)
    return WindowedDataset(features, labels, domain_tag, loads.pop(), factor)


def save_dataset_csv(ds: WindowedDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.features.shape[1])])
        for label, row in zip(ds.labels, ds.features):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def load_dataset_csv(path, load_id: int = 0, factor: int = 1, domain_tag: str = "source") -> WindowedDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or header[0] != "label":
        raise DataError(f"{path}: missing 'label,f0..' header")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return WindowedDataset(arr[:, 1:], arr[:, 0].astype(np.int64), domain_tag, load_id, factor)
