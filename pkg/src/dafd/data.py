"""Label taxonomy, raw-file ingestion and a synthetic bearing-like generator."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .signal import (
    N_CLASSES,
    TRUNCATE_LIMIT,
    WINDOWS_PER_CLASS,
    RawSignal,
    WindowedDataset,
    build_dataset,
)


class ClassLabel(NamedTuple):
    id: int
    location: str
    size_mils: int


CLASS_LABELS = (
    ClassLabel(0, "NA", 0),
    ClassLabel(1, "IF", 7),
    ClassLabel(2, "IF", 14),
    ClassLabel(3, "IF", 21),
    ClassLabel(4, "BF", 7),
    ClassLabel(5, "BF", 14),
    ClassLabel(6, "BF", 21),
    ClassLabel(7, "OF", 7),
    ClassLabel(8, "OF", 14),
    ClassLabel(9, "OF", 21),
)


def class_label(class_id: int) -> ClassLabel:
    if not 0 <= class_id < N_CLASSES:
        raise DataError(f"class id must be in [0, {N_CLASSES}), got {class_id}")
    return CLASS_LABELS[class_id]


def class_id(location: str, size_mils: int) -> int:
    for c in CLASS_LABELS:
        if c.location == location and c.size_mils == size_mils:
            return c.id
    raise DataError(f"no class for location={location!r}, size={size_mils}")


# ----------------------------------------------------------------------
# flat files

_NAME = re.compile(r"^load(\d+)_class(\d+)\.(f32|csv)$")


class FileNameError(DataError):
    pass


class MetadataMismatchError(DataError):
    pass


class MalformedFileError(DataError):
    pass


class EmptyFileError(DataError):
    pass


def signal_filename(load: int, cls: int, fmt: str = "f32") -> str:
    return f"load{load}_class{cls}.{fmt}"


def parse_signal_filename(path) -> tuple[int, int, str]:
    m = _NAME.match(Path(path).name)
    if not m:
        raise FileNameError(f"{path}: expected a name like load<i>_class<j>.(f32|csv)")
    return int(m.group(1)), int(m.group(2)), m.group(3)


def load_signal_file(path, expected: tuple[int, int] | None = None, sampling_rate_hz: int = 12_000) -> RawSignal:
    path = Path(path)
    load, cls, fmt = parse_signal_filename(path)
    if expected is not None and (load, cls) != tuple(expected):
        raise MetadataMismatchError(
            f"{path.name}: file holds load {load} class {cls}, expected load {expected[0]} class {expected[1]}"
        )
    raw = path.read_bytes()
    if not raw.strip():
        raise EmptyFileError(f"{path}: file is empty")
    if fmt == "f32":
        if len(raw) % 4:
            raise MalformedFileError(f"{path}: {len(raw)} bytes is not a whole number of float32 values")
        samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        try:
            samples = np.array([float(line) for line in raw.decode("ascii").splitlines() if line.strip()])
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedFileError(f"{path}: not a single column of decimal numbers ({exc})") from None
    if not np.all(np.isfinite(samples)):
        raise MalformedFileError(f"{path}: contains non-finite samples")
    return RawSignal(samples, sampling_rate_hz, load, cls, origin=str(path))


def write_signal_file(signal: RawSignal, directory, fmt: str = "f32") -> Path:
    path = Path(directory) / signal_filename(signal.source_load, signal.class_label, fmt)
    if fmt == "f32":
        path.write_bytes(np.asarray(signal.samples, dtype="<f4").tobytes())
    else:
        path.write_text("".join(f"{v!r}\n" for v in signal.samples.tolist()))
    return path


def find_signal_files(directory, load: int) -> list[Path]:
    directory = Path(directory)
    found = {}
    for p in sorted(directory.iterdir()):
        m = _NAME.match(p.name)
        if m and int(m.group(1)) == load:
            cls = int(m.group(2))
            if cls in found:
                raise DataError(f"load {load} class {cls} present in more than one format")
            found[cls] = p
    return [found[c] for c in sorted(found)]


def load_directory(directory, load: int, factor: int = 1, **kwargs) -> WindowedDataset:
    """Build the dataset of one load from ``load<i>_class<j>`` files."""
    files = find_signal_files(directory, load)
    if not files:
        raise DataError(f"no signal files for load {load} in {directory}")
    signals = [load_signal_file(p) for p in files]
    return build_dataset(signals, factor, **kwargs)


def has_full_directory(directory, loads=(0, 1, 2, 3)) -> bool:
    try:
        return all(len(find_signal_files(directory, l)) == N_CLASSES for l in loads)
    except (OSError, DataError):
        return False


# ----------------------------------------------------------------------
# synthetic generator

# shaft speed per load (plumbing defaults roughly matching 1797..1730 rpm)
ROTATION_HZ = {0: 29.9, 1: 29.2, 2: 28.8, 3: 28.5}
# characteristic defect frequencies as multiples of shaft speed
FAULT_MULTIPLIERS = {"IF": 5.4152, "BF": 4.7135, "OF": 3.5848}
# impulse amplitude per defect size; structural resonance per defect location
IMPULSE_AMPLITUDE = {7: 2.0, 14: 4.0, 21: 8.0}
RESONANCE_HZ = {"IF": (1100.0, 3400.0, 5000.0), "BF": (2000.0, 2900.0, 4300.0), "OF": (1500.0, 3900.0, 4600.0)}
# larger defects shift the excited modes
SIZE_SHIFT_HZ = {7: -250.0, 14: 0.0, 21: 250.0}
# impulse amplitude modulation as a multiple of shaft speed: an inner-race defect
# turns with the shaft, a ball with the cage, an outer-race defect is stationary
MODULATION_MULTIPLIERS = {"IF": 1.0, "BF": 0.3983, "OF": 0.0}


@dataclass(frozen=True)
class SyntheticSpec:
    load_id: int = 0
    base_rotation_hz: float | None = None
    fault_multipliers: dict = field(default_factory=lambda: dict(FAULT_MULTIPLIERS))
    impulse_amplitude: dict = field(default_factory=lambda: dict(IMPULSE_AMPLITUDE))
    resonance_hz: dict = field(default_factory=lambda: dict(RESONANCE_HZ))
    amplitude_scale: float = 1.0
    rotation_amplitude: float = 0.3
    modulation_depth: float = 0.5
    decay_ms: float = 0.15
    jitter: float = 0.002
    noise_std: float = 0.02
    sampling_rate_hz: int = 12_000
    seed: int = 0

    @property
    def rotation_hz(self) -> float:
        if self.base_rotation_hz is not None:
            return float(self.base_rotation_hz)
        return ROTATION_HZ[self.load_id]

    def validate(self) -> None:
        nyquist = self.sampling_rate_hz / 2
        top = max(
            [self.rotation_hz]
            + [m * self.rotation_hz for m in self.fault_multipliers.values()]
            + [f for modes in self.resonance_hz.values() for f in modes]
        )
        if top >= nyquist:
            raise DataError(f"synthetic frequency {top} Hz is not below Nyquist {nyquist} Hz")
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")


def synthesize_signal(spec: SyntheticSpec, cls, n: int = TRUNCATE_LIMIT) -> RawSignal:
    """Shaft sinusoid + defect impulse train through a decaying resonance + noise."""
    spec.validate()
    label = cls if isinstance(cls, ClassLabel) else class_label(int(cls))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.load_id, label.id]))
    fs = spec.sampling_rate_hz
    t = np.arange(n) / fs
    fr = spec.rotation_hz
    x = spec.rotation_amplitude * np.sin(2 * np.pi * fr * t + rng.uniform(0, 2 * np.pi))
    if label.location != "NA":
        period = fs / (spec.fault_multipliers[label.location] * fr)
        count = int(n / period) + 1
        times = np.arange(count) * period + rng.uniform(0, period)
        times += rng.normal(0.0, spec.jitter * period, count)
        idx = np.round(times).astype(np.int64)
        idx = idx[(idx >= 0) & (idx < n)]
        train = np.zeros(n)
        amp = spec.impulse_amplitude[label.size_mils] * spec.amplitude_scale
        fm = MODULATION_MULTIPLIERS[label.location] * fr
        if fm > 0:
            amp = amp * (1.0 + spec.modulation_depth * np.cos(2 * np.pi * fm * idx / fs + rng.uniform(0, 2 * np.pi)))
        np.add.at(train, idx, amp)
        decay = spec.decay_ms * 1e-3 * fs
        k = np.arange(int(6 * decay))
        modes = [f + SIZE_SHIFT_HZ[label.size_mils] for f in spec.resonance_hz[label.location]]
        ring = np.exp(-k / decay) * sum(np.sin(2 * np.pi * f * k / fs) for f in modes)
        x = x + np.convolve(train, ring)[:n]
    if spec.noise_std > 0:
        x = x + rng.normal(0.0, spec.noise_std, n)
    return RawSignal(x, fs, spec.load_id, label.id, origin=f"synthetic(load={spec.load_id}, class={label.id})")


def synthesize_dataset(
    spec: SyntheticSpec,
    factor: int = 1,
    windows_per_class: int = WINDOWS_PER_CLASS,
    limit: int = TRUNCATE_LIMIT,
    domain_tag: str = "source",
) -> WindowedDataset:
    signals = [synthesize_signal(spec, c, limit) for c in range(N_CLASSES)]
    ds = build_dataset(signals, factor, windows_per_class, limit, domain_tag)
    ds.meta["spec"] = spec
    return ds


def synthesize_domain_pair(
    spec_source: SyntheticSpec,
    spec_target: SyntheticSpec,
    factor: int = 1,
    windows_per_class: int = WINDOWS_PER_CLASS,
    limit: int = TRUNCATE_LIMIT,
) -> tuple[WindowedDataset, WindowedDataset]:
    if spec_source == spec_target:
        warnings.warn("source and target specs are identical; there is no shift to adapt", stacklevel=2)
    src = synthesize_dataset(spec_source, factor, windows_per_class, limit, "source")
    tgt = synthesize_dataset(spec_target, factor, windows_per_class, limit, "target")
    return src, tgt


# calibrated shift levels: (relative drop in shaft speed, impulse amplitude scale).
# Defect lines sit at multiples of shaft speed, so even a fraction of a percent
# moves the upper harmonics by whole bins.
SHIFT_LEVELS = {0: (0.0, 1.0), 1: (0.002, 1.25), 2: (0.005, 1.5), 3: (0.01, 1.75)}


def shifted_spec(source: SyntheticSpec, level: int, seed: int | None = None, load_id: int | None = None) -> SyntheticSpec:
    """Target spec at a calibrated shift level relative to ``source``.

    By default the target is synthetic load ``level`` with seed ``source.seed + level``.
    """
    if level not in SHIFT_LEVELS:
        raise DataError(f"shift level must be one of {sorted(SHIFT_LEVELS)}, got {level}")
    drop, scale = SHIFT_LEVELS[level]
    return replace(
        source,
        load_id=level if load_id is None else load_id,
        base_rotation_hz=source.rotation_hz * (1.0 - drop),
        amplitude_scale=source.amplitude_scale * scale,
        seed=source.seed + level if seed is None else seed,
    )


def calibrated_pair(
    level: int = 2,
    seed: int = 0,
    factor: int = 1,
    windows_per_class: int = WINDOWS_PER_CLASS,
    limit: int = TRUNCATE_LIMIT,
) -> tuple[WindowedDataset, WindowedDataset]:
    """Synthetic load 0 and its shifted counterpart at ``level``."""
    src_spec = SyntheticSpec(load_id=0, seed=seed)
    if level == 0:
        # same generator, fresh seed: the no-shift control
        return synthesize_domain_pair(src_spec, replace(src_spec, seed=seed + 1), factor, windows_per_class, limit)
    return synthesize_domain_pair(src_spec, shifted_spec(src_spec, level), factor, windows_per_class, limit)
