"""Transfer-task protocol: tuning on the validation task, the 12-task matrix,
and the per-task report layout (mean/max per method plus summary rows)."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adaptation import LAMBDA_POOL, METHODS, AdaptationConfig, accuracy, train, write_trace
from .data import SyntheticSpec, has_full_directory, load_directory, shifted_spec
from .errors import ConfigurationError, DataError, TrainingError
from .models import count_parameters, save_checkpoint
from .signal import NORMALIZATION_FACTORS, WINDOWS_PER_CLASS, WindowedDataset

log = logging.getLogger(__name__)

LOADS = (0, 1, 2, 3)
# column order of the report
REPORT_METHODS = ("none", "dann", "mmd", "adabn")
METHOD_TITLES = {"none": "Baseline", "dann": "DANN", "mmd": "MMD", "adabn": "AdaBN"}


@dataclass(frozen=True, order=True)
class TransferTask:
    source_load: int
    target_load: int

    def __post_init__(self):
        if self.source_load not in LOADS or self.target_load not in LOADS:
            raise ConfigurationError(f"loads must be in {LOADS}, got {self.source_load}->{self.target_load}")
        if self.source_load == self.target_load:
            raise ConfigurationError("a transfer task needs two different loads")

    @property
    def name(self) -> str:
        return f"{self.source_load}-{self.target_load}"

    @classmethod
    def parse(cls, text: str) -> "TransferTask":
        parts = text.replace("->", "-").split("-")
        if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
            raise ConfigurationError(f"task must look like '0-3', got {text!r}")
        return cls(int(parts[0]), int(parts[1]))


ALL_TASKS = tuple(TransferTask(s, t) for s in LOADS for t in LOADS if s != t)
VALIDATION_TASK = TransferTask(0, 3)


def round_half_up(value: float, places: int = 2) -> Decimal:
    return Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class TaskReport:
    task: TransferTask
    method: str
    seeds: list[int] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    parameters: int = 0
    failed_seeds: list[int] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def max_accuracy(self) -> float:
        return float(np.max(self.accuracies)) if self.accuracies else float("nan")

    @property
    def mean_seconds(self) -> float:
        return float(np.mean(self.seconds)) if self.seconds else float("nan")

    @property
    def ok(self) -> bool:
        return not self.failed_seeds


# ----------------------------------------------------------------------
# datasets


class SyntheticLoads:
    """Four synthetic loads: load k is the source generator at shift level k."""

    def __init__(self, spec: SyntheticSpec | None = None, windows_per_class: int = WINDOWS_PER_CLASS):
        self.spec = spec if spec is not None else SyntheticSpec(load_id=0)
        self.windows_per_class = windows_per_class
        self._raw: dict[int, WindowedDataset] = {}

    def spec_for(self, load: int) -> SyntheticSpec:
        return self.spec if load == 0 else shifted_spec(self.spec, load)

    def dataset(self, load: int, factor: int = 1) -> WindowedDataset:
        from .data import synthesize_dataset

        if load not in LOADS:
            raise DataError(f"no synthetic load {load}")
        if load not in self._raw:
            self._raw[load] = synthesize_dataset(self.spec_for(load), 1, self.windows_per_class)
        return self._raw[load].renormalized(factor)


class DirectoryLoads:
    """Flat signal files ``load<L>_class<C>.<f32|csv>`` in one directory."""

    def __init__(self, directory, windows_per_class: int = WINDOWS_PER_CLASS):
        self.directory = Path(directory)
        self.windows_per_class = windows_per_class
        self._raw: dict[int, WindowedDataset] = {}

    def available(self) -> bool:
        return has_full_directory(self.directory)

    def dataset(self, load: int, factor: int = 1) -> WindowedDataset:
        if load not in self._raw:
            self._raw[load] = load_directory(self.directory, load, 1, windows_per_class=self.windows_per_class)
        return self._raw[load].renormalized(factor)


# ----------------------------------------------------------------------
# tuning


def _task_accuracy(loads, task: TransferTask, cfg: AdaptationConfig, factor: int) -> float:
    src = loads.dataset(task.source_load, factor)
    tgt = loads.dataset(task.target_load, factor).as_domain("target")
    return accuracy(train(src, tgt, cfg).model, tgt)


def _argmax_first(values: Sequence[float], scores: Sequence[float]):
    """Highest score; ties keep the earliest (smallest) candidate."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return values[best]


def select_normalization(
    loads,
    cfg: AdaptationConfig,
    candidates: Iterable[int] = NORMALIZATION_FACTORS,
    task: TransferTask = VALIDATION_TASK,
) -> tuple[int, dict[int, float]]:
    """Factor maximizing source-only accuracy on the validation task."""
    candidates = sorted(set(int(c) for c in candidates))
    bad = [c for c in candidates if c not in NORMALIZATION_FACTORS]
    if not candidates or bad:
        raise ConfigurationError(f"normalization candidates must be drawn from {NORMALIZATION_FACTORS}")
    if len(candidates) == 1:
        return candidates[0], {}
    base = replace(cfg, method="none")
    scores = {c: _task_accuracy(loads, task, base, c) for c in candidates}
    return _argmax_first(candidates, [scores[c] for c in candidates]), scores


def select_lambda(
    method: str,
    loads,
    cfg: AdaptationConfig,
    factor: int = 1,
    pool: Iterable[float] = LAMBDA_POOL,
    task: TransferTask = VALIDATION_TASK,
) -> tuple[float, dict[float, float]]:
    """Pool value with the best validation-task target accuracy (one fixed seed)."""
    if method not in ("dann", "mmd"):
        raise ConfigurationError(f"lambda selection applies to dann and mmd, not {method!r}")
    pool = sorted(set(float(p) for p in pool))
    if not pool:
        raise ConfigurationError("empty lambda pool")
    if len(pool) == 1:
        return pool[0], {}
    key = "lambda_d" if method == "dann" else "lambda_mmd"
    scores = {lam: _task_accuracy(loads, task, replace(cfg, method=method, **{key: lam}), factor) for lam in pool}
    return _argmax_first(pool, [scores[p] for p in pool]), scores


# ----------------------------------------------------------------------
# runs


@dataclass
class HarnessConfig:
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    data_dir: str | None = None
    synthetic_seed: int = 0
    windows_per_class: int = WINDOWS_PER_CLASS
    factor: int = 1
    seeds: int = 5
    master_seed: int = 0
    workers: int = 0
    methods: tuple[str, ...] = REPORT_METHODS
    tasks: tuple[TransferTask, ...] = ALL_TASKS
    output_dir: str = "results"
    save_checkpoints: bool = True
    generator: dict = field(default_factory=dict)
    tuning_runs: dict = field(default_factory=dict)

    def seed_list(self) -> list[int]:
        return [self.master_seed * 1000 + i for i in range(self.seeds)]

    def loads(self):
        if self.data_dir:
            return DirectoryLoads(self.data_dir, self.windows_per_class)
        spec = SyntheticSpec(load_id=0, seed=self.synthetic_seed, **self.generator)
        return SyntheticLoads(spec, self.windows_per_class)

    def worker_count(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


# Desk profile: 200 epochs over 19 windows per class (3 steps of 64 per epoch).
# factor and lambdas are the output of `dafd tune` under these settings on
# synthetic task 0-3; see the decisions ledger for the scores.
DESK_ADAPTATION = dict(epochs=200, precision="float32", lambda_d=0.1, lambda_mmd=1.0)
DESK_HARNESS = dict(windows_per_class=19, factor=1, seeds=5,
                    tuning_runs={"normalization": 4, "dann": 3, "mmd": 3})


def desk_config(**overrides) -> HarnessConfig:
    """Laptop-scale synthetic profile used by the acceptance suite."""
    kw = dict(DESK_HARNESS, adaptation=AdaptationConfig(**DESK_ADAPTATION))
    kw.update(overrides)
    return HarnessConfig(**kw)


def cwru_reduced_config(data_dir, **overrides) -> HarnessConfig:
    """300-epoch full-size profile for real flat files; lambdas re-tuned with `dafd tune`."""
    kw = dict(data_dir=str(data_dir), adaptation=AdaptationConfig(epochs=300, precision="float32"))
    kw.update(overrides)
    return HarnessConfig(**kw)


def _cell_dir(out: Path, task: TransferTask, method: str, seed: int) -> Path:
    return out / "runs" / f"{task.name}_{method}_s{seed}"


def _run_cell(hcfg: HarnessConfig, task: TransferTask, method: str, seed: int, loads=None) -> dict:
    loads = loads if loads is not None else hcfg.loads()
    cfg = replace(hcfg.adaptation, method=method, seed=seed)
    src = loads.dataset(task.source_load, hcfg.factor)
    tgt = loads.dataset(task.target_load, hcfg.factor).as_domain("target")
    try:
        result = train(src, tgt, cfg)
    except TrainingError as exc:
        log.warning("task %s %s seed %d failed: %s", task.name, method, seed, exc)
        return {"seed": seed, "status": "failed", "error": str(exc)}
    acc = accuracy(result.model, tgt)
    if hcfg.output_dir:
        d = _cell_dir(Path(hcfg.output_dir), task, method, seed)
        d.mkdir(parents=True, exist_ok=True)
        write_trace(result.records, d / "trace.csv")
        if hcfg.save_checkpoints:
            save_checkpoint(result.model, d / "model.ckpt")
    return {"seed": seed, "status": "ok", "accuracy": acc, "seconds": result.seconds}


def _collect(task: TransferTask, method: str, cells: list[dict]) -> TaskReport:
    rep = TaskReport(task, method, parameters=count_parameters(method))
    for c in sorted(cells, key=lambda c: c["seed"]):
        rep.seeds.append(c["seed"])
        if c["status"] == "ok":
            rep.accuracies.append(c["accuracy"])
            rep.seconds.append(c["seconds"])
        else:
            rep.failed_seeds.append(c["seed"])
    return rep


def run_task(task: TransferTask, method: str, hcfg: HarnessConfig, loads=None) -> TaskReport:
    """All seeds of one (task, method) cell, in this process."""
    loads = loads if loads is not None else hcfg.loads()
    cells = [_run_cell(hcfg, task, method, s, loads) for s in hcfg.seed_list()]
    return _collect(task, method, cells)


def _run_cell_star(args):
    return args[1:3], _run_cell(*args)


def run_matrix(hcfg: HarnessConfig, loads=None) -> list[TaskReport]:
    """Every configured task x method x seed; failures are recorded, not raised."""
    jobs = [(t, m, s) for t in hcfg.tasks for m in hcfg.methods for s in hcfg.seed_list()]
    results: dict[tuple, list[dict]] = {}
    workers = min(hcfg.worker_count(), len(jobs)) if jobs else 1
    if workers <= 1:
        loads = loads if loads is not None else hcfg.loads()
        for t, m, s in jobs:
            results.setdefault((t, m), []).append(_run_cell(hcfg, t, m, s, loads))
    else:
        with ProcessPoolExecutor(workers) as pool:
            for key, cell in pool.map(_run_cell_star, [(hcfg, t, m, s) for t, m, s in jobs]):
                results.setdefault(tuple(key), []).append(cell)
    return [_collect(t, m, results.get((t, m), [])) for t in hcfg.tasks for m in hcfg.methods]


# ----------------------------------------------------------------------
# report layout


def _fmt(value: float) -> str:
    return "" if not np.isfinite(value) else str(round_half_up(value))


def report_rows(reports: Sequence[TaskReport], methods: Sequence[str] = REPORT_METHODS) -> list[list[str]]:
    """Header, one row per task, then the Average, Train time and Parameter rows."""
    by_key = {(r.task, r.method): r for r in reports}
    tasks = sorted({r.task for r in reports}, key=lambda t: (t.source_load, t.target_load))
    header = ["Task"] + [f"{METHOD_TITLES[m]} {k}" for m in methods for k in ("mean", "max")]
    rows = [header]
    for t in tasks:
        row = [t.name]
        for m in methods:
            r = by_key.get((t, m))
            row += [_fmt(r.mean_accuracy), _fmt(r.max_accuracy)] if r else ["", ""]
        rows.append(row)
    avg, tim, par = ["Average"], ["Train time"], ["Parameter"]
    for m in methods:
        reps = [by_key[(t, m)] for t in tasks if (t, m) in by_key]
        means = [r.mean_accuracy for r in reps if r.accuracies]
        maxes = [r.max_accuracy for r in reps if r.accuracies]
        secs = [r.mean_seconds for r in reps if r.seconds]
        avg += [_fmt(np.mean(means)) if means else "", _fmt(np.mean(maxes)) if maxes else ""]
        tim += [_fmt(np.mean(secs)) if secs else "", ""]
        par += [str(count_parameters(m)), ""]
    return rows + [avg, tim, par]


def report_csv(reports: Sequence[TaskReport], methods: Sequence[str] = REPORT_METHODS) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(report_rows(reports, methods))
    return buf.getvalue()


def report_markdown(reports: Sequence[TaskReport], methods: Sequence[str] = REPORT_METHODS, meta: dict | None = None) -> str:
    rows = report_rows(reports, methods)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    line = lambda r: "| " + " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) + " |"
    out = [line(rows[0]), "|" + "|".join(("-" * (w + 1) + ":") if i else ":" + "-" * (w + 1) for i, w in enumerate(widths)) + "|"]
    out += [line(r) for r in rows[1:]]
    failed = [f"{r.task.name} {r.method} seeds {r.failed_seeds}" for r in reports if r.failed_seeds]
    if failed:
        out += ["", "Failed runs: " + "; ".join(failed)]
    if meta:
        out += [""] + [f"- {k}: {v}" for k, v in meta.items()]
    return "\n".join(out) + "\n"


RUNS_HEADER = ["task", "method", "seed", "status", "accuracy", "seconds", "parameters"]


def runs_csv(reports: Sequence[TaskReport]) -> str:
    """Long form, one line per seed; the report tables can be rebuilt from it."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNS_HEADER)
    for r in reports:
        accs, secs = iter(r.accuracies), iter(r.seconds)
        for s in r.seeds:
            if s in r.failed_seeds:
                w.writerow([r.task.name, r.method, s, "failed", "", "", r.parameters])
            else:
                w.writerow([r.task.name, r.method, s, "ok", repr(next(accs)), f"{next(secs):.3f}", r.parameters])
    return buf.getvalue()


def read_runs_csv(path) -> list[TaskReport]:
    reports: dict[tuple, TaskReport] = {}
    with Path(path).open(newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != RUNS_HEADER:
            raise DataError(f"{path}: not a runs file (header {rd.fieldnames})")
        for row in rd:
            task = TransferTask.parse(row["task"])
            rep = reports.setdefault((task, row["method"]), TaskReport(task, row["method"], parameters=int(row["parameters"])))
            seed = int(row["seed"])
            rep.seeds.append(seed)
            if row["status"] == "ok":
                rep.accuracies.append(float(row["accuracy"]))
                rep.seconds.append(float(row["seconds"]))
            else:
                rep.failed_seeds.append(seed)
    return list(reports.values())


def run_count_meta(hcfg: HarnessConfig) -> dict:
    """Tuning budget accounting: equal pool sizes for DANN and MMD, none for AdaBN."""
    runs = {"normalization": 0, "dann": 0, "mmd": 0, "adabn": 0}
    runs.update(hcfg.tuning_runs)
    return {
        "tuning runs": ", ".join(f"{k}={v}" for k, v in runs.items()),
        "seeds per cell": hcfg.seeds,
        "epochs": hcfg.adaptation.epochs,
        "normalization factor": hcfg.factor,
        "lambda_d": hcfg.adaptation.lambda_d,
        "lambda_mmd": hcfg.adaptation.lambda_mmd,
        "master seed": hcfg.master_seed,
    }


def write_report(reports: Sequence[TaskReport], hcfg: HarnessConfig, out_dir=None) -> Path:
    out = Path(out_dir or hcfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = [m for m in REPORT_METHODS if m in hcfg.methods]
    (out / "report.csv").write_text(report_csv(reports, methods))
    (out / "report.md").write_text(report_markdown(reports, methods, run_count_meta(hcfg)))
    (out / "runs.csv").write_text(runs_csv(reports))
    return out


# ----------------------------------------------------------------------
# config file

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigurationError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


_ADAPT_KEYS = {"method": str, "lambda_d": float, "lambda_mmd": float, "epochs": int, "batch_size": int,
               "learning_rate": float, "precision": str}
_HARNESS_KEYS = {"data_dir": str, "synthetic_seed": int, "windows_per_class": int, "factor": int, "seeds": int,
                 "master_seed": int, "workers": int, "output_dir": str, "save_checkpoints": bool}
_SPEC_KEYS = {"noise_std": float, "decay_ms": float, "jitter": float, "rotation_amplitude": float}


def parse_config(text: str) -> HarnessConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    adapt, harness, spec = {}, {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _ADAPT_KEYS:
            adapt[key] = _parse_value(key, raw, _ADAPT_KEYS[key])
        elif key == "kernel_widths":
            adapt[key] = tuple(_parse_value(key, v.strip(), float) for v in raw.split(","))
        elif key in _HARNESS_KEYS:
            harness[key] = _parse_value(key, raw, _HARNESS_KEYS[key])
        elif key in _SPEC_KEYS:
            spec[key] = _parse_value(key, raw, _SPEC_KEYS[key])
        elif key == "methods":
            ms = tuple("none" if m.strip() == "baseline" else m.strip() for m in raw.split(","))
            unknown = [m for m in ms if m not in METHODS]
            if unknown:
                raise ConfigurationError(f"unknown methods {unknown}")
            harness[key] = ms
        elif key == "tasks":
            harness[key] = ALL_TASKS if raw == "all" else tuple(TransferTask.parse(t.strip()) for t in raw.split(","))
        else:
            raise ConfigurationError(f"config line {n}: unknown key {key!r}")
    if harness.get("factor", 1) not in NORMALIZATION_FACTORS:
        raise ConfigurationError(f"factor must be one of {NORMALIZATION_FACTORS}")
    return HarnessConfig(adaptation=AdaptationConfig(**adapt), generator=spec, **harness)


def load_config(path) -> HarnessConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
