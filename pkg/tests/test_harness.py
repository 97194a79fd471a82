import csv
import io
from dataclasses import replace
from decimal import Decimal

import numpy as np
import pytest

from dafd import harness
from dafd.adaptation import AdaptationConfig
from dafd.errors import ConfigurationError, DataError
from dafd.harness import (
    ALL_TASKS,
    VALIDATION_TASK,
    HarnessConfig,
    SyntheticLoads,
    TaskReport,
    TransferTask,
    parse_config,
    read_runs_csv,
    report_csv,
    report_markdown,
    report_rows,
    round_half_up,
    run_count_meta,
    run_matrix,
    run_task,
    runs_csv,
    select_lambda,
    select_normalization,
    write_report,
)
from dafd.signal import WindowedDataset


class ToyLoads:
    """Ten tiny classes per load; ``poison`` loads carry a non-finite sample."""

    def __init__(self, per_class=4, poison=()):
        self.per_class, self.poison = per_class, set(poison)

    def dataset(self, load, factor=1):
        rng = np.random.default_rng(load)
        x = np.abs(rng.normal(0.0, 0.2, size=(10 * self.per_class, 512)))
        labels = np.repeat(np.arange(10), self.per_class)
        x[np.arange(len(x)), labels * 50] += 3.0 + 0.2 * load
        if load in self.poison:
            x[0, 0] = np.inf
        return WindowedDataset(x / factor, labels, load_id=load, normalization_factor=factor)


class NoTraining:
    def dataset(self, load, factor=1):
        raise AssertionError("no training expected")


def _quick(tmp_path, **kw):
    base = dict(adaptation=AdaptationConfig(epochs=1, batch_size=64), seeds=1, output_dir=str(tmp_path))
    base.update(kw)
    return HarnessConfig(**base)


# ---------------------------------------------------------------- tasks and rounding


def test_twelve_tasks_and_validation_task():
    assert len(ALL_TASKS) == 12 and len(set(ALL_TASKS)) == 12
    assert VALIDATION_TASK in ALL_TASKS and VALIDATION_TASK.name == "0-3"
    assert TransferTask.parse("2->1") == TransferTask(2, 1)
    for bad in ("1-1", "0-4", "x", "0-1-2"):
        with pytest.raises(ConfigurationError):
            TransferTask.parse(bad)


@pytest.mark.parametrize("value, expected", [(0.125, "0.13"), (94.985, "94.99"), (99.074999, "99.07"), (100.0, "100.00"), (2.675, "2.68")])
def test_half_up_rounding(value, expected):
    assert round_half_up(value) == Decimal(expected)


def test_task_report_aggregates():
    rep = TaskReport(TransferTask(0, 1), "none", seeds=[3], accuracies=[87.5], seconds=[1.0])
    assert rep.mean_accuracy == rep.max_accuracy == 87.5
    rep = TaskReport(TransferTask(0, 1), "none", seeds=[0, 1, 2], accuracies=[90.0, 95.0], seconds=[1.0, 3.0], failed_seeds=[1])
    assert rep.mean_accuracy == 92.5 and rep.max_accuracy == 95.0 and rep.mean_seconds == 2.0
    assert not rep.ok


# ---------------------------------------------------------------- tuning


def test_single_candidates_need_no_training():
    assert select_normalization(NoTraining(), AdaptationConfig(), [64]) == (64, {})
    assert select_lambda("dann", NoTraining(), AdaptationConfig(), pool=[10.0]) == (10.0, {})


def test_ties_pick_smallest(monkeypatch):
    monkeypatch.setattr(harness, "_task_accuracy", lambda *a, **k: 50.0)
    factor, scores = select_normalization(NoTraining(), AdaptationConfig())
    assert factor == 1 and sorted(scores) == [1, 8, 64, 512]
    lam, scores = select_lambda("mmd", NoTraining(), AdaptationConfig())
    assert lam == 0.1 and sorted(scores) == [0.1, 1.0, 10.0]


def test_argmax_prefers_later_only_when_strictly_better(monkeypatch):
    table = {1: 40.0, 8: 70.0, 64: 70.0, 512: 10.0}
    monkeypatch.setattr(harness, "_task_accuracy", lambda loads, task, cfg, factor: table[factor])
    assert select_normalization(NoTraining(), AdaptationConfig())[0] == 8


def test_tuning_errors():
    with pytest.raises(ConfigurationError):
        select_normalization(NoTraining(), AdaptationConfig(), [3])
    with pytest.raises(ConfigurationError):
        select_lambda("adabn", NoTraining(), AdaptationConfig())
    with pytest.raises(ConfigurationError):
        select_lambda("dann", NoTraining(), AdaptationConfig(), pool=[])


def test_lambda_selection_is_reproducible():
    cfg = AdaptationConfig(epochs=2)
    first = select_lambda("dann", ToyLoads(), cfg, pool=[0.1, 1.0])
    second = select_lambda("dann", ToyLoads(), cfg, pool=[0.1, 1.0])
    assert first == second


def test_tiny_features_are_not_selected():
    """At factor 512 the synthetic spectra are too small to train on in the desk budget."""
    loads = SyntheticLoads(windows_per_class=19)
    factor, scores = select_normalization(loads, AdaptationConfig(epochs=200, precision="float32"), [8, 512])
    assert factor != 512, scores


def test_missing_dataset_is_an_error(tmp_path):
    with pytest.raises(DataError):
        select_normalization(harness.DirectoryLoads(tmp_path), AdaptationConfig(), [1, 8])


# ---------------------------------------------------------------- runs and report


@pytest.fixture(scope="module")
def matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    hcfg = HarnessConfig(adaptation=AdaptationConfig(epochs=1), seeds=2, output_dir=str(out), workers=1)
    reports = run_matrix(hcfg, ToyLoads())
    return hcfg, reports


def test_report_layout(matrix):
    hcfg, reports = matrix
    rows = report_rows(reports)
    assert len(rows) == 1 + 12 + 3
    assert rows[0] == ["Task"] + [f"{t} {k}" for t in ("Baseline", "DANN", "MMD", "AdaBN") for k in ("mean", "max")]
    assert all(len(r) == 9 for r in rows)
    assert [r[0] for r in rows[13:]] == ["Average", "Train time", "Parameter"]
    assert rows[15][1::2] == ["1379998", "2694816", "1379998", "1380570"]
    for r in rows[1:14]:
        for mean, mx in zip(r[1::2], r[2::2]):
            assert 0 <= float(mean) <= 100 and (r[0] == "Train time" or float(mx) >= float(mean))


def test_every_cell_ran_with_artifacts(matrix):
    hcfg, reports = matrix
    assert len(reports) == 48 and all(r.ok and len(r.accuracies) == 2 for r in reports)
    cell = harness._cell_dir(harness.Path(hcfg.output_dir), TransferTask(1, 2), "dann", 1)
    assert (cell / "trace.csv").exists() and (cell / "model.ckpt").exists()


def test_runs_csv_roundtrip(matrix, tmp_path):
    _, reports = matrix
    path = tmp_path / "runs.csv"
    path.write_text(runs_csv(reports))
    back = read_runs_csv(path)
    assert report_csv(back) == report_csv(reports)
    bad = tmp_path / "other.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_runs_csv(bad)


def test_markdown_is_aligned(matrix):
    _, reports = matrix
    lines = report_markdown(reports).splitlines()
    assert len({len(l) for l in lines[:16]}) == 1
    assert lines[1].startswith("|:") and lines[1].endswith(":|")


def test_failures_are_reported_not_raised(tmp_path):
    hcfg = _quick(tmp_path, adaptation=AdaptationConfig(epochs=3, batch_size=64), methods=("none",), tasks=(TransferTask(1, 0), TransferTask(0, 1)))
    reports = run_matrix(hcfg, ToyLoads(poison=[1]))
    by_task = {r.task.name: r for r in reports}
    assert by_task["1-0"].failed_seeds == [0] and by_task["1-0"].accuracies == []
    assert by_task["0-1"].ok
    write_report(reports, hcfg)
    md = (tmp_path / "report.md").read_text()
    assert "Failed runs: 1-0 none seeds [0]" in md
    assert "failed" in (tmp_path / "runs.csv").read_text()


def test_repeat_runs_match_except_timing(tmp_path):
    def once(sub):
        hcfg = _quick(tmp_path / sub, seeds=2, methods=("none", "mmd"), tasks=(TransferTask(0, 2),))
        text = runs_csv(run_matrix(hcfg, ToyLoads()))
        return [row[:5] + row[6:] for row in csv.reader(io.StringIO(text))]

    assert once("a") == once("b")


def test_run_task_uses_seed_scheme(tmp_path):
    hcfg = _quick(tmp_path, seeds=2, master_seed=3, save_checkpoints=False)
    rep = run_task(TransferTask(0, 1), "none", hcfg, ToyLoads())
    assert rep.seeds == [3000, 3001]
    assert not list(tmp_path.glob("runs/*/model.ckpt"))


def test_budget_accounting():
    meta = run_count_meta(HarnessConfig(tuning_runs={"normalization": 4, "dann": 3, "mmd": 3}))
    assert "dann=3, mmd=3, adabn=0" in meta["tuning runs"]


# ---------------------------------------------------------------- config file


def test_parse_config():
    cfg = parse_config(
        """
        # desk profile
        epochs = 200
        precision = float32
        lambda_mmd = 10   # tuned
        kernel_widths = 1, 2, 4
        factor = 8
        methods = baseline, adabn
        tasks = 0-1, 2->3
        save_checkpoints = no
        noise_std = 0.05
        """
    )
    assert cfg.adaptation.epochs == 200 and cfg.adaptation.precision == "float32"
    assert cfg.adaptation.lambda_mmd == 10.0 and cfg.adaptation.kernel_widths == (1.0, 2.0, 4.0)
    assert cfg.factor == 8 and cfg.methods == ("none", "adabn")
    assert cfg.tasks == (TransferTask(0, 1), TransferTask(2, 3))
    assert cfg.save_checkpoints is False
    assert cfg.loads().spec.noise_std == 0.05
    assert parse_config("tasks = all").tasks == ALL_TASKS


@pytest.mark.parametrize("text", ["colour = red", "epochs = many", "factor = 3", "just words", "methods = tca", "precision = float16"])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_load_config_missing(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.load_config(tmp_path / "none.cfg")
