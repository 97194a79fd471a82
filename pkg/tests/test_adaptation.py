import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dafd import autodiff as ad
from dafd.adaptation import (
    AdaptationConfig,
    accuracy,
    adapt_adabn,
    mmd_multikernel,
    proxy_a_distance,
    train,
    train_baseline,
    train_dann,
    train_mmd,
    write_trace,
)
from dafd.autodiff import Tape, Tensor
from dafd.errors import ConfigurationError, DataError, TrainingError, UsageError
from dafd.models import build_model
from dafd.optim import seeded_streams
from dafd.signal import WindowedDataset

from oracles import central_difference, naive_mmd, rel_err


def toy(n_per_class=32, seed=0, shift=0.0, scale=1.0, classes=2):
    """Each class lights up its own block of bins; ``shift/scale`` move the domain."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    block = 512 // classes
    for c in range(classes):
        x = np.abs(rng.normal(0.0, 0.3, size=(n_per_class, 512)))
        x[:, c * block : (c + 1) * block] += 2.0
        rows.append(scale * x + shift)
        labels += [c] * n_per_class
    return WindowedDataset(np.concatenate(rows), np.array(labels))


# ---------------------------------------------------------------- MMD


def test_mmd_identical_batches_is_exactly_zero():
    x = np.random.default_rng(0).normal(size=(6, 4))
    assert float(mmd_multikernel(x, x).data) == 0.0


@given(st.floats(-5, 5), st.sampled_from([0.5, 1.0, 3.0]))
@settings(max_examples=30, deadline=None)
def test_mmd_closed_form_single_width(x, sigma):
    val = float(mmd_multikernel(np.zeros((2, 1)), np.full((2, 1), x), [sigma]).data)
    assert val == pytest.approx(2 - 2 * np.exp(-x * x / (2 * sigma * sigma)), abs=1e-12)


def test_mmd_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    widths = (1.0, 2.0, 4.0, 8.0, 16.0)
    for _ in range(20):
        bs, bt, d = rng.integers(1, 9, size=3)
        xs, xt = rng.normal(size=(bs, d)), rng.normal(1.0, 2.0, size=(bt, d))
        got = float(mmd_multikernel(xs, xt, widths).data)
        assert abs(got - naive_mmd(xs, xt, widths)) < 1e-10
        assert got >= -1e-12


def test_mmd_gradient():
    rng = np.random.default_rng(2)
    xs, xt = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    a, b = Tensor(xs.copy(), requires_grad=True), Tensor(xt.copy(), requires_grad=True)
    with Tape() as tape:
        loss = mmd_multikernel(a, b, (0.5, 2.0))
    tape.backward(loss)
    fd = central_difference(lambda: float(mmd_multikernel(xs, xt, (0.5, 2.0)).data), [xs, xt])
    assert rel_err(a.grad, fd[0]) < 1e-4 and rel_err(b.grad, fd[1]) < 1e-4


def test_mmd_empty_batch():
    with pytest.raises(UsageError):
        mmd_multikernel(np.zeros((0, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs",
    [dict(method="tca"), dict(kernel_widths=(1.0, 0.0)), dict(lambda_d=-1.0), dict(batch_size=1), dict(precision="float16")],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        AdaptationConfig(**kwargs)


def test_baseline_alias():
    assert AdaptationConfig(method="baseline").method == "none"


# ---------------------------------------------------------------- training loop


def _snapshot(model):
    return {p.name: p.data.copy() for p in model.parameters()}


def test_zero_epochs_returns_initialization():
    cfg = AdaptationConfig(epochs=0, seed=4)
    res = train_baseline(toy(), cfg)
    fresh = build_model("baseline", seeded_streams(4)["init"])
    for p, q in zip(res.model.parameters(), fresh.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    assert res.records == []


def test_same_seed_same_parameters():
    cfg = AdaptationConfig(epochs=2, seed=5)
    a, b = train_baseline(toy(), cfg).model, train_baseline(toy(), cfg).model
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_separable_toy_is_learned():
    ds = toy(64)
    res = train_baseline(ds, AdaptationConfig(epochs=50, seed=0, precision="float32"))
    assert accuracy(res.model, ds) >= 99.0
    assert len(res.records) == 50
    assert all(np.isfinite(r.l_clf) for r in res.records)


def test_float32_training_starts_from_float64_draws():
    ds = toy()
    lo = train_baseline(ds, AdaptationConfig(epochs=0, precision="float32")).model
    hi = train_baseline(ds, AdaptationConfig(epochs=0)).model
    assert lo.dtype == np.float32
    for p, q in zip(lo.parameters(), hi.parameters()):
        np.testing.assert_array_equal(p.data, q.data.astype(np.float32))


@pytest.mark.parametrize("method, key", [("dann", "lambda_d"), ("mmd", "lambda_mmd")])
def test_lambda_zero_matches_baseline(method, key):
    src, tgt = toy(seed=1), toy(seed=2, scale=1.5)
    cfg = AdaptationConfig(epochs=3, seed=7, **{key: 0.0})
    base = train_baseline(src, cfg).model
    adapted = train(src, tgt, replace(cfg, method=method)).model
    for p, q in zip(base.extractor_parameters() + base.classifier_parameters(),
                    adapted.extractor_parameters() + adapted.classifier_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), p.name


def test_grl_realizes_min_max():
    """d total / d theta_d = +dL_d/dtheta_d; d total / d theta_e = dL_clf/dtheta_e - lambda dL_d/dtheta_e."""
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3))
    we, wl, wd = (Tensor(rng.normal(size=s), requires_grad=True) for s in [(3, 2), (2, 2), (2, 2)])
    y, dom, lam = np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), 0.7

    def grads(fn):
        for t in (we, wl, wd):
            t.grad = None
        with Tape() as tape:
            loss = fn()
        tape.backward(loss)
        return [None if t.grad is None else t.grad.copy() for t in (we, wl, wd)]

    z = lambda: ad.sigmoid(ad.matmul(Tensor(x), we))
    l_clf = lambda f: ad.softmax_cross_entropy(ad.matmul(f, wl), y)
    l_d = lambda f: ad.softmax_cross_entropy(ad.matmul(f, wd), dom)
    total = grads(lambda: ad.add(l_clf(z()), l_d(ad.gradient_reversal(z(), lam))))
    only_clf = grads(lambda: l_clf(z()))
    only_d = grads(lambda: l_d(z()))
    np.testing.assert_allclose(total[2], only_d[2], rtol=1e-12)
    np.testing.assert_allclose(total[0], only_clf[0] - lam * only_d[0], rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(total[1], only_clf[1], rtol=1e-12)


def test_adaptation_needs_target():
    with pytest.raises(DataError):
        train_dann(toy(), None, AdaptationConfig(method="dann", epochs=1))
    with pytest.raises(DataError):
        train_mmd(toy(), WindowedDataset(np.zeros((0, 512)), np.zeros(0)), AdaptationConfig(method="mmd", epochs=1))


def test_non_finite_loss_aborts():
    ds = toy()
    ds.features[0, 0] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        # ReLU masks the NaN forward on the first step, the poisoned update shows on the next
        train_baseline(ds, AdaptationConfig(epochs=3, batch_size=ds.features.shape[0]))


def test_records_and_trace(tmp_path):
    res = train(toy(seed=1), toy(seed=2, scale=2.0), AdaptationConfig(method="mmd", epochs=2))
    assert [r.epoch for r in res.records] == [0, 1]
    assert all(r.l_align > 0 for r in res.records)
    path = tmp_path / "trace.csv"
    write_trace(res.records, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "l_clf", "l_align", "ms"] and len(rows) == 3


def test_mmd_training_reduces_feature_discrepancy():
    src, tgt = toy(seed=1), toy(seed=2, scale=1.6, shift=0.3)
    cfg = AdaptationConfig(epochs=30, lambda_mmd=10.0, seed=1, precision="float32")
    xs, xt = src.features.astype(np.float32), tgt.features.astype(np.float32)

    def gap(model):
        return float(mmd_multikernel(model.features(xs), model.features(xt)).data)

    assert gap(train(src, tgt, replace(cfg, method="mmd")).model) < gap(train_baseline(src, cfg).model)


# ---------------------------------------------------------------- AdaBN


def _bn_model(seed=0):
    res = train_baseline(toy(seed=3), AdaptationConfig(epochs=3, seed=seed), variant="bn")
    return res.model


def test_adabn_leaves_parameters_untouched():
    model = _bn_model()
    before = _snapshot(model)
    adapted = adapt_adabn(model, toy(seed=4, shift=1.0))
    for p in adapted.parameters():
        assert p.data.tobytes() == before[p.name].tobytes()
    # the source model itself is not modified either
    assert all(model.named_arrays()[k].tobytes() == v.tobytes() for k, v in before.items())


def test_adabn_first_layer_target_means_vanish():
    model = _bn_model()
    tgt = toy(seed=5, shift=0.8, scale=1.7)
    adapted = adapt_adabn(model, tgt)
    h = ad.conv1d(Tensor(tgt.features.reshape(-1, 512, 1)), *adapted.convs[0])
    bn = adapted.bn[0]
    normalized = (h.data - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.max(np.abs(normalized.mean(axis=(0, 1)))) < 0.05


def test_adabn_on_source_itself_changes_little():
    src = toy(64, seed=6)
    model = train_baseline(src, AdaptationConfig(epochs=40, seed=2, precision="float32"), variant="bn").model
    before = accuracy(model, src)
    after = accuracy(adapt_adabn(model, src), src)
    assert abs(after - before) < 2.0


def test_adabn_constant_column_and_errors():
    model = _bn_model()
    const = WindowedDataset(np.ones((10, 512)), np.zeros(10))
    adapted = adapt_adabn(model, const)
    assert np.all(np.isfinite(adapted.logits(const.features).data))
    with pytest.raises(DataError):
        adapt_adabn(model, np.ones((1, 512)))
    with pytest.raises(ConfigurationError):
        adapt_adabn(build_model("baseline", np.random.default_rng(0)), const)


# ---------------------------------------------------------------- proxy A-distance


def test_proxy_a_distance_calibration():
    same = []
    for s in range(5):
        rng = np.random.default_rng(s)
        same.append(proxy_a_distance(rng.normal(size=(500, 8)), rng.normal(size=(500, 8)), seed=s))
    assert np.mean(same) < 0.3
    rng = np.random.default_rng(9)
    apart = proxy_a_distance(rng.normal(size=(200, 4)), rng.normal(size=(200, 4)) + 10.0)
    assert apart > 1.8
    x = rng.normal(size=(100, 4))
    assert proxy_a_distance(x, x.copy()) < 0.3
    with pytest.raises(DataError):
        proxy_a_distance(x[:10], x[:10])
