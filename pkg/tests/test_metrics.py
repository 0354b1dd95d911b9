import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interpfool import engine as E
from interpfool.data import Dataset
from interpfool.fooling import build_frame_mask
from interpfool.interpreters import InterpreterSpec, heatmap_array
from interpfool.metrics import (DEFAULT_RANGES, FsrSpec, MetricError, TestLossRecord, accuracy, active_test_loss,
                                aopc_curve, centermass_test_loss, fsr, gaussian_perturb_probe, location_test_loss,
                                perturb_params, region_scores, spearman, topk_test_loss)
from interpfool.metrics import test_losses as compute_test_losses
from interpfool.model import ArchDescriptor, as_params, build_model

from conftest import make_net

GRADCAM = InterpreterSpec("gradcam")


def brute_spearman(a, b):
    """Average ranks by explicit tie grouping, then textbook Pearson."""
    def ranks(v):
        out = [0.0] * len(v)
        for i, x in enumerate(v):
            less = sum(1 for y in v if y < x)
            equal = sum(1 for y in v if y == x)
            out[i] = less + (equal + 1) / 2.0
        return out

    ra, rb = ranks(list(a)), ranks(list(b))
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


# ---------------------------------------------------------------------------
# Spearman


def test_spearman_identical():
    assert spearman([3, 1, 2], [3, 1, 2]) == pytest.approx(1.0)


def test_spearman_reversed():
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_ties_example():
    assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(brute_spearman([1, 2, 2, 3], [1, 3, 2, 4]))


@pytest.mark.parametrize("a,b", [([1, 1, 1], [1, 2, 3]), ([1], [1]), ([1, 2], [1, 2, 3])])
def test_spearman_rejects(a, b):
    with pytest.raises(MetricError):
        spearman(a, b)


def test_spearman_accepts_2d():
    h = np.arange(6.0).reshape(2, 3)
    assert spearman(h, h.ravel()) == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=3, max_size=12))
def test_spearman_matches_brute_force(pairs):
    a = [float(p[0]) for p in pairs]
    b = [float(p[1]) for p in pairs]
    if len(set(a)) < 2 or len(set(b)) < 2:
        return
    assert spearman(a, b) == pytest.approx(brute_spearman(a, b), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-300, 300), min_size=3, max_size=15, unique=True), st.integers(0, 1000))
def test_spearman_rank_invariance(a, seed):
    # values a hundredth apart stay distinct after cubing in float64
    a = np.array(a) / 100.0
    b = np.random.default_rng(seed).normal(size=a.size)
    assert spearman(a ** 3 + 5, b) == pytest.approx(spearman(a, b), abs=1e-12)


# ---------------------------------------------------------------------------
# FSR


def _recs(ts, method="location"):
    r = FsrSpec.default(method)
    return [TestLossRecord(i, method, "gradcam", t, r.contains(t)) for i, t in enumerate(ts)]


def test_fsr_examples():
    assert fsr(_recs([0.05, 0.15, 0.25])) == pytest.approx(200 / 3)
    assert fsr(_recs([0.0, 0.1, 0.2])) == 100.0
    assert fsr(_recs([0.3, 0.9])) == 0.0


def test_fsr_reapplies_interval():
    recs = _recs([0.05, 0.15, 0.25])
    assert fsr(recs, FsrSpec("location", 0.0, 0.1)) == pytest.approx(100 / 3)


def test_fsr_excludes_degenerate():
    recs = _recs([0.05, 0.5]) + [TestLossRecord(9, "location", "gradcam", float("nan"), False, True)]
    assert fsr(recs) == 50.0


def test_fsr_empty_rejected():
    with pytest.raises(MetricError):
        fsr([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_fsr_monotone_in_interval(ts, lo, hi, widen):
    lo, hi = min(lo, hi), max(lo, hi)
    recs = _recs(ts)
    assert fsr(recs, FsrSpec("x", lo - widen, hi + widen)) >= fsr(recs, FsrSpec("x", lo, hi))


def test_fsr_spec_defaults():
    assert FsrSpec.default("centermass") == FsrSpec("centermass", 0.1, 1.0)
    assert set(DEFAULT_RANGES) == {"location", "topk", "centermass", "active"}
    with pytest.raises(MetricError):
        FsrSpec("location", 0.3, 0.2)
    with pytest.raises(MetricError):
        FsrSpec.default("wobble")


# ---------------------------------------------------------------------------
# test losses


def test_centermass_diagonal_example():
    h0 = np.zeros((4, 4))
    h0[0, 0] = 1
    h1 = np.zeros((4, 4))
    h1[1, 1] = 1
    assert centermass_test_loss(h1, h0) == pytest.approx(2 / math.sqrt(32))
    assert 2 / math.sqrt(32) == pytest.approx(0.354, abs=1e-3)


def test_active_test_loss_extreme():
    h_c1_orig = np.array([1.0, 2, 3, 4])
    h_c2_orig = np.array([4.0, 3, 2, 1])
    assert active_test_loss(h_c2_orig, h_c2_orig, h_c1_orig) == pytest.approx(2.0)


def test_location_test_loss_matches_mask():
    mask = build_frame_mask(7, 7)
    assert location_test_loss(5 * mask.m, mask) == 0
    assert location_test_loss(np.zeros((7, 7)), mask) == pytest.approx(24 / 49)
    with pytest.raises(MetricError):
        location_test_loss(np.zeros((6, 7)), mask)


def test_topk_test_loss_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.normal(size=(3, 3))
        idx = rng.choice(9, size=3, replace=False)
        expect = sum(abs(h.ravel()[j]) for j in idx) / np.abs(h).sum()
        assert topk_test_loss(h, idx) == pytest.approx(expect, abs=1e-12)


def _net28(seed=0):
    return make_net(seed, input_shape=(1, 28, 28), widths=(4, 6, 8))


@pytest.fixture(scope="module")
def data28():
    rng = np.random.default_rng(0)
    return Dataset(rng.normal(size=(10, 1, 28, 28)), np.arange(10) % 5, 5)


def test_test_losses_identical_models_centermass(data28):
    model, params = _net28()
    recs = compute_test_losses("centermass", model, params, params, data28, GRADCAM)
    valid = [r for r in recs if not r.degenerate]
    assert valid and all(r.t == 0 and not r.in_range for r in valid)
    assert fsr(recs) == 0.0


def test_test_losses_location_brute_force(data28):
    model, params = _net28()
    spec = GRADCAM.resolved(model)
    recs = compute_test_losses("location", model, params, params, data28, spec)
    h = heatmap_array(model, params, data28.images, data28.labels, spec)
    mask = build_frame_mask(7, 7)
    for r, hi in zip(recs, h):
        if r.degenerate:
            continue
        hn = np.maximum(hi, 0) / np.maximum(hi, 0).max()
        assert r.t == pytest.approx(((hn - mask.m) ** 2).mean(), abs=1e-12)
        assert r.in_range == (0 <= r.t <= 0.2)


def test_test_losses_topk_uses_original_sets(data28):
    model, params = _net28()
    other = _net28(seed=3)[1]
    spec = GRADCAM.resolved(model)
    recs = compute_test_losses("topk", model, other, params, data28, spec, k_percent=30)
    hf = heatmap_array(model, other, data28.images, data28.labels, spec)
    ho = heatmap_array(model, params, data28.images, data28.labels, spec)
    for r, f, o in zip(recs, hf, ho):
        if r.degenerate:
            continue
        top = np.argsort(-o.ravel(), kind="stable")[:15]
        assert r.t == pytest.approx(np.abs(f.ravel()[top]).sum() / np.abs(f).sum(), abs=1e-12)


def test_test_losses_active_ids_and_self_term():
    model, params = make_net()
    x = np.random.default_rng(1).normal(size=(4, 1, 24, 24))
    ds = Dataset(x, None, 5)
    spec = InterpreterSpec("lrp_t")
    recs = compute_test_losses("active", model, params, params, ds, spec, c1=0, c2=1)
    assert [r.sample_id for r in recs] == list(range(8))
    h = {c: heatmap_array(model, params, x, np.full(4, c), spec.resolved(model)) for c in (0, 1)}
    for i in range(4):
        # before fooling s(c, c) = 1, so t = s(c, c') - 1
        assert recs[2 * i].t == pytest.approx(spearman(h[0][i], h[1][i]) - 1, abs=1e-12)
        assert recs[2 * i + 1].t == pytest.approx(spearman(h[1][i], h[0][i]) - 1, abs=1e-12)


def test_test_losses_degenerate_flagged(data28):
    model, params = _net28()
    zero = {k: E.tensor(np.zeros_like(v.data), name=k) for k, v in params.items()}
    recs = compute_test_losses("location", model, zero, params, data28, GRADCAM)
    assert all(r.degenerate and math.isnan(r.t) for r in recs)
    with pytest.raises(MetricError):
        fsr(recs)


def test_test_losses_errors(data28):
    model, params = _net28()
    with pytest.raises(MetricError):
        compute_test_losses("active", model, params, params, data28, GRADCAM)
    with pytest.raises(MetricError):
        compute_test_losses("wobble", model, params, params, data28, GRADCAM)


# ---------------------------------------------------------------------------
# accuracy


def _onehot_model(k=10):
    desc = ArchDescriptor((1, 1, k), k, [{"kind": "dense", "name": "fc", "units": k, "bias": False}])
    return build_model(desc), as_params({"fc.weight": np.eye(k)})


def _onehot_data(n, k=10, seed=0):
    y = np.random.default_rng(seed).integers(0, k, n)
    return Dataset(np.eye(k)[y].reshape(n, 1, 1, k), y, k)


def test_accuracy_perfect_predictor():
    model, params = _onehot_model()
    assert accuracy(model, params, _onehot_data(50)) == 100.0


def test_accuracy_top5_random_logits():
    desc = ArchDescriptor((1, 1, 20), 10, [{"kind": "dense", "name": "fc", "units": 10}])
    model = build_model(desc)
    rng = np.random.default_rng(0)
    params = as_params({"fc.weight": rng.normal(size=(20, 10)), "fc.bias": np.zeros(10)})
    ds = Dataset(rng.normal(size=(4000, 1, 1, 20)), rng.integers(0, 10, 4000), 10)
    assert abs(accuracy(model, params, ds, top_k=5) - 50.0) < 3.0


def test_accuracy_class_filter():
    model, params = _onehot_model()
    ds = _onehot_data(50)
    params_bad = as_params({"fc.weight": np.roll(np.eye(10), 1, axis=1)})
    assert accuracy(model, params_bad, ds, class_filter=int(ds.labels[0])) == 0.0
    ds_missing = ds.subset(np.flatnonzero(ds.labels != 3))
    with pytest.raises(MetricError):
        accuracy(model, params, ds_missing, class_filter=3)


def test_accuracy_rejects_bad_topk():
    model, params = _onehot_model()
    with pytest.raises(MetricError):
        accuracy(model, params, _onehot_data(5), top_k=11)


# ---------------------------------------------------------------------------
# AOPC


def test_region_scores_blocks():
    h = np.arange(16.0).reshape(1, 4, 4)
    assert region_scores(h, (4, 4), 2).tolist() == [[10.0, 18.0, 42.0, 50.0]]
    # trailing row/column dropped for 5x5
    assert region_scores(np.ones((1, 5, 5)), (5, 5), 2).tolist() == [[4.0] * 4]


def test_aopc_starts_at_zero(data28):
    model, params = _net28()
    curve = aopc_curve(model, params, data28, "heatmap", spec=GRADCAM.resolved(model), steps=5)
    assert curve.shape == (6,) and curve[0] == 0.0


def test_aopc_identical_replacement_is_flat(data28):
    model, params = _net28()
    for ordering in ("heatmap", "random"):
        curve = aopc_curve(model, params, data28, ordering, spec=GRADCAM.resolved(model), steps=6,
                           replacement=data28.images.copy())
        assert np.all(curve == 0.0)


def test_aopc_deterministic(data28):
    model, params = _net28()
    a = aopc_curve(model, params, data28, "random", steps=8, seed=3)
    b = aopc_curve(model, params, data28, "random", steps=8, seed=3)
    assert a.tobytes() == b.tobytes()


def test_aopc_brute_force_single_image(data28):
    """Recompute the curve for one image by explicit region swaps."""
    model, params = _net28()
    ds = data28.subset([0])
    curve = aopc_curve(model, params, ds, "random", steps=4, region=4, seed=2)
    lo, hi = ds.value_range()
    noise = np.random.default_rng(2).uniform(lo, hi, size=ds.images.shape)
    order = np.random.default_rng(3).permutation(49)

    def prob(x):
        z = model.run(params, E.Tensor(x)).logits.data[0]
        p = np.exp(z - z.max())
        return p / p.sum()

    x = ds.images.copy()
    p0 = prob(x)
    c = int(p0.argmax())
    drops = [0.0]
    for k in range(4):
        r, q = divmod(int(order[k]), 7)
        x[:, :, 4 * r:4 * r + 4, 4 * q:4 * q + 4] = noise[:, :, 4 * r:4 * r + 4, 4 * q:4 * q + 4]
        drops.append(p0[c] - prob(x)[c])
    expect = [sum(drops[:l + 1]) / (l + 1) for l in range(5)]
    np.testing.assert_allclose(curve, expect, atol=1e-12)


def test_aopc_rejects_too_many_steps(data28):
    model, params = _net28()
    with pytest.raises(MetricError):
        aopc_curve(model, params, data28, "random", steps=50, region=4)
    with pytest.raises(MetricError):
        aopc_curve(model, params, data28, "sorted", steps=2)


# ---------------------------------------------------------------------------
# weight perturbation


def test_perturb_sigma_zero_is_baseline():
    model, params = _onehot_model()
    ds = _onehot_data(200)
    curve = gaussian_perturb_probe(model, params, ds, sigmas=[0.0], trials=3)
    assert curve[0]["accuracy"] == accuracy(model, params, ds) == 100.0


def test_perturb_huge_sigma_is_chance():
    model, params = _onehot_model()
    ds = _onehot_data(2000)
    curve = gaussian_perturb_probe(model, params, ds, sigmas=[1e3], trials=5, seed=1)
    assert abs(curve[0]["accuracy"] - 10.0) < 3.0


def test_perturb_deterministic():
    model, params = make_net()
    ds = Dataset(np.random.default_rng(0).normal(size=(20, 1, 12, 12)), np.arange(20) % 5, 5)
    a = gaussian_perturb_probe(model, params, ds, sigmas=[0.0, 0.1, 1.0], trials=2, seed=4)
    b = gaussian_perturb_probe(model, params, ds, sigmas=[0.0, 0.1, 1.0], trials=2, seed=4)
    assert a == b


def test_perturb_rejects_bad_grid():
    model, params = _onehot_model()
    with pytest.raises(MetricError):
        gaussian_perturb_probe(model, params, _onehot_data(5), sigmas=[])
    with pytest.raises(MetricError):
        gaussian_perturb_probe(model, params, _onehot_data(5), sigmas=[-1.0])


def test_perturb_relative_scale():
    params = as_params({"w": np.full(20000, 2.0)})
    out = perturb_params(params, 0.1, np.random.default_rng(0), relative=True)
    assert np.std(out["w"].data - 2.0) == pytest.approx(0.2, rel=0.05)
    out = perturb_params(params, 0.1, np.random.default_rng(0), relative=False)
    assert np.std(out["w"].data - 2.0) == pytest.approx(0.1, rel=0.05)
