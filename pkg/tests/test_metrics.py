import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ortho_debias import data as bd
from ortho_debias import metrics as mt
from ortho_debias.model import init_convnet

EPS = mt.COS_EPS


# ---------------------------------------------------------------- discrepancy


def test_discrepancy_hand_example():
    # class 0: A=0 group 3/4 recalled, A=1 group 1/2 recalled
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    attrs = np.array([0, 0, 0, 0, 1, 1, 0, 1])
    preds = np.array([0, 0, 0, 1, 0, 1, 1, 0])
    assert mt.opportunity_discrepancy(preds, labels, attrs, 0) == 0.25
    cd = mt.class_discrepancy(preds, labels, attrs, 1)
    assert (cd.tpr_a0, cd.tpr_a1, cd.value) == (1.0, 0.0, 1.0)


def test_discrepancy_undefined_group():
    labels = np.array([0, 0, 1])
    attrs = np.array([1, 1, 0])
    preds = np.array([0, 1, 1])
    with pytest.raises(mt.UndefinedGroup, match="A=0"):
        mt.opportunity_discrepancy(preds, labels, attrs, 0)
    cd = mt.class_discrepancy(preds, labels, attrs, 0)
    assert cd.degenerate and cd.one_sided == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_discrepancy_symmetric_under_attribute_swap(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 40)
    attrs = np.tile([0, 1], 20)
    preds = rng.integers(0, 3, 40)
    for y in range(3):
        if all(((labels == y) & (attrs == a)).any() for a in (0, 1)):
            d = mt.opportunity_discrepancy(preds, labels, attrs, y)
            assert d == mt.opportunity_discrepancy(preds, labels, 1 - attrs, y)
            assert 0.0 <= d <= 1.0


def test_discrepancy_arithmetic_example():
    labels = np.zeros(10, dtype=int)
    attrs = np.array([0] * 5 + [1] * 5)
    preds = np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 1])
    assert mt.opportunity_discrepancy(preds, labels, attrs, 0) == pytest.approx(0.4, abs=1e-15)
    assert mt.opportunity_discrepancy(labels, labels, attrs, 0) == 0.0


def exact_small_gap_probability(n_group, p, tol):
    """P(|X0 - X1| / n <= tol) for independent X0, X1 ~ Binomial(n, p)."""
    k = np.arange(n_group + 1)
    logc = np.array([math.lgamma(n_group + 1) - math.lgamma(i + 1) - math.lgamma(n_group - i + 1) for i in k])
    pmf = np.exp(logc + k * math.log(p) + (n_group - k) * math.log(1 - p))
    gap = np.abs(k[:, None] - k[None, :]) / n_group
    return float((pmf[:, None] * pmf[None, :])[gap <= tol + 1e-12].sum())


def test_random_predictions_give_small_discrepancy():
    # ten classes, balanced groups, 10^4 samples per trial
    n_classes, per_group, trials = 10, 500, 300
    exact = exact_small_gap_probability(per_group, 1 / n_classes, 0.05)
    assert exact >= 0.99
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(n_classes), 2 * per_group)
    attrs = np.tile(np.repeat([0, 1], per_group), n_classes)
    hits = []
    for _ in range(trials):
        preds = rng.integers(0, n_classes, len(labels))
        hits += [mt.opportunity_discrepancy(preds, labels, attrs, y) <= 0.05 for y in range(n_classes)]
    se = math.sqrt(exact * (1 - exact) / len(hits))
    assert abs(np.mean(hits) - exact) <= 4 * se


# ---------------------------------------------------------------- projection


def test_projection_closed_forms():
    assert mt.projection_bias([3.0, 4.0], [4.0, 3.0]) == pytest.approx(24 / ((5 + EPS) ** 2), abs=1e-12)
    assert mt.projection_bias([1.0, 0.0], [0.0, 2.0]) == 0.0
    assert mt.projection_bias([1.0, 1.0], [-2.0, -2.0]) == pytest.approx(-4 / ((math.sqrt(2) + EPS) * (math.sqrt(8) + EPS)), abs=1e-12)
    assert mt.projection_bias([1.0, 1.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(
        1 / ((math.sqrt(2) + EPS) * (1 + EPS)), abs=1e-12)
    assert abs(mt.projection_bias([1.0, 1.0, 0.0], [1.0, 0.0, 0.0]) - 0.7071) < 1e-4
    assert mt.projection_bias([0.0, 0.0], [1.0, 0.0]) == 0.0
    assert mt.projection_degenerate([0.0, 0.0], [1.0, 0.0])
    assert not mt.projection_degenerate([1.0, 0.0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_projection_scale_invariant_and_bounded(seed, s, t):
    rng = np.random.default_rng(seed)
    b, nu = rng.normal(size=6), rng.normal(size=6)
    w = mt.projection_bias(b, nu)
    assert -1.0 <= w <= 1.0
    assert mt.projection_bias(s * b, t * nu) == pytest.approx(w, abs=1e-9)
    assert mt.projection_bias(b, -nu) == pytest.approx(-w, abs=1e-12)


def test_cosine_shape_mismatch():
    with pytest.raises(Exception, match="differ"):
        mt.cosine([1.0, 2.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------- sensitivity


def head_only_net(head):
    """Concept layer = last block: d logit_c / d features, summed spatially, is exactly head[:, c]."""
    net = init_convnet(head.shape[1], 0, widths=(2, head.shape[0]), concept_layer=2)
    net.params["head.weight"].data[...] = head
    return net


def test_sensitivity_constructed_head():
    head = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 2.0]])
    net = head_only_net(head)
    x = np.random.default_rng(0).uniform(0, 1, (5, 3, 8, 8))
    nu = np.array([3.0, 0.0])
    expect = [1.0 * 3 / ((1 + EPS) * (3 + EPS)), 0.0, 6 / ((math.sqrt(8) + EPS) * (3 + EPS))]
    for c in range(3):
        s = mt.sensitivity_bias(net, x, c, 2, nu)
        assert s.n == 5 and not s.degenerate
        assert abs(s.mean - expect[c]) <= 1e-12
        assert s.std <= 1e-12


def test_sensitivity_logit_along_nu_gives_one():
    nu = np.array([0.3, -1.2, 0.5])
    net = head_only_net(np.stack([nu, -nu], axis=1))
    x = np.random.default_rng(5).uniform(0, 1, (4, 3, 8, 8))
    assert mt.sensitivity_bias(net, x, 0, 2, nu).mean == pytest.approx(1.0, abs=1e-11)
    assert mt.sensitivity_bias(net, x, 1, 2, nu).mean == pytest.approx(-1.0, abs=1e-11)


def test_sensitivity_degenerate_cases():
    net = head_only_net(np.array([[1.0, 0.0], [0.0, 0.0]]))
    x = np.random.default_rng(1).uniform(0, 1, (3, 3, 8, 8))
    assert mt.sensitivity_bias(net, x, 0, 2, np.zeros(2)).degenerate
    zero_head = mt.sensitivity_bias(net, x, 1, 2, np.ones(2))
    assert zero_head.degenerate and zero_head.mean == 0.0
    assert mt.sensitivity_bias(net, x[:0], 0, 2, np.ones(2)).n == 0


def test_sensitivity_near_zero_at_random_init():
    # one random net and one random nu per seed; per-seed values scatter like cosines of
    # random 32-d directions (sd ~ 0.18), their seed average concentrates at 0
    means = []
    for seed in range(10):
        net = init_convnet(10, seed)
        assert net.feature_dim() == 32
        x = bd.generate(bd.BiasConfig(per_class=10, seed=seed)).images
        nu = np.random.default_rng([seed, 9]).normal(size=32)
        s = mt.sensitivity_bias(net, x, seed, 2, nu)
        assert s.n == 100 and -1.0 <= s.mean <= 1.0
        means.append(s.mean)
    assert abs(np.mean(means)) <= 0.2


def test_sensitivity_bounded_at_random_init():
    net = init_convnet(4, 3)
    x = np.random.default_rng(2).uniform(0, 1, (6, 3, 16, 16))
    nu = np.random.default_rng(3).normal(size=net.feature_dim())
    for c in range(4):
        s = mt.sensitivity_bias(net, x, c, 2, nu)
        assert -1.0 <= s.mean <= 1.0 and s.std >= 0


# ---------------------------------------------------------------- leakage


def informative_logits(seed, n=10_000):
    rng = np.random.default_rng(seed)
    attrs = rng.permutation(np.repeat([0, 1], n // 2))
    logits = rng.normal(size=(n, 5))
    logits[:, 0] += 2.0 * attrs
    return logits, attrs


@pytest.mark.parametrize("seed", range(5))
def test_leakage_on_permuted_attributes_is_chance(seed):
    logits, attrs = informative_logits(seed)
    permuted = np.random.default_rng([seed, 1]).permutation(attrs)
    leak = mt.pool_leakage(logits, permuted, mt.LeakageConfig(seed=seed))
    assert 45.0 <= leak <= 55.0


def test_leakage_detects_attribute_signal():
    logits, attrs = informative_logits(0, n=1000)
    assert mt.pool_leakage(logits, attrs, mt.LeakageConfig(epochs=30)) > 80.0


def test_leakage_of_broadcast_attribute_is_total():
    attrs = np.random.default_rng(3).permutation(np.repeat([0, 1], 300))
    logits = np.repeat(attrs[:, None].astype(float), 4, axis=1)
    assert mt.pool_leakage(logits, attrs, mt.LeakageConfig(epochs=20)) == 100.0


def test_leakage_split_is_stratified_and_disjoint():
    attrs = np.array([0] * 30 + [1] * 10)
    tr, te = mt.leakage_split(attrs, 0.7, 0)
    assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == 40
    assert attrs[tr].sum() == 7 and (attrs[tr] == 0).sum() == 21


def test_leakage_rejects_single_attribute():
    with pytest.raises(ValueError):
        mt.model_leakage(np.zeros((4, 2)), [1, 1, 1, 1], np.zeros((2, 2)), [0, 1])


# ---------------------------------------------------------------- report


def tiny_report():
    cfg = bd.BiasConfig(n_classes=3, per_class=20, height=8, width=8, marker_size=2, biased=(1,), rho_biased=1.0)
    ds = bd.generate(cfg)
    net = init_convnet(3, 0)
    ev = mt.EvalConfig(probe_steps=20, sensitivity_per_class=5, leakage=mt.LeakageConfig(epochs=3))
    return mt.evaluate(net, ds, ds, biased=(1,), cfg=ev)


def test_evaluate_report_round_trip():
    rep = tiny_report()
    assert rep.n_classes == 3 and rep.biased == [1]
    assert len(rep.projection) == len(rep.discrepancy) == 3
    assert rep.discrepancy[1] is None  # rho = 1 leaves no A=0 sample of class 1
    assert rep.tpr_a1[1] is not None
    back = mt.MetricsReport.from_json(rep.to_json())
    assert back == rep
    agg = json.loads(rep.to_json())["aggregates"]
    assert agg["discrepancy_biased"] is None
    assert agg["abs_projection_biased"] == pytest.approx(abs(rep.projection[1]))


def test_single_attribute_probe_data_flags_nu():
    cfg = bd.BiasConfig(n_classes=3, per_class=20, height=8, width=8, marker_size=2, biased=(0, 1, 2), rho_biased=1.0)
    train_set = bd.generate(cfg)
    audit = bd.generate(bd.BiasConfig(n_classes=3, per_class=20, height=8, width=8, marker_size=2, seed=5))
    ev = mt.EvalConfig(probe_steps=20, sensitivity_per_class=5, leakage=mt.LeakageConfig(epochs=3))
    rep = mt.evaluate(init_convnet(3, 0), train_set, audit, biased=(0, 1, 2), cfg=ev)
    assert rep.extra["nu_defined"] is False
    assert rep.projection == [0.0] * 3 and all(rep.projection_degenerate)
    assert all(rep.sensitivity_degenerate) and rep.leakage is not None


def test_class_csv_rows():
    rep = tiny_report()
    text = mt.class_csv(rep, {"method": "baseline"})
    lines = text.splitlines()
    assert lines[0] == ",".join(["method"] + mt.CLASS_COLUMNS)
    assert len(lines) == 4
    # the undefined discrepancy is an empty cell, flagged degenerate
    row1 = dict(zip(lines[0].split(","), lines[2].split(",")))
    assert row1["discrepancy"] == "" and row1["discrepancy_degenerate"] == "1"


def test_fmt_is_stable():
    assert mt.fmt(None) == "" and mt.fmt(True) == "1" and mt.fmt(0.1) == "0.1" and mt.fmt(np.float64(1 / 3)) == repr(1 / 3)


def test_subset_means():
    rep = mt.MetricsReport(
        n_classes=3, biased=[0], accuracy=1.0, accuracy_biased=1.0, accuracy_unbiased=1.0, leakage=50.0,
        discrepancy=[0.5, None, 0.1], tpr_a0=[0.0] * 3, tpr_a1=[0.0] * 3, projection=[-0.4, 0.2, 0.0],
        projection_degenerate=[False] * 3, sensitivity_mean=[0.1, 0.2, 0.3], sensitivity_std=[0.0] * 3,
        sensitivity_degenerate=[False] * 3, sensitivity_samples=1,
    )
    assert rep.mean_discrepancy("biased") == 0.5
    assert rep.mean_discrepancy("unbiased") == pytest.approx(0.1)
    assert rep.mean_abs_projection() == pytest.approx(0.2)
    assert rep.mean_projection("biased") == -0.4
    with pytest.raises(ValueError):
        rep.mean_sensitivity("some")
