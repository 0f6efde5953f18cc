import numpy as np
import pytest
from conftest import fd_wrt_tensors, max_rel_err

from ortho_debias import autodiff as ad
from ortho_debias import data as bd
from ortho_debias import trainers as tr
from ortho_debias.model import init_convnet, parameter_hash
from ortho_debias.probes import POLE_NEG, POLE_POS, ProbeBank

N_INSTANCES = 20


def toy_state(i, method="meta_ortho", **kw):
    """Two-block net on 4x4 images; small enough for per-coordinate differences."""
    layer = 1 + i % 2
    base = dict(method=method, gamma=0.3 + 0.1 * (i % 7), inner_lr=0.2 + 0.05 * (i % 5), feature_scale=0.25,
                seed=i, concept_layer=layer, adv_weight=0.5 + 0.25 * (i % 3), adv_hidden=3)
    base.update(kw)
    cfg = tr.TrainConfig(**base)
    net = init_convnet(3, i, widths=(2, 2), concept_layer=layer)
    state = tr.TrainState(net, ProbeBank.random(2, 3, i, std=0.5), tr.init_adversary(2, 3, i), cfg)
    rng = np.random.default_rng([i, 77])
    x = rng.uniform(0, 1, (4, 3, 4, 4))
    y = np.array([0, 1, 2, i % 3])
    a = np.array([1, 0, 1, 0]) if i % 2 else np.array([0, 1, 1, 0])
    return state, x, y, a


# ---------------------------------------------------------------- loss examples


def test_classification_loss_uniform_logits():
    loss = tr.classification_loss(ad.Tensor(np.zeros((5, 4))), np.arange(5) % 4)
    assert loss.item() == pytest.approx(np.log(4), abs=1e-12)


def test_debias_loss_examples():
    nu = ad.Tensor(np.array([1.0, 0.0]))
    par = ad.Tensor(np.array([2.0, 0.0]))
    ortho = ad.Tensor(np.array([0.0, 3.0]))
    diag = ad.Tensor(np.array([1.0, 1.0]))
    assert tr.debias_loss([ortho], nu).item() == pytest.approx(0.0, abs=1e-15)
    assert tr.debias_loss([par], nu).item() == pytest.approx(1.0, abs=1e-10)
    assert tr.debias_loss([par, ortho, diag], nu).item() == pytest.approx(1.5, abs=1e-10)
    with pytest.raises(ValueError):
        tr.debias_loss([], nu)


# ---------------------------------------------------------------- gradient oracles


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_meta_objective_matches_finite_differences(i):
    state, x, y, a = toy_state(i)
    # the concept loss sees features held fixed; freeze them at the base point
    _, z = tr._forward_parts(state, x)
    z_fixed = z.data.copy()
    params = state.net.parameters() + state.probes.parameters()
    total, terms, _ = tr.meta_objective(state, x, y, a, z_probe=z_fixed)
    assert {"l_class", "l_concept", "l_debias"} <= set(terms)
    analytic = [g.data for g in ad.grad(total, params)]
    numeric = fd_wrt_tensors(lambda: tr.meta_objective(state, x, y, a, z_probe=z_fixed)[0].item(), params)
    for g, n in zip(analytic, numeric):
        assert max_rel_err(g, n) < 1e-4


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_adversarial_objective_matches_finite_differences(i):
    state, x, y, a = toy_state(i, method="adversarial")
    theta, adv = state.net.parameters(), state.adversary.parameters()
    obj, l_adv = tr.adversarial_objective(state, x, y, a)
    g_theta = [g.data for g in ad.grad(obj, theta)]
    g_adv = [g.data for g in ad.grad(l_adv, adv)]
    n_theta = fd_wrt_tensors(lambda: tr.adversarial_objective(state, x, y, a)[0].item(), theta)
    n_adv = fd_wrt_tensors(lambda: tr.adversarial_objective(state, x, y, a)[1].item(), adv)
    for g, n in zip(g_theta + g_adv, n_theta + n_adv):
        assert max_rel_err(g, n) < 1e-4


def test_gradient_reversal_step_matches_objective_gradients():
    state, x, y, a = toy_state(3, method="adversarial")
    theta, adv = state.net.parameters(), state.adversary.parameters()
    obj, l_adv = tr.adversarial_objective(state, x, y, a)
    want = [g.data for g in ad.grad(obj, theta)] + [g.data for g in ad.grad(l_adv, adv)]
    logits, z = tr._forward_parts(state, x)
    rev = tr.adversary_loss(state.adversary, ad.grad_reverse(z, state.cfg.adv_weight), a)
    got = ad.grad(ad.add(tr.classification_loss(logits, y), rev), theta + adv)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g.data, w, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- term isolation


def test_debias_term_reaches_theta():
    state, x, y, a = toy_state(0, co_train_probes=False, gamma=1.0)
    total, terms, _ = tr.meta_objective(state, x, y, a)
    l_class = tr.classification_loss(tr._forward_parts(state, x)[0], y)
    g_total = ad.grad(total, state.net.parameters())
    g_class = ad.grad(l_class, state.net.parameters())
    assert terms["l_debias"] > 0
    diff = sum(np.abs(gt.data - gc.data).sum() for gt, gc in zip(g_total, g_class))
    assert diff > 1e-8


def test_concept_loss_does_not_move_theta():
    state, x, y, a = toy_state(1, gamma=0.0)
    total, terms, _ = tr.meta_objective(state, x, y, a)
    assert "l_concept" in terms and "l_debias" not in terms
    l_class = tr.classification_loss(tr._forward_parts(state, x)[0], y)
    for gt, gc in zip(ad.grad(total, state.net.parameters()), ad.grad(l_class, state.net.parameters())):
        np.testing.assert_array_equal(gt.data, gc.data)


def test_nu_gradient_flows_unless_detached():
    for detach in (False, True):
        state, x, y, a = toy_state(2, co_train_probes=False, detach_nu=detach)
        total, _, _ = tr.meta_objective(state, x, y, a)
        (gw,) = ad.grad(total, [state.probes.weight])
        poles = [state.probes.index(POLE_POS), state.probes.index(POLE_NEG)]
        # with co-training off and poles outside the debiased set, nu is the only route to the pole columns
        pole_grad = np.abs(gw.data[:, poles]).sum()
        assert (pole_grad == 0) if detach else (pole_grad > 0)


def test_inner_lr_zero_removes_theta_path():
    state, x, y, a = toy_state(4, co_train_probes=False, inner_lr=0.0)
    total, _, _ = tr.meta_objective(state, x, y, a)
    l_class = tr.classification_loss(tr._forward_parts(state, x)[0], y)
    for gt, gc in zip(ad.grad(total, state.net.parameters()), ad.grad(l_class, state.net.parameters())):
        np.testing.assert_allclose(gt.data, gc.data, atol=1e-14)


def tiny_data(seed=0):
    cfg = bd.BiasConfig(n_classes=3, per_class=16, height=8, width=8, marker_size=2, biased=(0,), rho_biased=1.0,
                        seed=seed)
    return bd.generate(cfg)


def tiny_cfg(**kw):
    base = dict(epochs=3, batch_size=8)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_gamma_zero_without_cotraining_equals_baseline():
    ds = tiny_data()
    base = tr.train("baseline", ds, tiny_cfg(co_train_probes=False))
    meta = tr.train("meta_ortho", ds, tiny_cfg(co_train_probes=False, gamma=0.0))
    assert [r["theta_hash"] for r in base.history] == [r["theta_hash"] for r in meta.history]


def test_adversary_weight_zero_equals_baseline():
    ds = tiny_data(1)
    base = tr.train("baseline", ds, tiny_cfg(co_train_probes=False))
    adv = tr.train("adversarial", ds, tiny_cfg(co_train_probes=False, adv_weight=0.0))
    assert [r["theta_hash"] for r in base.history] == [r["theta_hash"] for r in adv.history]


@pytest.mark.parametrize("method", tr.METHODS)
def test_training_is_deterministic_and_finite(method, tmp_path):
    ds = tiny_data(2)
    a = tr.train(method, ds, tiny_cfg(epochs=2))
    b = tr.train(method, ds, tiny_cfg(epochs=2))
    assert [r["theta_hash"] for r in a.history] == [r["theta_hash"] for r in b.history]
    assert parameter_hash(a.net) == parameter_hash(b.net)
    assert all(np.all(np.isfinite(p.data)) for p in a.net.parameters() + a.probes.parameters())
    tr.write_history(a.history, tmp_path / "h.csv")
    tr.write_history(b.history, tmp_path / "h2.csv")
    assert (tmp_path / "h.csv").read_bytes() == (tmp_path / "h2.csv").read_bytes()
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == ",".join(tr.HISTORY_COLUMNS)


def test_methods_share_initialization():
    ds = tiny_data(3)
    hashes = {m: parameter_hash(tr.train(m, ds, tiny_cfg(epochs=0)).net) for m in tr.METHODS}
    assert len(set(hashes.values())) == 1


def test_lr_drop_scales_every_optimizer():
    p = ad.Tensor(np.ones(2), requires_grad=True)
    opt = tr.SGD([p], lr=1.0, momentum=0.0)
    opt.lr_scale = 0.1
    opt.step([ad.Tensor(np.ones(2))])
    np.testing.assert_allclose(p.data, 0.9)


def test_gradient_clip_rescales_only_above_threshold():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    opt = tr.SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0)
    opt.step([ad.Tensor(np.array([3.0, 4.0]))])
    np.testing.assert_allclose(p.data, [-0.6, -0.8], rtol=1e-15)
    before = p.data.copy()
    opt.step([ad.Tensor(np.array([0.3, 0.4]))])
    np.testing.assert_array_equal(p.data, before - np.array([0.3, 0.4]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = tiny_data(4)
    with pytest.raises(tr.TrainingDiverged):
        tr.train("baseline", ds, tiny_cfg(lr=1e6, epochs=2))


def test_config_validation():
    with pytest.raises(ValueError):
        tr.train("nope", tiny_data(), tiny_cfg())
    with pytest.raises(ValueError):
        tr.TrainConfig(method="adversarial", adv_weight=-1.0).validate()
