"""Standard, adversarial and meta-orthogonalization training.

All three methods share one loop: identical initialization, identical
minibatch order for a given seed, SGD with momentum on every trainable
tensor. Only the per-batch objective differs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import BiasDataset
from .model import ConvNet, features_at, forward_from, init_convnet, parameter_hash, predict
from .probes import POLE_NEG, POLE_POS, ProbeBank, bank_loss, inner_update

log = logging.getLogger(__name__)

METHODS = ("baseline", "adversarial", "meta_ortho")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, terms: dict):
        super().__init__(f"{message}: {terms}")
        self.terms = terms


@dataclass
class TrainConfig:
    method: str = "baseline"
    epochs: int = 16
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    inner_lr: float = 0.1
    gamma: float = 1.0
    adv_weight: float = 1.0
    adv_hidden: int = 32
    seed: int = 0
    concept_layer: int = 2
    # probe learning rate for the outer step; None means ``lr``
    probe_lr: float | None = None
    # multiplier on summed concept features before probes / adversary see them
    feature_scale: float = 1.0 / 64
    co_train_probes: bool = True
    detach_nu: bool = False
    heldout_concept_batch: bool = False
    alternating_adversary: bool = False
    concept_on_poles: bool = True
    debias_poles: bool = False
    warmup_epochs: int = 1
    # global-norm clip on the network gradient (every method); None leaves it off
    grad_clip: float | None = None
    # step decay: every learning rate is multiplied by lr_drop_factor from
    # epoch floor(lr_drop_at * epochs) on
    lr_drop_at: float = 0.75
    lr_drop_factor: float = 0.1

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "meta_ortho" and self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def relevant(self) -> dict:
        """Fields that can change this method's trajectory."""
        unused = set()
        if self.method != "meta_ortho":
            unused |= _META_ONLY
        if self.method != "adversarial":
            unused |= _ADV_ONLY
        return {k: v for k, v in asdict(self).items() if k not in unused}


_META_ONLY = {"inner_lr", "gamma", "detach_nu", "heldout_concept_batch", "debias_poles", "warmup_epochs"}
_ADV_ONLY = {"adv_weight", "adv_hidden", "alternating_adversary"}


class SGD:
    """Heavy-ball SGD: ``v = m v + g``, ``p -= lr v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros(p.shape) for p in self.params]
        self.lr_scale = 1.0

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr * self.lr_scale if lr is None else lr
        gs = [g.data for g in grads]
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gs)))
            if norm > self.clip_norm:
                gs = [g * (self.clip_norm / norm) for g in gs]
        for p, v, g in zip(self.params, self.velocity, gs):
            v *= self.momentum
            v += g
            p.data -= lr * v


# ---------------------------------------------------------------- adversary


@dataclass
class Adversary:
    params: dict[str, ad.Tensor] = field(default_factory=dict)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def logits(self, z) -> ad.Tensor:
        p = self.params
        h = ad.matmul(z, p["w1"])
        h = ad.relu(ad.add(h, ad.expand(p["b1"], h.shape, 0)))
        out = ad.reshape(ad.matmul(h, p["w2"]), (-1,))
        return ad.add(out, ad.expand(ad.reshape(p["b2"], ()), out.shape, 0))


def init_adversary(dim: int, hidden: int, seed: int) -> Adversary:
    rng = np.random.default_rng([int(seed), 0xAD7])
    s1, s2 = 1.0 / math.sqrt(dim), 1.0 / math.sqrt(hidden)
    raw = {
        "w1": rng.uniform(-s1, s1, (dim, hidden)),
        "b1": rng.uniform(-s1, s1, hidden),
        "w2": rng.uniform(-s2, s2, (hidden, 1)),
        "b2": rng.uniform(-s2, s2, 1),
    }
    return Adversary({k: ad.Tensor(v, requires_grad=True, name=f"adv.{k}") for k, v in raw.items()})


def adversary_loss(adv: Adversary, z, attrs) -> ad.Tensor:
    return ad.binary_log_loss(adv.logits(z), np.asarray(attrs, dtype=np.float64))


# ---------------------------------------------------------------- losses


def classification_loss(logits, labels) -> ad.Tensor:
    return ad.softmax_cross_entropy(logits, labels)


def debias_loss(betas_after_step, nu, eps: float = 1e-12) -> ad.Tensor:
    """Sum of squared cosines between each stepped class embedding and ``nu``."""
    terms = [ad.square(ad.cosine_similarity(b, nu, eps)) for b in betas_after_step]
    if not terms:
        raise ValueError("debias_loss needs at least one embedding")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _debias_ids(bank: ProbeBank, cfg: TrainConfig) -> list:
    ids = list(range(bank.n_classes))
    if cfg.debias_poles:
        ids += [POLE_POS, POLE_NEG]
    return ids


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    net: ConvNet
    probes: ProbeBank
    adversary: Adversary
    cfg: TrainConfig
    net_opt: SGD = None
    probe_opt: SGD = None
    adv_opt: SGD = None
    epoch: int = 0

    def __post_init__(self):
        if self.net_opt is None:
            self.net_opt = SGD(self.net.parameters(), self.cfg.lr, self.cfg.momentum, self.cfg.grad_clip)
        if self.probe_opt is None:
            lr = self.cfg.lr if self.cfg.probe_lr is None else self.cfg.probe_lr
            self.probe_opt = SGD(self.probes.parameters(), lr, self.cfg.momentum)
        if self.adv_opt is None:
            self.adv_opt = SGD(self.adversary.parameters(), self.cfg.lr, self.cfg.momentum)


def init_state(n_classes: int, cfg: TrainConfig) -> TrainState:
    net = init_convnet(n_classes, cfg.seed, concept_layer=cfg.concept_layer)
    dim = net.feature_dim()
    return TrainState(
        net,
        ProbeBank.random(dim, n_classes, cfg.seed),
        init_adversary(dim, cfg.adv_hidden, cfg.seed),
        cfg,
    )


def _check_finite(terms: dict, tensors) -> None:
    bad = {k: v for k, v in terms.items() if not math.isfinite(v)}
    if bad or any(not np.all(np.isfinite(t.data)) for t in tensors):
        raise TrainingDiverged("non-finite loss or parameters", terms)


def _forward_parts(state: TrainState, images):
    cfg = state.cfg
    feats = features_at(state.net, images, cfg.concept_layer)
    logits = forward_from(state.net, feats, cfg.concept_layer)
    z = ad.scale(ad.spatial_sum(feats), cfg.feature_scale)
    return logits, z


def _correct(logits, labels) -> int:
    return int((logits.data.argmax(axis=1) == np.asarray(labels)).sum())


# ---------------------------------------------------------------- steps


def baseline_step(state: TrainState, images, labels, attrs) -> dict:
    logits, z = _forward_parts(state, images)
    l_class = classification_loss(logits, labels)
    grads = ad.grad(l_class, state.net.parameters())
    terms = {"l_class": l_class.item()}
    _check_finite(terms, grads)
    state.net_opt.step(grads)
    terms["correct"] = _correct(logits, labels)
    if state.cfg.co_train_probes:
        _probe_only_step(state, z, labels, attrs, terms)
    return terms


def _probe_only_step(state, z, labels, attrs, terms) -> None:
    l_concept = bank_loss(state.probes, ad.Tensor(z.data), labels, attrs)
    grads = ad.grad(l_concept, state.probes.parameters())
    terms["l_concept"] = l_concept.item()
    state.probe_opt.step(grads)


def meta_objective(state: TrainState, images, labels, attrs, concept_batch=None, debias: bool = True, z_probe=None):
    """Scalar L_class + sum L_concept + gamma * L_debias(beta') plus its parts.

    The concept loss trains the probes on features treated as constants
    (``z_probe``, by default the detached batch features), so it never moves
    theta. The lookahead ``beta' = beta - alpha * grad_beta L_concept`` uses
    features still attached to the network; that is the path by which the
    debias penalty reaches theta.
    """
    cfg, bank = state.cfg, state.probes
    logits, z = _forward_parts(state, images)
    l_class = classification_loss(logits, labels)
    terms = {"l_class": l_class.item()}
    total = l_class

    if cfg.co_train_probes:
        zp = ad.Tensor(z.data) if z_probe is None else ad.Tensor(z_probe)
        l_concept = bank_loss(bank, zp, labels, attrs)
        terms["l_concept"] = l_concept.item()
        total = ad.add(total, l_concept)

    if debias and cfg.gamma != 0.0:
        if concept_batch is None:
            z_in, y_in, a_in = z, labels, attrs
        else:
            _, z_in = _forward_parts(state, concept_batch[0])
            y_in, a_in = concept_batch[1], concept_batch[2]
        inner = bank_loss(bank, z_in, y_in, a_in)
        stepped = inner_update(bank.weight, inner, cfg.inner_lr)
        nu = bank.nu()
        if cfg.detach_nu:
            nu = ad.Tensor(nu.data)
        betas = [ad.take(stepped, (slice(None), bank.index(c))) for c in _debias_ids(bank, cfg)]
        l_debias = debias_loss(betas, nu)
        terms["l_debias"] = l_debias.item()
        total = ad.add(total, ad.scale(l_debias, cfg.gamma))
    return total, terms, logits


def meta_ortho_step(state: TrainState, images, labels, attrs, concept_batch=None, debias: bool = True) -> dict:
    """One joint outer step on theta, every beta and every b."""
    cfg, net, bank = state.cfg, state.net, state.probes
    total, terms, logits = meta_objective(state, images, labels, attrs, concept_batch, debias)
    train_probes = cfg.co_train_probes or (debias and cfg.gamma != 0.0)
    params = net.parameters() + (bank.parameters() if train_probes else [])
    grads = ad.grad(total, params, allow_unused=True)
    _check_finite(terms, grads)
    n_net = len(net.parameters())
    state.net_opt.step(grads[:n_net])
    if len(grads) > n_net:
        state.probe_opt.step(grads[n_net:])
    terms["correct"] = _correct(logits, labels)
    return terms


def adversarial_objective(state: TrainState, images, labels, attrs):
    """(L_class - lambda * L_adv, L_adv): what theta descends and what the adversary descends."""
    logits, z = _forward_parts(state, images)
    l_class = classification_loss(logits, labels)
    l_adv = adversary_loss(state.adversary, z, attrs)
    return ad.sub(l_class, ad.scale(l_adv, state.cfg.adv_weight)), l_adv


def adversarial_step(state: TrainState, images, labels, attrs) -> dict:
    """Adversary descends its attribute log-loss on z; theta descends L_class - lambda * L_adv."""
    cfg, net, adv = state.cfg, state.net, state.adversary
    if cfg.alternating_adversary:
        logits, z = _forward_parts(state, images)
        l_adv = adversary_loss(adv, ad.Tensor(z.data), attrs)
        state.adv_opt.step(ad.grad(l_adv, adv.parameters()))
        l_class = classification_loss(logits, labels)
        l_adv_theta = adversary_loss(adv, z, attrs)
        total = ad.sub(l_class, ad.scale(l_adv_theta, cfg.adv_weight))
        grads = ad.grad(total, net.parameters())
        terms = {"l_class": l_class.item(), "l_adv": l_adv.item()}
        _check_finite(terms, grads)
        state.net_opt.step(grads)
    else:
        logits, z = _forward_parts(state, images)
        l_class = classification_loss(logits, labels)
        l_adv = adversary_loss(adv, ad.grad_reverse(z, cfg.adv_weight), attrs)
        params = net.parameters() + adv.parameters()
        grads = ad.grad(ad.add(l_class, l_adv), params)
        terms = {"l_class": l_class.item(), "l_adv": l_adv.item()}
        _check_finite(terms, grads)
        n_net = len(net.parameters())
        state.adv_opt.step(grads[n_net:])
        state.net_opt.step(grads[:n_net])
    terms["correct"] = _correct(logits, labels)
    if cfg.co_train_probes:
        _probe_only_step(state, z, labels, attrs, terms)
    return terms


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    net: ConvNet
    probes: ProbeBank
    adversary: Adversary
    history: list[dict]
    cfg: TrainConfig


def accuracy(net: ConvNet, ds: BiasDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float((predict(net, ds.images).argmax(axis=1) == ds.labels).mean())


def train(method: str, train_set: BiasDataset, cfg: TrainConfig, test_set: BiasDataset | None = None) -> TrainResult:
    cfg = replace(cfg, method=method)
    cfg.validate()
    state = init_state(train_set.config.n_classes, cfg)
    order_rng = np.random.default_rng([int(cfg.seed), 0x5A1])
    held_rng = np.random.default_rng([int(cfg.seed), 0x4E1])
    n = len(train_set)
    history = []
    drop_epoch = int(math.floor(cfg.lr_drop_at * cfg.epochs))
    for epoch in range(cfg.epochs):
        scale = cfg.lr_drop_factor if epoch >= drop_epoch else 1.0
        for opt in (state.net_opt, state.probe_opt, state.adv_opt):
            opt.lr_scale = scale
        perm = order_rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start : start + cfg.batch_size])
            x, y, a = train_set.images[idx], train_set.labels[idx], train_set.attrs[idx]
            if method == "baseline":
                terms = baseline_step(state, x, y, a)
            elif method == "adversarial":
                terms = adversarial_step(state, x, y, a)
            else:
                held = None
                if cfg.heldout_concept_batch:
                    j = np.sort(held_rng.choice(n, size=min(cfg.batch_size, n), replace=False))
                    held = (train_set.images[j], train_set.labels[j], train_set.attrs[j])
                terms = meta_ortho_step(state, x, y, a, held, debias=epoch >= cfg.warmup_epochs)
            correct += terms.pop("correct", 0)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch + 1}
        for k in ("l_class", "l_concept", "l_debias", "l_adv"):
            row[k] = sums[k] / batches if k in sums else float("nan")
        row["train_acc"] = correct / n
        row["test_acc"] = accuracy(state.net, test_set) if test_set is not None else float("nan")
        row["theta_hash"] = parameter_hash(state.net)
        history.append(row)
        log.info("%s epoch %d %s", method, epoch + 1, {k: v for k, v in row.items() if k != "theta_hash"})
        state.epoch = epoch + 1
    return TrainResult(state.net, state.probes, state.adversary, history, cfg)


HISTORY_COLUMNS = ["epoch", "l_class", "l_concept", "l_debias", "l_adv", "train_acc", "test_acc", "theta_hash"]


def write_history(history: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
