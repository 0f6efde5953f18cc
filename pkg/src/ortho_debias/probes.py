"""Linear concept probes on concept-layer features.

One probe per scene class plus two attribute poles (``A+`` fires on A=1,
``A-`` on A=0). Probes live as columns of a single ``d x P`` weight matrix so
that the summed concept loss and its per-probe gradients come out of one
matmul; column ``c`` depends only on probe ``c``'s own loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .serialization import read_container, write_container

POLE_POS = "A+"
POLE_NEG = "A-"


def concept_ids(n_classes: int) -> list:
    return list(range(n_classes)) + [POLE_POS, POLE_NEG]


def concept_targets(labels, attrs, concept) -> np.ndarray:
    labels = np.asarray(labels)
    attrs = np.asarray(attrs)
    if concept == POLE_POS:
        return (attrs == 1).astype(np.float64)
    if concept == POLE_NEG:
        return (attrs == 0).astype(np.float64)
    return (labels == int(concept)).astype(np.float64)


def balanced_weights(targets: np.ndarray) -> np.ndarray:
    """Per-sample weights giving positives and negatives half the mass each (sum 1)."""
    t = np.asarray(targets, dtype=np.float64)
    pos = t > 0.5
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    w = np.zeros_like(t)
    if n_pos and n_neg:
        w[pos] = 0.5 / n_pos
        w[~pos] = 0.5 / n_neg
    else:
        w[:] = 1.0 / max(len(t), 1)
    return w


@dataclass
class ConceptProbe:
    identity: object
    beta: ad.Tensor
    bias: ad.Tensor


@dataclass
class ProbeBank:
    """Probe parameters: ``weight`` is d x P, ``bias`` has length P."""

    weight: ad.Tensor
    bias: ad.Tensor
    identities: list = field(default_factory=list)

    @classmethod
    def zeros(cls, dim: int, n_classes: int) -> "ProbeBank":
        ids = concept_ids(n_classes)
        return cls(
            ad.Tensor(np.zeros((dim, len(ids))), requires_grad=True, name="probes.weight"),
            ad.Tensor(np.zeros(len(ids)), requires_grad=True, name="probes.bias"),
            ids,
        )

    @classmethod
    def random(cls, dim: int, n_classes: int, seed: int, std: float = 0.01) -> "ProbeBank":
        bank = cls.zeros(dim, n_classes)
        rng = np.random.default_rng([int(seed), 0xB0B])
        bank.weight.data[...] = rng.normal(0.0, std, bank.weight.shape)
        return bank

    @property
    def n_classes(self) -> int:
        return sum(1 for i in self.identities if not isinstance(i, str))

    def index(self, identity) -> int:
        return self.identities.index(identity)

    def parameters(self) -> list[ad.Tensor]:
        return [self.weight, self.bias]

    def probe(self, identity) -> ConceptProbe:
        j = self.index(identity)
        return ConceptProbe(identity, ad.take(self.weight, (slice(None), j)), ad.take(self.bias, j))

    def beta(self, identity) -> np.ndarray:
        return self.weight.data[:, self.index(identity)].copy()

    def nu(self, weight: ad.Tensor | None = None) -> ad.Tensor:
        """Bias direction beta_A+ - beta_A-, read from the current weights."""
        w = self.weight if weight is None else weight
        return ad.sub(ad.take(w, (slice(None), self.index(POLE_POS))), ad.take(w, (slice(None), self.index(POLE_NEG))))

    def targets(self, labels, attrs) -> np.ndarray:
        return np.stack([concept_targets(labels, attrs, c) for c in self.identities], axis=1)

    def copy(self) -> "ProbeBank":
        return ProbeBank(
            ad.Tensor(self.weight.data, requires_grad=True, name="probes.weight"),
            ad.Tensor(self.bias.data, requires_grad=True, name="probes.bias"),
            list(self.identities),
        )


def concept_loss(probe: ConceptProbe, z, targets) -> ad.Tensor:
    """Class-balanced mean binary log-loss of ``sigmoid(z @ beta + b)``."""
    z = ad._as_tensor(z)
    t = np.asarray(targets, dtype=np.float64)
    if z.ndim != 2 or probe.beta.shape != (z.shape[1],) or t.shape != (z.shape[0],):
        raise ad.ShapeError(f"concept_loss: features {z.shape}, beta {probe.beta.shape}, targets {t.shape}")
    logits = ad.reshape(ad.matmul(z, ad.reshape(probe.beta, (-1, 1))), (-1,))
    logits = ad.add(logits, ad.expand(ad.reshape(probe.bias, ()), logits.shape, 0))
    return ad.binary_log_loss(logits, t, balanced_weights(t))


def bank_logits(weight: ad.Tensor, bias: ad.Tensor, z) -> ad.Tensor:
    logits = ad.matmul(z, weight)
    return ad.add(logits, ad.expand(bias, logits.shape, 0))


def bank_loss(bank: ProbeBank, z, labels, attrs, weight: ad.Tensor | None = None) -> ad.Tensor:
    """Sum over probes of each probe's balanced log-loss."""
    z = ad._as_tensor(z)
    t = bank.targets(labels, attrs)
    w = np.stack([balanced_weights(t[:, j]) for j in range(t.shape[1])], axis=1)
    return ad.binary_log_loss(bank_logits(bank.weight if weight is None else weight, bank.bias, z), t, w)


def inner_update(beta: ad.Tensor, loss: ad.Tensor, alpha: float) -> ad.Tensor:
    """``beta - alpha * grad(loss, beta)`` kept on the graph (differentiable in theta)."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    (g,) = ad.grad(loss, [beta], create_graph=True)
    return ad.sub(beta, ad.scale(g, alpha))


# ---------------------------------------------------------------- post-hoc


@dataclass
class PostHocProbes:
    bank: ProbeBank
    final_loss: dict
    converged: dict
    center: np.ndarray
    scale: float

    def beta(self, identity) -> np.ndarray:
        return self.bank.beta(identity)

    def nu(self) -> np.ndarray:
        return self.bank.nu().data


def standardize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center and divide by one pooled scalar std; preserves probe directions."""
    mu = z.mean(axis=0)
    s = float(np.sqrt(np.mean((z - mu) ** 2)))
    if s <= 0:
        s = 1.0
    return (z - mu) / s, mu, s


def train_probes_post_hoc(
    features: np.ndarray,
    labels,
    attrs,
    n_classes: int,
    steps: int = 200,
    lr: float = 0.1,
) -> PostHocProbes:
    """Fresh zero-initialized probes fitted by full-batch gradient descent.

    Features are centered and divided by a pooled scalar, which changes the
    intercepts but not the direction of any ``beta``; the reported weights are
    mapped back to raw feature units.
    """
    zs, mu, s = standardize(np.asarray(features, dtype=np.float64))
    bank = ProbeBank.zeros(zs.shape[1], n_classes)
    t = bank.targets(labels, attrs)
    w = np.stack([balanced_weights(t[:, j]) for j in range(t.shape[1])], axis=1)
    zt = ad.Tensor(zs)
    for _ in range(steps):
        loss = ad.binary_log_loss(bank_logits(bank.weight, bank.bias, zt), t, w)
        gw, gb = ad.grad(loss, bank.parameters())
        bank.weight.data -= lr * gw.data
        bank.bias.data -= lr * gb.data
    with ad.no_grad():
        logits = bank_logits(bank.weight, bank.bias, zt).data
    final, conv = {}, {}
    for j, cid in enumerate(bank.identities):
        per = ad.binary_log_loss(ad.Tensor(logits[:, j]), t[:, j], w[:, j]).item()
        final[cid] = per
        conv[cid] = per < 0.95 * np.log(2.0)
    raw = ProbeBank(
        ad.Tensor(bank.weight.data / s, requires_grad=True),
        ad.Tensor(bank.bias.data - (mu / s) @ bank.weight.data, requires_grad=True),
        bank.identities,
    )
    return PostHocProbes(raw, final, conv, mu, s)


def probe_accuracy(bank: ProbeBank, features: np.ndarray, labels, attrs) -> dict:
    """Balanced accuracy of every probe on the given features."""
    with ad.no_grad():
        logits = bank_logits(bank.weight, bank.bias, ad.Tensor(features)).data
    t = bank.targets(labels, attrs)
    out = {}
    for j, cid in enumerate(bank.identities):
        pred = logits[:, j] > 0
        pos = t[:, j] > 0.5
        tpr = pred[pos].mean() if pos.any() else np.nan
        tnr = (~pred[~pos]).mean() if (~pos).any() else np.nan
        out[cid] = float(np.nanmean([tpr, tnr]))
    return out


def save_probes(bank: ProbeBank, path) -> None:
    desc = {"kind": "probes", "identities": [str(i) for i in bank.identities], "dim": bank.weight.shape[0]}
    entries = []
    for j, cid in enumerate(bank.identities):
        entries.append((f"{cid}/beta", bank.weight.data[:, j]))
        entries.append((f"{cid}/bias", np.array([bank.bias.data[j]])))
    write_container(path, desc, entries)


def load_probes(path) -> ProbeBank:
    desc, entries = read_container(path)
    if desc.get("kind") != "probes":
        raise ValueError(f"{path}: not a probe dump")
    ids = [i if i in (POLE_POS, POLE_NEG) else int(i) for i in desc["identities"]]
    table = dict(entries)
    weight = np.stack([table[f"{c}/beta"] for c in ids], axis=1)
    bias = np.array([table[f"{c}/bias"][0] for c in ids])
    return ProbeBank(ad.Tensor(weight, requires_grad=True), ad.Tensor(bias, requires_grad=True), ids)
