"""Fairness measures: opportunity discrepancy, model leakage, projection bias,
sensitivity bias, and the report that bundles them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ConvNet, class_logit_feature_gradients, concept_feature_array, predict
from .probes import POLE_NEG, POLE_POS, train_probes_post_hoc

COS_EPS = 1e-12
# a vector whose norm is below this is treated as absent (flagged degenerate)
NORM_FLOOR = 1e-10


class UndefinedGroup(ValueError):
    """An attribute group needed by the discrepancy is empty."""


# ---------------------------------------------------------------- discrepancy


def group_recall(preds, labels, attrs, y: int, a: int) -> float | None:
    preds, labels, attrs = np.asarray(preds), np.asarray(labels), np.asarray(attrs)
    m = (labels == y) & (attrs == a)
    if not m.any():
        return None
    return float((preds[m] == y).mean())


def opportunity_discrepancy(preds, labels, attrs, y: int) -> float:
    """|TPR_{A=0}(y) - TPR_{A=1}(y)|; raises UndefinedGroup if either group is empty."""
    r0 = group_recall(preds, labels, attrs, y, 0)
    r1 = group_recall(preds, labels, attrs, y, 1)
    if r0 is None or r1 is None:
        missing = "A=0" if r0 is None else "A=1"
        raise UndefinedGroup(f"class {y}: group {missing} is empty")
    return abs(r0 - r1)


@dataclass
class ClassDiscrepancy:
    value: float | None
    tpr_a0: float | None
    tpr_a1: float | None

    @property
    def degenerate(self) -> bool:
        return self.value is None

    @property
    def one_sided(self) -> float | None:
        """The recall of whichever group exists, reported when the gap is undefined."""
        return self.tpr_a0 if self.tpr_a1 is None else self.tpr_a1


def class_discrepancy(preds, labels, attrs, y: int) -> ClassDiscrepancy:
    r0 = group_recall(preds, labels, attrs, y, 0)
    r1 = group_recall(preds, labels, attrs, y, 1)
    value = abs(r0 - r1) if r0 is not None and r1 is not None else None
    return ClassDiscrepancy(value, r0, r1)


# ---------------------------------------------------------------- leakage


@dataclass(frozen=True)
class LeakageConfig:
    hidden: int = 32
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    train_frac: float = 0.7
    seed: int = 0


def _init_mlp(d: int, hidden: int, rng) -> list[ad.Tensor]:
    s1, s2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(hidden)
    shapes = [((d, hidden), s1), ((hidden,), s1), ((hidden, 1), s2), ((1,), s2)]
    return [ad.Tensor(rng.uniform(-s, s, shp), requires_grad=True) for shp, s in shapes]


def _mlp_logits(params, x) -> ad.Tensor:
    w1, b1, w2, b2 = params
    h = ad.matmul(x, w1)
    h = ad.relu(ad.add(h, ad.expand(b1, h.shape, 0)))
    out = ad.reshape(ad.matmul(h, w2), (-1,))
    return ad.add(out, ad.expand(ad.reshape(b2, ()), out.shape, 0))


def model_leakage(train_logits, train_attrs, test_logits, test_attrs, h_config: LeakageConfig | None = None) -> float:
    """Held-out accuracy (percent) of a fresh one-hidden-layer attribute classifier on logits.

    Inputs are standardized per column with statistics of the training part.
    """
    cfg = h_config or LeakageConfig()
    xtr = np.asarray(train_logits, dtype=np.float64)
    xte = np.asarray(test_logits, dtype=np.float64)
    atr = np.asarray(train_attrs).astype(np.float64)
    ate = np.asarray(test_attrs).astype(np.float64)
    if len(np.unique(atr)) < 2 or len(np.unique(ate)) < 2:
        raise ValueError("model_leakage: both splits need both attribute values")
    if xtr.ndim != 2 or xte.ndim != 2 or xtr.shape[1] != xte.shape[1]:
        raise ad.ShapeError(f"model_leakage: logits {xtr.shape} vs {xte.shape}")
    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0)
    sd[sd <= 0] = 1.0
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd

    rng = np.random.default_rng([int(cfg.seed), 0x1EA4])
    params = _init_mlp(xtr.shape[1], cfg.hidden, rng)
    vel = [np.zeros(p.shape) for p in params]
    n = len(xtr)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss = ad.binary_log_loss(_mlp_logits(params, ad.Tensor(xtr[idx])), atr[idx])
            for p, v, g in zip(params, vel, ad.grad(loss, params)):
                v *= cfg.momentum
                v += g.data
                p.data -= cfg.lr * v
    with ad.no_grad():
        pred = _mlp_logits(params, ad.Tensor(xte)).data > 0
    return float(100.0 * np.mean(pred == (ate > 0.5)))


def leakage_split(attrs, train_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Attribute-stratified split of a pool into h-train / h-test index sets."""
    attrs = np.asarray(attrs)
    rng = np.random.default_rng([int(seed), 0x5E7])
    tr, te = [], []
    for a in (0, 1):
        idx = rng.permutation(np.flatnonzero(attrs == a))
        k = int(round(train_frac * len(idx)))
        tr.append(idx[:k])
        te.append(idx[k:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))


def pool_leakage(logits, attrs, h_config: LeakageConfig | None = None) -> float:
    cfg = h_config or LeakageConfig()
    tr, te = leakage_split(attrs, cfg.train_frac, cfg.seed)
    logits, attrs = np.asarray(logits), np.asarray(attrs)
    return model_leakage(logits[tr], attrs[tr], logits[te], attrs[te], cfg)


# ---------------------------------------------------------------- projection / sensitivity


def cosine(a, b, eps: float = COS_EPS) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ad.ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    return float(a @ b / ((np.linalg.norm(a) + eps) * (np.linalg.norm(b) + eps)))


def projection_bias(beta_c, nu, eps: float = COS_EPS) -> float:
    return cosine(beta_c, nu, eps)


def projection_degenerate(beta_c, nu) -> bool:
    return bool(np.linalg.norm(beta_c) < NORM_FLOOR or np.linalg.norm(nu) < NORM_FLOOR)


@dataclass
class Sensitivity:
    mean: float
    std: float
    n: int
    degenerate: bool


def row_cosines(rows: np.ndarray, nu: np.ndarray, eps: float = COS_EPS) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    return rows @ nu / ((np.linalg.norm(rows, axis=1) + eps) * (np.linalg.norm(nu) + eps))


def sensitivity_bias(net: ConvNet, samples, class_index: int, layer: int, nu, batch_size: int = 128) -> Sensitivity:
    """Per-sample cosine between d logit_c / d features (spatially summed) and ``nu``."""
    samples = np.asarray(samples, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if len(samples) == 0:
        return Sensitivity(0.0, 0.0, 0, True)
    grads = np.concatenate(
        [
            class_logit_feature_gradients(net, samples[i : i + batch_size], class_index, layer)
            for i in range(0, len(samples), batch_size)
        ]
    )
    cos = row_cosines(grads, nu)
    degenerate = bool(np.linalg.norm(nu) < NORM_FLOOR or np.all(np.linalg.norm(grads, axis=1) < NORM_FLOOR))
    return Sensitivity(float(cos.mean()), float(cos.std()), len(cos), degenerate)


# ---------------------------------------------------------------- report


def _nanmean(values) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    n_classes: int
    biased: list[int]
    accuracy: float
    accuracy_biased: float | None
    accuracy_unbiased: float | None
    leakage: float | None
    discrepancy: list[float | None]
    tpr_a0: list[float | None]
    tpr_a1: list[float | None]
    projection: list[float]
    projection_degenerate: list[bool]
    sensitivity_mean: list[float]
    sensitivity_std: list[float]
    sensitivity_degenerate: list[bool]
    sensitivity_samples: int
    leakage_degenerate: bool = False
    probe_converged: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    # means over classes (all / biased subset / unbiased subset)
    def _subset(self, which: str) -> list[int]:
        if which == "all":
            return list(range(self.n_classes))
        k = set(self.biased)
        if which == "biased":
            return sorted(k)
        if which == "unbiased":
            return [c for c in range(self.n_classes) if c not in k]
        raise ValueError(f"unknown subset {which!r}")

    def mean_discrepancy(self, which: str = "all") -> float | None:
        return _nanmean([self.discrepancy[c] for c in self._subset(which)])

    def mean_abs_projection(self, which: str = "all") -> float | None:
        return _nanmean([abs(self.projection[c]) for c in self._subset(which)])

    def mean_projection(self, which: str = "all") -> float | None:
        return _nanmean([self.projection[c] for c in self._subset(which)])

    def mean_sensitivity(self, which: str = "all") -> float | None:
        return _nanmean([self.sensitivity_mean[c] for c in self._subset(which)])

    def aggregates(self) -> dict:
        out = {}
        for which in ("all", "biased", "unbiased"):
            out[f"discrepancy_{which}"] = self.mean_discrepancy(which)
            out[f"abs_projection_{which}"] = self.mean_abs_projection(which)
            out[f"projection_{which}"] = self.mean_projection(which)
            out[f"sensitivity_{which}"] = self.mean_sensitivity(which)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probe_converged"] = {str(k): v for k, v in self.probe_converged.items()}
        d["aggregates"] = self.aggregates()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("aggregates", None)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def class_rows(self) -> list[dict]:
        rows = []
        for c in range(self.n_classes):
            rows.append(
                {
                    "class": c,
                    "biased": int(c in self.biased),
                    "discrepancy": self.discrepancy[c],
                    "discrepancy_degenerate": int(self.discrepancy[c] is None),
                    "tpr_a0": self.tpr_a0[c],
                    "tpr_a1": self.tpr_a1[c],
                    "projection": self.projection[c],
                    "projection_degenerate": int(self.projection_degenerate[c]),
                    "sensitivity_mean": self.sensitivity_mean[c],
                    "sensitivity_std": self.sensitivity_std[c],
                    "sensitivity_degenerate": int(self.sensitivity_degenerate[c]),
                }
            )
        return rows


CLASS_COLUMNS = [
    "class",
    "biased",
    "discrepancy",
    "discrepancy_degenerate",
    "tpr_a0",
    "tpr_a1",
    "projection",
    "projection_degenerate",
    "sensitivity_mean",
    "sensitivity_std",
    "sensitivity_degenerate",
]


def fmt(v) -> str:
    """Stable text form for CSV cells: empty for undefined, repr for floats."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def class_csv(report: MetricsReport, run_fields: dict | None = None) -> str:
    run_fields = run_fields or {}
    cols = list(run_fields) + CLASS_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in report.class_rows():
        merged = {**run_fields, **row}
        w.writerow([fmt(merged[c]) for c in cols])
    return buf.getvalue()


# ---------------------------------------------------------------- evaluate


@dataclass(frozen=True)
class EvalConfig:
    probe_steps: int = 200
    probe_lr: float = 0.1
    sensitivity_per_class: int = 100
    layer: int | None = None
    leakage: LeakageConfig = LeakageConfig()


def evaluate(
    net: ConvNet,
    probe_set,
    audit_set,
    biased=(),
    cfg: EvalConfig | None = None,
) -> MetricsReport:
    """Assemble every measure.

    ``probe_set`` (normally the training split) feeds the post-hoc probes that
    give projection bias and ``nu``; ``audit_set`` feeds accuracy, discrepancy,
    leakage and sensitivity.
    """
    cfg = cfg or EvalConfig()
    layer = net.concept_layer if cfg.layer is None else cfg.layer
    n = net.n_classes
    biased = sorted(int(k) for k in biased)

    feats = concept_feature_array(net, probe_set.images, layer)
    post = train_probes_post_hoc(feats, probe_set.labels, probe_set.attrs, n, cfg.probe_steps, cfg.probe_lr)
    # with a single attribute value in the probe data the pole probes cannot be fitted;
    # nu is then undefined and every omega / sensitivity is flagged degenerate
    nu_defined = len(np.unique(probe_set.attrs)) == 2
    nu = post.nu() if nu_defined else np.zeros(feats.shape[1])

    logits = predict(net, audit_set.images)
    preds = logits.argmax(axis=1)
    labels, attrs = audit_set.labels, audit_set.attrs
    correct = preds == labels

    def acc(classes):
        m = np.isin(labels, classes)
        return float(correct[m].mean()) if m.any() else None

    disc = [class_discrepancy(preds, labels, attrs, c) for c in range(n)]
    proj = [projection_bias(post.beta(c), nu) for c in range(n)]
    proj_deg = [projection_degenerate(post.beta(c), nu) for c in range(n)]

    sens = []
    for c in range(n):
        idx = np.flatnonzero(labels == c)[: cfg.sensitivity_per_class]
        sens.append(sensitivity_bias(net, audit_set.images[idx], c, layer, nu))

    leak_deg = len(np.unique(attrs)) < 2
    leak = None if leak_deg else pool_leakage(logits, attrs, cfg.leakage)

    unbiased = [c for c in range(n) if c not in biased]
    return MetricsReport(
        n_classes=n,
        biased=biased,
        accuracy=float(correct.mean()),
        accuracy_biased=acc(biased) if biased else None,
        accuracy_unbiased=acc(unbiased) if unbiased else None,
        leakage=leak,
        discrepancy=[d.value for d in disc],
        tpr_a0=[d.tpr_a0 for d in disc],
        tpr_a1=[d.tpr_a1 for d in disc],
        projection=proj,
        projection_degenerate=proj_deg,
        sensitivity_mean=[s.mean for s in sens],
        sensitivity_std=[s.std for s in sens],
        sensitivity_degenerate=[s.degenerate for s in sens],
        sensitivity_samples=cfg.sensitivity_per_class,
        leakage_degenerate=leak_deg,
        probe_converged={str(k): bool(v) for k, v in post.converged.items()},
        extra={
            "attr_probe_converged": bool(post.converged[POLE_POS] and post.converged[POLE_NEG]),
            "nu_defined": nu_defined,
        },
    )
