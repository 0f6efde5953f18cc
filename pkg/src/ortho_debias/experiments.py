"""Sweep harness: spec files, grid cells, resumable runs and the summary table.

A spec file is flat ``key = value`` text; list-valued keys take comma
separated values. Unknown keys are rejected. Example::

    rhos = 0.0, 0.5, 1.0
    k_sizes = 1
    methods = baseline, meta_ortho
    seeds = 0, 1, 2
    epochs = 12
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import data as bd
from .metrics import CLASS_COLUMNS, EvalConfig, LeakageConfig, MetricsReport, class_csv, evaluate, fmt
from .model import load_checkpoint, parameter_hash, save_checkpoint
from .probes import save_probes
from .trainers import METHODS, TrainConfig, train, write_history

log = logging.getLogger(__name__)

OUT_ENV = "ORTHO_DEBIAS_OUT"
DEFAULT_RHOS = tuple(round(0.1 * i, 1) for i in range(11))


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------- spec


_LIST_KEYS = {"rhos": float, "k_sizes": int, "methods": str, "seeds": int, "layers": int}
_DATA_KEYS = {
    "n_classes": int,
    "per_class": int,
    "height": int,
    "width": int,
    "marker_size": int,
    "blend_frac": float,
    "noise_std": float,
    "grating_amplitude": float,
}
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "inner_lr": float,
    "gamma": float,
    "adv_weight": float,
    "adv_hidden": int,
    "concept_layer": int,
    "feature_scale": float,
    "warmup_epochs": int,
    "co_train_probes": bool,
    "detach_nu": bool,
    "heldout_concept_batch": bool,
    "alternating_adversary": bool,
    "debias_poles": bool,
    "concept_on_poles": bool,
    "probe_train_lr": float,
    "grad_clip": float,
}
# spec keys whose TrainConfig field has another name
_TRAIN_ALIASES = {"probe_train_lr": "probe_lr"}
_MISC_KEYS = {
    "train_frac": float,
    "audit_per_class": int,
    "probe_steps": int,
    "probe_lr": float,
    "sensitivity_per_class": int,
    "leak_epochs": int,
}


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"not a boolean: {v!r}")


@dataclass
class ExperimentSpec:
    rhos: tuple[float, ...] = DEFAULT_RHOS
    k_sizes: tuple[int, ...] = (1,)
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2)
    layers: tuple[int, ...] = (1, 2, 3)
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    train_frac: float = 0.8
    audit_per_class: int = 400
    probe_steps: int = 200
    probe_lr: float = 0.1
    sensitivity_per_class: int = 100
    leak_epochs: int = 200

    def validate(self) -> None:
        n = int(self.data.get("n_classes", 10))
        for r in self.rhos:
            if not 0.0 <= r <= 1.0:
                raise SpecError(f"rho {r} outside [0, 1]")
        for k in self.k_sizes:
            if not 1 <= k <= n:
                raise SpecError(f"k_size {k} outside 1..{n}")
        for m in self.methods:
            if m not in METHODS:
                raise SpecError(f"unknown method {m!r}")
        if not self.seeds:
            raise SpecError("no seeds")
        for c in self.cells():
            try:
                c.bias_config(self).validate()
            except bd.DatasetError as e:
                raise SpecError(f"cell {c.cell_id}: {e}") from e

    def cells(self) -> list["Cell"]:
        n = int(self.data.get("n_classes", 10))
        return [Cell(r, k, s, draw_subset(n, k, s)) for k in self.k_sizes for r in self.rhos for s in self.seeds]

    def train_config(self, method: str, seed: int) -> TrainConfig:
        return replace(TrainConfig(), **self.train, method=method, seed=seed)

    def eval_config(self, seed: int) -> EvalConfig:
        return EvalConfig(
            probe_steps=self.probe_steps,
            probe_lr=self.probe_lr,
            sensitivity_per_class=self.sensitivity_per_class,
            leakage=LeakageConfig(epochs=self.leak_epochs, seed=seed),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def parse_spec(text: str) -> ExperimentSpec:
    spec = ExperimentSpec()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            if key in _LIST_KEYS:
                conv = _LIST_KEYS[key]
                items = tuple(conv(v.strip()) for v in value.split(",") if v.strip())
                setattr(spec, key, items)
            elif key in _DATA_KEYS:
                spec.data[key] = _DATA_KEYS[key](value)
            elif key in _TRAIN_KEYS:
                conv = _TRAIN_KEYS[key]
                spec.train[_TRAIN_ALIASES.get(key, key)] = _parse_bool(value) if conv is bool else conv(value)
            elif key in _MISC_KEYS:
                setattr(spec, key, _MISC_KEYS[key](value))
            else:
                raise SpecError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, SpecError):
                raise
            raise SpecError(f"line {lineno}: bad value for {key!r}: {value!r}") from e
    spec.validate()
    return spec


def load_spec(path) -> ExperimentSpec:
    return parse_spec(Path(path).read_text())


def draw_subset(n_classes: int, k_size: int, seed: int) -> tuple[int, ...]:
    """The biased subset for a seed; fixed across rho values and methods."""
    rng = np.random.default_rng([int(seed), int(k_size), 0x4B])
    return tuple(sorted(int(c) for c in rng.choice(n_classes, size=k_size, replace=False)))


@dataclass(frozen=True)
class Cell:
    rho: float
    k_size: int
    seed: int
    subset: tuple[int, ...]

    @property
    def cell_id(self) -> str:
        return f"rho{self.rho:.2f}_k{self.k_size}_K{'-'.join(map(str, self.subset))}"

    def bias_config(self, spec: ExperimentSpec) -> bd.BiasConfig:
        return bd.BiasConfig(biased=self.subset, rho_biased=self.rho, seed=self.seed, **spec.data)

    def audit_config(self, spec: ExperimentSpec) -> bd.BiasConfig:
        # balanced pool, disjoint seed stream from the training data
        return bd.BiasConfig(per_class=spec.audit_per_class, seed=1_000_003 + self.seed, **_without(spec.data, "per_class"))


def _without(d: dict, *keys) -> dict:
    return {k: v for k, v in d.items() if k not in keys}


def run_dir(out, cell: Cell, method: str) -> Path:
    return Path(out) / cell.cell_id / method / str(cell.seed)


def default_out(cli_value=None) -> Path:
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get(OUT_ENV, "runs"))


# ---------------------------------------------------------------- single run


def make_splits(cell: Cell, spec: ExperimentSpec):
    ds = bd.generate(cell.bias_config(spec))
    train_set, test_set = bd.split(ds, spec.train_frac, cell.seed)
    return ds, train_set, test_set


def dataset_digest(ds: bd.BiasDataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.images, ds.labels, ds.attrs):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


RUN_COLUMNS = [
    "cell",
    "method",
    "seed",
    "rho",
    "k_size",
    "subset",
    "row",
    "accuracy",
    "accuracy_biased",
    "accuracy_unbiased",
    "leakage",
    "discrepancy_biased",
    "discrepancy_all",
    "abs_projection_biased",
    "projection_biased",
    "abs_projection_all",
    "sensitivity_biased",
    "sensitivity_all",
    "checkpoint_sha256",
]
SUMMARY_COLUMNS = RUN_COLUMNS + [c for c in CLASS_COLUMNS]


def summary_rows(cell: Cell, method: str, report: MetricsReport, ckpt_hash: str) -> list[dict]:
    agg = report.aggregates()
    base = {
        "cell": cell.cell_id,
        "method": method,
        "seed": cell.seed,
        "rho": cell.rho,
        "k_size": cell.k_size,
        "subset": "-".join(map(str, cell.subset)),
    }
    run = dict(base)
    run.update(
        row="run",
        accuracy=report.accuracy,
        accuracy_biased=report.accuracy_biased,
        accuracy_unbiased=report.accuracy_unbiased,
        leakage=report.leakage,
        discrepancy_biased=agg["discrepancy_biased"],
        discrepancy_all=agg["discrepancy_all"],
        abs_projection_biased=agg["abs_projection_biased"],
        projection_biased=agg["projection_biased"],
        abs_projection_all=agg["abs_projection_all"],
        sensitivity_biased=agg["sensitivity_biased"],
        sensitivity_all=agg["sensitivity_all"],
        checkpoint_sha256=ckpt_hash,
    )
    rows = [run]
    for cr in report.class_rows():
        rows.append({**base, "row": "class", **cr})
    return rows


def _csv_text(rows: list[dict], header: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def append_summary(out, rows: list[dict]) -> None:
    """Append rows to ``summary.csv`` under an exclusive lock."""
    path = Path(out) / "summary.csv"
    with FileLock(str(path) + ".lock"):
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            fh.write(_csv_text(rows, header=new))


def _row_key(r: dict):
    cls = r.get("class", "")
    return (float(r["k_size"]), float(r["rho"]), r["cell"], r["method"], int(r["seed"]), r["row"] != "run", int(cls) if cls not in ("", None) else -1)


def canonicalize_summary(out) -> int:
    """Sort rows, keep the last copy of any duplicated (cell, method, seed, row, class) key."""
    path = Path(out) / "summary.csv"
    with FileLock(str(path) + ".lock"):
        if not path.exists():
            return 0
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        latest = {}
        for r in rows:
            latest[(r["cell"], r["method"], r["seed"], r["row"], r.get("class", ""))] = r
        ordered = sorted(latest.values(), key=_row_key)
        path.write_text(_csv_text(ordered, header=True))
    return len(ordered)


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_run(cell: Cell, method: str, spec: ExperimentSpec, out) -> Path:
    """Train one (cell, method, seed) and write checkpoint, probes and history."""
    d = run_dir(out, cell, method)
    d.mkdir(parents=True, exist_ok=True)
    ds, train_set, test_set = make_splits(cell, spec)
    cfg = spec.train_config(method, cell.seed)
    result = train(method, train_set, cfg, test_set)
    save_checkpoint(result.net, d / "checkpoint.odck")
    save_probes(result.probes, d / "probes.odck")
    write_history(result.history, d / "history.csv")
    manifest = ds.manifest()
    manifest["sha256"] = dataset_digest(ds)
    (d / "dataset.manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (d / "train_config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    return d


def evaluate_run(cell: Cell, method: str, spec: ExperimentSpec, out) -> tuple[MetricsReport, str]:
    d = run_dir(out, cell, method)
    net = load_checkpoint(d / "checkpoint.odck")
    _, train_set, _ = make_splits(cell, spec)
    audit = bd.generate(cell.audit_config(spec))
    report = evaluate(net, train_set, audit, cell.subset, spec.eval_config(cell.seed))
    report.extra["cell"] = cell.cell_id
    (d / "metrics.json").write_text(report.to_json())
    run_fields = {"cell": cell.cell_id, "method": method, "seed": cell.seed}
    (d / "metrics.csv").write_text(class_csv(report, run_fields))
    return report, parameter_hash(net)


def record_path(out, cell: Cell, method: str) -> Path:
    return run_dir(out, cell, method) / "record.json"


def run_fingerprint(cell: Cell, method: str, spec: ExperimentSpec) -> str:
    """Digest of every setting that feeds one run; a changed spec invalidates only the runs it touches."""
    payload = {
        "data": cell.bias_config(spec).to_dict(),
        "audit": cell.audit_config(spec).to_dict(),
        "train": spec.train_config(method, cell.seed).relevant(),
        "eval": asdict(spec.eval_config(cell.seed)),
        "train_frac": spec.train_frac,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def is_complete(out, cell: Cell, method: str, spec: ExperimentSpec | None = None) -> bool:
    p = record_path(out, cell, method)
    if not p.exists():
        return False
    try:
        rec = json.loads(p.read_text())
    except json.JSONDecodeError:
        return False
    if rec.get("status") != "ok":
        return False
    return spec is None or rec.get("config_sha256") == run_fingerprint(cell, method, spec)


def execute(cell: Cell, method: str, spec: ExperimentSpec, out) -> dict:
    """Train + evaluate one record; failures are written to the record, not raised."""
    t0 = time.perf_counter()
    d = run_dir(out, cell, method)
    d.mkdir(parents=True, exist_ok=True)
    rec = {"cell": cell.cell_id, "method": method, "seed": cell.seed, "rho": cell.rho, "k_size": cell.k_size,
           "subset": list(cell.subset), "config_sha256": run_fingerprint(cell, method, spec)}
    try:
        train_run(cell, method, spec, out)
        report, ckpt_hash = evaluate_run(cell, method, spec, out)
        append_summary(out, summary_rows(cell, method, report, ckpt_hash))
        rec.update(status="ok", checkpoint="checkpoint.odck", history="history.csv", metrics="metrics.json",
                   checkpoint_sha256=ckpt_hash)
    except Exception as e:  # one failed run must not stop the sweep
        log.error("run %s/%s/%s failed: %s", cell.cell_id, method, cell.seed, e)
        rec.update(status="failed", error=f"{type(e).__name__}: {e}", traceback=traceback.format_exc())
    rec["wall_time_s"] = round(time.perf_counter() - t0, 3)
    record_path(out, cell, method).write_text(json.dumps(rec, sort_keys=True, indent=1))
    return rec


def _execute_star(args):
    return execute(*args)


def sweep(spec: ExperimentSpec, out, jobs: int = 1) -> list[dict]:
    """Run every (cell, method, seed) not already complete; returns the new records."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1))
    todo = [(c, m, spec, out) for c in spec.cells() for m in spec.methods if not is_complete(out, c, m, spec)]
    log.info("sweep: %d runs to do", len(todo))
    if jobs <= 1 or len(todo) <= 1:
        records = [execute(*t) for t in todo]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_execute_star, todo))
    canonicalize_summary(out)
    return records


# ---------------------------------------------------------------- analyses


@dataclass
class Correlation:
    r: float
    n: int
    degenerate: bool


def rho_bias_correlation(rhos, omegas) -> Correlation:
    """Pearson correlation between the bias ratio and the biased class's projection bias."""
    x = np.asarray(rhos, dtype=np.float64)
    y = np.asarray(omegas, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("rho_bias_correlation: need two equal-length 1-D sequences")
    if len(np.unique(x)) < 5:
        raise ValueError(f"rho_bias_correlation: need >= 5 distinct rho values, got {len(np.unique(x))}")
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return Correlation(float("nan"), len(x), True)
    r = float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))
    return Correlation(max(-1.0, min(1.0, r)), len(x), False)


@dataclass
class LayerDiagnostic:
    layers: list[int]
    rhos: list[float]
    values: dict  # layer -> list of mean sensitivity per rho
    variance: dict  # layer -> variance across rho
    recommended: int


def recommend_layer(values: dict) -> LayerDiagnostic:
    """``values`` maps layer -> {rho: mean sensitivity}; pick the layer with the largest variance."""
    layers = sorted(values)
    if not layers:
        raise ValueError("layer_diagnostic: no layers")
    rhos = sorted(set().union(*(set(v) for v in values.values())))
    if len(rhos) < 3:
        raise ValueError(f"layer_diagnostic: need >= 3 rho points, got {len(rhos)}")
    var = {}
    for layer in layers:
        pts = np.array([values[layer][r] for r in sorted(values[layer])], dtype=np.float64)
        var[layer] = float(pts.var())
    # ties go to the shallower layer
    best = max(layers, key=lambda l: (var[l], -l))
    return LayerDiagnostic(layers, rhos, {l: [values[l][r] for r in sorted(values[l])] for l in layers}, var, best)


def layer_diagnostic(spec: ExperimentSpec, out, seed: int | None = None, k_size: int | None = None) -> LayerDiagnostic:
    """Mean sensitivity bias of the biased classes per layer, across the rho grid of baseline runs.

    Baseline checkpoints missing from ``out`` are trained first.
    """
    from .metrics import sensitivity_bias
    from .model import concept_feature_array
    from .probes import train_probes_post_hoc

    seed = spec.seeds[0] if seed is None else seed
    k_size = spec.k_sizes[0] if k_size is None else k_size
    cells = [c for c in spec.cells() if c.seed == seed and c.k_size == k_size]
    values: dict[int, dict[float, float]] = {l: {} for l in spec.layers}
    for cell in cells:
        if not (run_dir(out, cell, "baseline") / "checkpoint.odck").exists():
            train_run(cell, "baseline", spec, out)
        net = load_checkpoint(run_dir(out, cell, "baseline") / "checkpoint.odck")
        _, train_set, _ = make_splits(cell, spec)
        audit = bd.generate(cell.audit_config(spec))
        for layer in spec.layers:
            feats = concept_feature_array(net, train_set.images, layer)
            post = train_probes_post_hoc(feats, train_set.labels, train_set.attrs, net.n_classes, spec.probe_steps, spec.probe_lr)
            means = []
            for c in cell.subset:
                idx = np.flatnonzero(audit.labels == c)[: spec.sensitivity_per_class]
                means.append(sensitivity_bias(net, audit.images[idx], c, layer, post.nu()).mean)
            values[layer][cell.rho] = float(np.mean(means))
    return recommend_layer(values)


def median(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else float("nan")
