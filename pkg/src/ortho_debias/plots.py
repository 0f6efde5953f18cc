"""SVG figures from ``summary.csv``: one file per measure against rho, one series
per method, plus a measure x |K| grid."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import read_summary  # noqa: E402

log = logging.getLogger(__name__)

# (column in run rows, degenerate column in class rows or None, axis label)
MEASURES = {
    "discrepancy": ("discrepancy_biased", "discrepancy_degenerate", "opportunity discrepancy"),
    "leakage": ("leakage", None, "leakage (%)"),
    "projection": ("projection_biased", "projection_degenerate", "projection bias"),
    "sensitivity": ("sensitivity_biased", "sensitivity_degenerate", "sensitivity bias"),
}
METHOD_ORDER = ("baseline", "adversarial", "meta_ortho")
_STYLE = {"svg.hashsalt": "ortho-debias", "svg.fonttype": "path", "path.simplify": False}


def _float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _series(rows, measure: str, k_size: int):
    """method -> sorted [(rho, median value, any degenerate)] over seeds."""
    col, deg_col, _ = MEASURES[measure]
    runs = [r for r in rows if r["row"] == "run" and int(r["k_size"]) == k_size]
    degenerate = defaultdict(bool)
    if deg_col:
        for r in rows:
            if r["row"] == "class" and int(r["k_size"]) == k_size and r["biased"] == "1" and r[deg_col] == "1":
                degenerate[(r["method"], _float(r["rho"]))] = True
    vals = defaultdict(list)
    for r in runs:
        vals[(r["method"], _float(r["rho"]))].append(_float(r[col]))
    out = defaultdict(list)
    for (method, rho), v in sorted(vals.items()):
        v = [x for x in v if not math.isnan(x)]
        out[method].append((rho, float(np.median(v)) if v else math.nan, degenerate[(method, rho)]))
    return out


def _draw(ax, series, methods, rhos):
    for i, method in enumerate(methods):
        pts = {rho: (y, d) for rho, y, d in series.get(method, [])}
        if not pts:
            log.warning("plot: no data for method %s", method)
        # missing points become gaps
        ys = np.array([pts.get(r, (math.nan, False))[0] for r in rhos])
        color = f"C{i}"
        ax.plot(rhos, ys, "-", color=color, label=method)
        solid = [j for j, r in enumerate(rhos) if r in pts and not pts[r][1]]
        hollow = [j for j, r in enumerate(rhos) if r in pts and pts[r][1]]
        ax.plot([rhos[j] for j in solid], ys[solid], "o", color=color)
        ax.plot([rhos[j] for j in hollow], ys[hollow], "o", mfc="none", color=color)
        missing = [r for r in rhos if r not in pts]
        if missing and pts:
            log.warning("plot: method %s missing rho %s", method, missing)
    ax.set_xlabel("rho_K")


def _methods(rows):
    present = {r["method"] for r in rows}
    return [m for m in METHOD_ORDER if m in present] + sorted(present - set(METHOD_ORDER))


def plot_export(summary_csv, out_dir, kind: str = "all") -> list[Path]:
    """Write ``<measure>.svg`` per measure (kind rho), ``grid_k.svg`` (kind k), or both."""
    rows = read_summary(summary_csv)
    if kind not in ("rho", "k", "all"):
        raise ValueError(f"unknown plot kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = _methods(rows)
    ks = sorted({int(r["k_size"]) for r in rows})
    rhos = sorted({_float(r["rho"]) for r in rows})
    written = []
    with plt.rc_context(_STYLE):
        if kind in ("rho", "all") and ks:
            k0 = ks[0]
            for measure, (_, _, label) in MEASURES.items():
                fig, ax = plt.subplots(figsize=(4.0, 3.2))
                _draw(ax, _series(rows, measure, k0), methods, rhos)
                ax.set_ylabel(label)
                ax.set_title(f"|K| = {k0}")
                ax.legend(fontsize=7)
                fig.tight_layout()
                path = out_dir / f"{measure}.svg"
                fig.savefig(path, format="svg", metadata={"Date": None})
                plt.close(fig)
                written.append(path)
        if kind in ("k", "all") and ks:
            fig, axes = plt.subplots(len(MEASURES), len(ks), figsize=(2.6 * len(ks), 2.2 * len(MEASURES)), squeeze=False)
            for i, (measure, (_, _, label)) in enumerate(MEASURES.items()):
                for j, k in enumerate(ks):
                    ax = axes[i][j]
                    _draw(ax, _series(rows, measure, k), methods, rhos)
                    if j == 0:
                        ax.set_ylabel(label)
                    if i == 0:
                        ax.set_title(f"|K| = {k}")
            axes[0][0].legend(fontsize=6)
            fig.tight_layout()
            path = out_dir / "grid_k.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
