"""Median-over-seeds table for a sweep summary, plus the per-seed rho/omega correlation.

    python scripts/report.py runs/acceptance/summary.csv
"""
import sys
from collections import defaultdict

from ortho_debias import experiments as ex

COLS = ("accuracy", "leakage", "discrepancy_biased", "projection_biased", "abs_projection_biased", "sensitivity_biased")


def main(path):
    rows = [r for r in ex.read_summary(path) if r["row"] == "run"]
    groups = defaultdict(list)
    for r in rows:
        groups[(int(r["k_size"]), float(r["rho"]), r["method"])].append(r)
    print(f"{'|K|':>3} {'rho':>5} {'method':<12} {'n':>2} " + " ".join(f"{c[:14]:>14}" for c in COLS))
    for key in sorted(groups):
        g = groups[key]
        meds = [ex.median(float(r[c]) if r[c] else None for r in g) for c in COLS]
        print(f"{key[0]:>3} {key[1]:>5.2f} {key[2]:<12} {len(g):>2} " + " ".join(f"{m:>14.4f}" for m in meds))

    by_seed = defaultdict(dict)
    for (k, rho, m), g in groups.items():
        if k == 1 and m == "baseline":
            for r in g:
                by_seed[int(r["seed"])][rho] = float(r["projection_biased"])
    for seed, pts in sorted(by_seed.items()):
        if len(pts) >= 5:
            rhos = sorted(pts)
            c = ex.rho_bias_correlation(rhos, [pts[x] for x in rhos])
            print(f"seed {seed}: r(rho, omega) = {c.r:+.3f} over {c.n} points")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/acceptance/summary.csv")
