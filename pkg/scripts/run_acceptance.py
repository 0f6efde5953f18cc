"""Populate the acceptance run cache.

The three specs under scripts/specs share training settings, so cells that
appear in more than one (baseline at rho=1, |K|=1) are trained once.
Completed runs are skipped, so this can be interrupted and restarted.

    python scripts/run_acceptance.py --out runs/acceptance --jobs 4
"""
import argparse
import logging
import time
from pathlib import Path

from ortho_debias import experiments as ex

SPECS = Path(__file__).parent / "specs"
ORDER = ("acceptance_methods.spec", "acceptance_rho.spec", "acceptance_k.spec")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None, help="default $ORTHO_DEBIAS_OUT/acceptance or runs/acceptance")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out) if args.out else ex.default_out() / "acceptance"
    for name in ORDER:
        t0 = time.perf_counter()
        spec = ex.load_spec(SPECS / name)
        recs = ex.sweep(spec, out, jobs=args.jobs)
        failed = [r for r in recs if r["status"] != "ok"]
        print(f"{name}: {len(recs)} new runs, {len(failed)} failed, {time.perf_counter() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
