"""Desk-scale trial with the default configuration, timed.

    python scripts/run_desk_trial.py --out runs/desk
    LUNGTRIAL_WORKERS=8 python scripts/run_desk_trial.py --out runs/desk --seed 11

Prints the CT-vs-CXR report and the wall-clock time. Rerunning into the same
directory only redoes stages whose inputs changed.
"""

import argparse
import time
from pathlib import Path

from lungtrial import pipeline


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args(argv)

    extra = [f"trial_seed={args.seed}"] if args.seed is not None else []
    cfg = pipeline.load_config(args.config, args.overrides + extra)
    t0 = time.perf_counter()
    pipeline.run_trial(cfg, args.out, args.workers)
    elapsed = time.perf_counter() - t0

    print(f"{'row':<15}{'AUC CT (CI)':<26}{'AUC CXR (CI)':<26}{'p':>10}")
    for r in pipeline.read_report(args.out):
        cells = []
        for s in ("a", "b"):
            if r[f"auc_{s}"] == "NA":
                cells.append("NA")
            else:
                cells.append(f"{float(r[f'auc_{s}']):.3f} ({float(r[f'ci_low_{s}']):.3f}-"
                             f"{float(r[f'ci_high_{s}']):.3f})")
        p = "NA" if r["p_value"] == "NA" else f"{float(r['p_value']):.2e}"
        print(f"{r['row']:<15}{cells[0]:<26}{cells[1]:<26}{p:>10}")
    n = cfg.n_with + cfg.n_without
    print(f"{n} patients, {elapsed / 60:.1f} min -> {args.out / 'report.tsv'}")


if __name__ == "__main__":
    main()
