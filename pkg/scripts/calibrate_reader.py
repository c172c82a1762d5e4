"""Fit the reader's logistic score calibration on held-out cases.

Runs a small trial (20 cases by default) under a seed distinct from the
evaluation seed, labels every detection as lesion hit (1) or false positive
(0), and fits ``score = sigmoid(slope * raw + intercept)`` per modality.
Prints ``--set`` overrides to paste into a run, or writes them into a
config file with ``--write``.

    python scripts/calibrate_reader.py --out runs/calib
    python scripts/calibrate_reader.py --out runs/calib --write trial.json
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from lungtrial import pipeline, reader

log = logging.getLogger("calibrate_reader")


def labelled_raw_scores(out: Path, cfg: pipeline.TrialConfig, modality: str):
    manifest = pipeline.Manifest.load(out)
    patients = pipeline._load_cohort(out, manifest)
    readings = pipeline._load_readings(cfg, out, manifest, patients)[modality]
    raw, labels = [], []
    for r in readings:
        fps = {id(d) for d in r.match.false_positives}
        for d in r.detections:
            raw.append(d.raw_score)
            labels.append(0 if id(d) in fps else 1)
    return np.array(raw), np.array(labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=90210, help="calibration cohort seed")
    ap.add_argument("--n-with", type=int, default=12)
    ap.add_argument("--n-without", type=int, default=8)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--write", type=Path, help="merge the fitted values into this JSON config")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    cfg = pipeline.load_config(args.config, [f"trial_seed={args.seed}", f"n_with={args.n_with}",
                                             f"n_without={args.n_without}"])
    pipeline.run_trial(cfg, args.out, args.workers)

    fitted = {}
    for mod in cfg.modalities:
        raw, y = labelled_raw_scores(args.out, cfg, mod)
        if y.min() == y.max():
            log.warning("%s: detections are all one class; calibration skipped", mod)
            continue
        slope, intercept = reader.fit_calibration(raw, y)
        key = f"reader_{mod.lower()}"
        fitted[key] = {"calibration_slope": round(slope, 4), "calibration_intercept": round(intercept, 4)}
        print(f"{mod}: {len(y)} detections, {int(y.sum())} hits -> slope {slope:.4f}, intercept {intercept:.4f}")

    for key, vals in fitted.items():
        for name, v in vals.items():
            print(f"--set {key}.{name}={v}")
    if args.write:
        base = json.loads(args.write.read_text()) if args.write.exists() else {}
        for key, vals in fitted.items():
            base.setdefault(key, {}).update(vals)
        args.write.write_text(json.dumps(base, indent=2, sort_keys=True) + "\n")
        print(f"wrote {args.write}")


if __name__ == "__main__":
    main()
