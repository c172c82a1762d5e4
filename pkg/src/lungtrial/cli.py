"""Command line entry point: ``lungtrial {run,cohort,image,read,analyze}``.

Every subcommand takes ``--config`` (JSON) and repeated ``--set key=value``
overrides; the worker count comes from ``--workers`` or ``LUNGTRIAL_WORKERS``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, stats


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON trial configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. ct.overrides.fluence_n0=1000")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lungtrial", description="desk-scale virtual lung screening trial")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "all stages"), ("cohort", "sample the virtual cohort"),
                        ("read", "run the reader on imaged patients")):
        _common(sub.add_parser(name, help=help_))

    im = sub.add_parser("image", help="build phantoms and simulate CT/CXR")
    _common(im)
    im.add_argument("--modality", choices=("ct", "cxr", "both"), default=None)
    im.add_argument("--scanner", choices=("legacy_w12", "legacy_w20"), default=None,
                    help="fix the CT scanner instead of the per-patient random choice")
    im.add_argument("--config-index", type=int, choices=(1, 2, 3), default=None)

    an = sub.add_parser("analyze", help="ROC report from reader outputs or sample tables")
    _common(an)
    an.add_argument("--samples", type=Path, nargs="+",
                    help="sample tables to analyse standalone (skips the manifest)")
    return ap


def _image_overrides(args) -> list[str]:
    extra = []
    if getattr(args, "scanner", None) or getattr(args, "config_index", None):
        extra.append('ct.mode="fixed"')
        if args.scanner:
            extra.append(f'ct.scanner="{args.scanner}"')
        if args.config_index:
            extra.append(f"ct.configuration_index={args.config_index}")
    return extra


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    base = args.config
    if base is None and (args.out / "config.json").exists():
        base = args.out / "config.json"   # later stages inherit the run's configuration
    try:
        cfg = pipeline.load_config(base, list(args.overrides) + _image_overrides(args))
    except (ValueError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    workers = args.workers or pipeline.worker_count()
    out = args.out

    if args.command == "analyze" and args.samples:
        samples = []
        for path in args.samples:
            samples += stats.samples_from_tsv(path.read_text())
        out.mkdir(parents=True, exist_ok=True)
        pipeline.analyze_samples(cfg, samples, out)
        print(out / "report.tsv")
        return 0

    try:
        manifest = pipeline.open_run(cfg, out)
        if args.command == "run":
            pipeline.run_trial(cfg, out, workers)
        elif args.command == "cohort":
            pipeline.stage_cohort(cfg, out, manifest)
        elif args.command == "image":
            mods = {None: None, "ct": ("CT",), "cxr": ("CXR",), "both": ("CT", "CXR")}[args.modality]
            pipeline.stage_image(cfg, out, manifest, workers, modalities=mods)
        elif args.command == "read":
            pipeline.stage_read(cfg, out, manifest, workers)
        elif args.command == "analyze":
            pipeline.stage_analyze(cfg, out, manifest)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if args.command in ("run", "analyze"):
        print(out / "report.tsv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
