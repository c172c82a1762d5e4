"""Staged, resumable trial runner.

Stages: cohort -> image (phantom, CT, CXR) -> read (detect + match) -> analyze.
Every artifact is written atomically and recorded in ``manifest.json`` with
its sha256; a stage is skipped on rerun only when all of its recorded
digests still verify. Nothing in the manifest depends on wall-clock time,
absolute paths or the worker count, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cohort as cohort_mod
from . import ct, cxr, phantom, reader, stats
from .io import (
    atomic_write_text,
    dump_json,
    read_raw_volume,
    sha256_file,
    write_raw_volume,
)
from .rng import derive_seed, generator

log = logging.getLogger(__name__)

WORKERS_ENV = "LUNGTRIAL_WORKERS"
CT_CONFIGURATIONS = tuple((s, k) for s in ct.SCANNERS for k in (1, 2, 3))

# desk-scale acquisition: 336 channels x 2 mm spans the same fan as 672 x 1 mm
DESK_CT = {"n_views": 328, "n_channels": 336, "channel_pitch_mm": 2.0, "fluence_n0": 300.0}


class StageError(RuntimeError):
    """Raised when a stage's upstream artifacts are missing."""


@dataclass
class CtPolicy:
    mode: str = "random"             # "random": one of the six per patient; "fixed"
    scanner: str = "legacy_w12"
    configuration_index: int = 2
    overrides: dict = field(default_factory=lambda: dict(DESK_CT))
    failure_rate: float = 0.0        # injected imaging failures, for exclusion bookkeeping

    def __post_init__(self):
        if self.mode not in ("random", "fixed"):
            raise ValueError("ct.mode must be 'random' or 'fixed'")
        if self.scanner not in ct.SCANNERS:
            raise ValueError(f"unknown scanner {self.scanner!r}")
        if self.configuration_index not in (1, 2, 3):
            raise ValueError("configuration_index must be 1, 2 or 3")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")


@dataclass
class StatsOptions:
    ci_method: str = "bootstrap_percentile"
    n_boot: int = 2000
    alpha: float = 0.05
    size_threshold_mm: float = 8.0
    top_k_false_positives: int = 3
    radius_rule: float = 1.0

    def __post_init__(self):
        stats.CiMethod(self.ci_method)
        if self.n_boot < 1 or not 0 < self.alpha < 1 or self.radius_rule <= 0:
            raise ValueError("invalid statistics options")


@dataclass
class TrialConfig:
    trial_seed: int = 2024
    n_with: int = 67
    n_without: int = 53
    phantom_dims: tuple = (160, 128, 96)
    phantom_spacing_mm: tuple = (2.0, 2.0, 2.0)
    ct: CtPolicy = field(default_factory=CtPolicy)
    cxr: cxr.CxrConfig = field(default_factory=cxr.CxrConfig)
    # calibration fitted by scripts/calibrate_reader.py on 20 held-out cases (seed 90210)
    reader_ct: reader.ReaderConfig = field(default_factory=lambda: reader.ReaderConfig(
        calibration_slope=30.6372, calibration_intercept=-12.0597))
    reader_cxr: reader.ReaderConfig = field(default_factory=lambda: reader.ReaderConfig(
        calibration_slope=7.2945, calibration_intercept=-6.5807))
    stats: StatsOptions = field(default_factory=StatsOptions)
    modalities: tuple = ("CT", "CXR")

    def __post_init__(self):
        if isinstance(self.ct, dict):
            self.ct = CtPolicy(**self.ct)
        if isinstance(self.cxr, dict):
            self.cxr = cxr.CxrConfig(**self.cxr)
        if isinstance(self.reader_ct, dict):
            self.reader_ct = reader.ReaderConfig(**self.reader_ct)
        if isinstance(self.reader_cxr, dict):
            self.reader_cxr = reader.ReaderConfig(**self.reader_cxr)
        if isinstance(self.stats, dict):
            self.stats = StatsOptions(**self.stats)
        self.phantom_dims = tuple(int(v) for v in self.phantom_dims)
        self.phantom_spacing_mm = tuple(float(v) for v in self.phantom_spacing_mm)
        self.modalities = tuple(self.modalities)
        if self.n_with < 0 or self.n_without < 0 or self.n_with + self.n_without == 0:
            raise ValueError("cohort sizes must be non-negative with at least one patient")
        if len(self.phantom_dims) != 3 or min(self.phantom_dims) < 1:
            raise ValueError("phantom_dims must be three positive ints")
        if len(self.phantom_spacing_mm) != 3 or min(self.phantom_spacing_mm) <= 0:
            raise ValueError("phantom_spacing_mm must be three positive values")
        if not set(self.modalities) <= {"CT", "CXR"} or not self.modalities:
            raise ValueError("modalities must be a non-empty subset of CT, CXR")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> TrialConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return dump_json(self.to_dict())


def load_config(path: Path | None, overrides: list[str] = ()) -> TrialConfig:
    """Read a JSON config and apply ``key.sub=value`` overrides (values parsed as JSON)."""
    d = TrialConfig().to_dict() if path is None else _merge(TrialConfig().to_dict(),
                                                             json.loads(Path(path).read_text()))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node and not (len(parts) > 1 and parts[-2] == "overrides"):
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return TrialConfig.from_dict(d)


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "overrides":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    return max(1, int(raw)) if raw else default


# --- manifest -------------------------------------------------------------------

class Manifest:
    """Per-patient stage records plus global artifacts; serialized sorted."""

    def __init__(self, root: Path, data: dict | None = None):
        self.root = Path(root)
        self.data = data or {"config_sha256": None, "stage_params": {}, "patients": {}, "global": {}}

    @classmethod
    def load(cls, root: Path) -> Manifest:
        p = Path(root) / "manifest.json"
        return cls(root, json.loads(p.read_text())) if p.exists() else cls(root)

    def save(self) -> None:
        atomic_write_text(self.root / "manifest.json", dump_json(self.data))

    def record(self, pid: str | None, stage: str, status: str, artifacts=(), reason=None,
               seeds=None) -> dict:
        arts = {}
        for rel in artifacts:
            arts[str(rel)] = sha256_file(self.root / rel)
        rec = {"status": status, "artifacts": arts}
        if reason:
            rec["reason"] = reason
        if seeds:
            rec["seeds"] = seeds
        if pid is None:
            self.data["global"][stage] = rec
        else:
            self.data["patients"].setdefault(pid, {})[stage] = rec
        return rec

    def invalidate(self, pid: str | None, stages) -> None:
        recs = self.data["global"] if pid is None else self.data["patients"].get(pid, {})
        for st in stages:
            recs.pop(st, None)

    def get(self, pid: str | None, stage: str) -> dict | None:
        if pid is None:
            return self.data["global"].get(stage)
        return self.data["patients"].get(pid, {}).get(stage)

    def verified(self, pid: str | None, stage: str) -> bool:
        """Stage finished (complete or a recorded failure) and every digest still matches."""
        rec = self.get(pid, stage)
        if rec is None or rec["status"] not in ("complete", "failed"):
            return False
        for rel, digest in rec["artifacts"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True


# --- stage: cohort ----------------------------------------------------------------

def stage_cohort(cfg: TrialConfig, out: Path, manifest: Manifest) -> list:
    path = out / "cohort.tsv"
    if manifest.verified(None, "cohort"):
        return cohort_mod.read_cohort(path)
    patients = cohort_mod.sample_cohort(cfg.n_with, cfg.n_without, cfg.trial_seed)
    cohort_mod.write_cohort(path, patients)
    manifest.record(None, "cohort", "complete", ["cohort.tsv"], seeds={"trial_seed": cfg.trial_seed})
    for p in patients:
        manifest.record(p.patient_id, "cohort", "complete", seeds={"patient_seed": p.patient_seed})
    manifest.save()
    return patients


def _load_cohort(out: Path, manifest: Manifest) -> list:
    if not manifest.verified(None, "cohort"):
        raise StageError("cohort stage has not completed; run `lungtrial cohort` first")
    return cohort_mod.read_cohort(out / "cohort.tsv")


# --- stage: image -----------------------------------------------------------------

def ct_selection(cfg: TrialConfig, patient) -> tuple[str, int]:
    if cfg.ct.mode == "fixed":
        return cfg.ct.scanner, cfg.ct.configuration_index
    k = int(generator(patient.patient_seed, "ct-configuration").integers(len(CT_CONFIGURATIONS)))
    return CT_CONFIGURATIONS[k]


def _pdir(pid: str) -> Path:
    return Path("patients") / pid


def _image_patient(cfg: TrialConfig, out: Path, patient, modalities, redo: dict):
    """Runs in a worker. Returns a list of (stage, status, artifacts, reason, seeds)."""
    pid = patient.patient_id
    rel = _pdir(pid)
    (out / rel).mkdir(parents=True, exist_ok=True)
    results = []
    ph, skipped = phantom.build_patient_phantom(patient, cfg.phantom_dims, cfg.phantom_spacing_mm)
    if redo["phantom"]:
        header = {
            "patient_id": pid,
            "dims": list(ph.dims),
            "spacing_mm": list(ph.spacing_mm),
            "skipped_lesions": skipped,
            "lesions": [{"lesion_id": l.lesion_id, "center_mm": list(l.center_mm),
                         "center_voxel": list(l.center_voxel), "size_mm": l.size_mm,
                         "kind": l.kind.value} for l in ph.inserted_lesions],
        }
        atomic_write_text(out / rel / "phantom.json", dump_json(header))
        write_raw_volume(out / rel / "lung_mask.u8", ph.lung_mask.astype(np.uint8),
                         {"patient_id": pid, "spacing_mm": list(ph.spacing_mm)}, dtype="uint8")
        arts = [rel / "phantom.json", rel / "lung_mask.u8", rel / "lung_mask.json"]
        results.append(("phantom", "complete", arts, None,
                        {"phantom_seed": derive_seed(patient.patient_seed, "phantom")}))
    table = phantom.MaterialTable()

    if "CT" in modalities and redo["ct"]:
        scanner, index = ct_selection(cfg, patient)
        seed = derive_seed(patient.patient_seed, "ct")
        seeds = {"ct_seed": seed, "scanner": scanner, "configuration_index": index}
        try:
            if cfg.ct.failure_rate > 0 and \
                    generator(patient.patient_seed, "ct-failure").random() < cfg.ct.failure_rate:
                raise ct.ImagingFailure("injected imaging failure")
            vol = ct.scan_ct(ph, scanner, index, seed, table, **cfg.ct.overrides)
            write_raw_volume(out / rel / "ct.f32", vol.data,
                             {"patient_id": pid, "units": "HU", "spacing_mm": list(vol.spacing_mm),
                              "origin_mm": list(vol.origin_mm), "scanner": scanner,
                              "configuration_index": index})
            results.append(("ct", "complete", [rel / "ct.f32", rel / "ct.json"], None, seeds))
        except ct.ImagingFailure as exc:
            log.warning("%s: CT failed (%s); excluded from the CT arm", pid, exc)
            results.append(("ct", "failed", [], str(exc), seeds))

    if "CXR" in modalities and redo["cxr"]:
        seed = derive_seed(patient.patient_seed, "cxr")
        mu = phantom.attenuation_volume(ph, table).astype(np.float64) / 10.0
        rg = cxr.postprocess_radiograph(cxr.project_radiograph(mu, ph.spacing_mm, cfg.cxr, seed))
        mask = cxr.projected_mask(ph.lung_mask, ph.spacing_mm, cfg.cxr)
        hdr = {"patient_id": pid, "spacing_mm": list(rg.spacing_mm), "origin_mm": list(rg.origin_mm)}
        write_raw_volume(out / rel / "cxr_raw.f32", rg.raw, {**hdr, "units": "line integral"})
        write_raw_volume(out / rel / "cxr_display.f32", rg.display,
                         {**hdr, "units": "display [0,1]", "warning": rg.warning})
        write_raw_volume(out / rel / "cxr_mask.u8", mask.astype(np.uint8), hdr, dtype="uint8")
        arts = [rel / f"{n}{ext}" for n in ("cxr_raw", "cxr_display") for ext in (".f32", ".json")]
        arts += [rel / "cxr_mask.u8", rel / "cxr_mask.json"]
        results.append(("cxr", "complete", arts, None, {"cxr_seed": seed}))
    return results


def _run_parallel(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def stage_image(cfg: TrialConfig, out: Path, manifest: Manifest, workers: int = 1,
                modalities=None) -> None:
    patients = _load_cohort(out, manifest)
    modalities = tuple(modalities or cfg.modalities)
    todo = []
    for p in patients:
        redo = {"phantom": not manifest.verified(p.patient_id, "phantom"),
                "ct": "CT" in modalities and not manifest.verified(p.patient_id, "ct"),
                "cxr": "CXR" in modalities and not manifest.verified(p.patient_id, "cxr")}
        if any(redo.values()):
            todo.append((p, redo))
    if not todo:
        return

    def work(item):
        p, redo = item
        return p.patient_id, _image_patient(cfg, out, p, modalities, redo)

    for pid, results in _run_parallel(work, todo, workers):
        for stage, status, arts, reason, seeds in results:
            manifest.record(pid, stage, status, arts, reason, seeds)
            downstream = ["read_ct", "read_cxr"] if stage == "phantom" else [f"read_{stage}"]
            manifest.invalidate(pid, downstream)
    manifest.invalidate(None, ["analyze"])
    manifest.save()


# --- stage: read --------------------------------------------------------------------

def _truths_3d(header: dict) -> list:
    return [reader.Truth(l["lesion_id"], tuple(l["center_mm"]), l["size_mm"], l["kind"])
            for l in header["lesions"]]


def _truths_cxr(header: dict, geometry: cxr.CxrConfig) -> list:
    out = []
    for l in header["lesions"]:
        c = tuple(l["center_mm"])
        out.append(reader.Truth(l["lesion_id"], geometry.project_point(c), l["size_mm"], l["kind"],
                                match_size_mm=l["size_mm"] * geometry.magnification(c[1])))
    return out


def _detections_tsv(case_id: str, modality: str, dets) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(reader.DETECTION_COLUMNS)
    w.writerows(reader.detections_rows(case_id, modality, dets))
    return buf.getvalue()


def _matches_tsv(case_id: str, modality: str, match: reader.MatchResult) -> str:
    buf = _io.StringIO()
    buf.write(f"# hit criterion: {match.criterion['rule']}, radius_rule={match.criterion['radius_rule']!r}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(reader.MATCH_COLUMNS)
    for lesion_id, hit, score in match.lesions:
        w.writerow((lesion_id, case_id, modality, int(hit), repr(float(score))))
    return buf.getvalue()


def _read_patient(cfg: TrialConfig, out: Path, pid: str, modality: str):
    rel = _pdir(pid)
    header = json.loads((out / rel / "phantom.json").read_text())
    if modality == "CT":
        img, h = read_raw_volume(out / rel / "ct.f32")
        mask, _ = read_raw_volume(out / rel / "lung_mask.u8")
        truths = _truths_3d(header)
        rc = cfg.reader_ct
    else:
        img, h = read_raw_volume(out / rel / "cxr_display.f32")
        mask, _ = read_raw_volume(out / rel / "cxr_mask.u8")
        truths = _truths_cxr(header, cfg.cxr)
        rc = cfg.reader_cxr
    dets = reader.detect(img, mask.astype(bool), rc, h["spacing_mm"], h["origin_mm"])
    match = reader.match_to_truth(dets, truths, cfg.stats.radius_rule)
    tag = modality.lower()
    atomic_write_text(out / rel / f"detections_{tag}.tsv", _detections_tsv(pid, modality, dets))
    atomic_write_text(out / rel / f"matches_{tag}.tsv", _matches_tsv(pid, modality, match))
    return [rel / f"detections_{tag}.tsv", rel / f"matches_{tag}.tsv"]


def stage_read(cfg: TrialConfig, out: Path, manifest: Manifest, workers: int = 1) -> None:
    patients = _load_cohort(out, manifest)
    todo = []
    for p in patients:
        pid = p.patient_id
        for mod in cfg.modalities:
            stage = mod.lower()
            if manifest.get(pid, stage) is None or not manifest.verified(pid, "phantom"):
                raise StageError(f"{pid}: image stage missing for {mod}; run `lungtrial image` first")
            if manifest.get(pid, stage)["status"] == "failed":
                continue
            if not manifest.verified(pid, stage):
                raise StageError(f"{pid}: {mod} image artifacts fail digest check; rerun `lungtrial image`")
            if not manifest.verified(pid, f"read_{stage}"):
                todo.append((pid, mod))
    if not todo:
        return
    results = _run_parallel(lambda t: (t, _read_patient(cfg, out, *t)), todo, workers)
    for (pid, mod), arts in results:
        manifest.record(pid, f"read_{mod.lower()}", "complete", arts)
    manifest.invalidate(None, ["analyze"])
    manifest.save()


# --- stage: analyze ---------------------------------------------------------------------

def _load_readings(cfg: TrialConfig, out: Path, manifest: Manifest, patients) -> dict:
    readings = {m: [] for m in cfg.modalities}
    for p in patients:
        pid = p.patient_id
        header = None
        for mod in cfg.modalities:
            tag = mod.lower()
            rec = manifest.get(pid, tag)
            if rec is not None and rec["status"] == "failed":
                continue
            if not manifest.verified(pid, f"read_{tag}"):
                raise StageError(f"{pid}: read stage missing for {mod}; run `lungtrial read` first")
            if header is None:
                header = json.loads((out / _pdir(pid) / "phantom.json").read_text())
            truths = _truths_3d(header) if mod == "CT" else _truths_cxr(header, cfg.cxr)
            rows = list(csv.DictReader((out / _pdir(pid) / f"detections_{tag}.tsv").open(),
                                       delimiter="\t"))
            dets = [reader.detection_from_row(r) for r in rows]
            match = reader.match_to_truth(dets, truths, cfg.stats.radius_rule)
            readings[mod].append(reader.CaseReading(pid, mod, bool(truths), truths, dets, match))
    return readings


def build_samples(cfg: TrialConfig, readings: dict):
    lesion, patient = [], []
    for mod in cfg.modalities:
        lesion += reader.lesion_level_samples(readings[mod], cfg.stats.top_k_false_positives,
                                              cfg.stats.size_threshold_mm)
        patient += reader.patient_level_samples(readings[mod])
    return lesion, patient


def analyze_samples(cfg: TrialConfig, samples, out: Path) -> list[str]:
    """Report and ROC tables from sample records; usable without earlier stages."""
    rows = stats.subgroup_report(samples, cfg.stats.ci_method, cfg.stats.n_boot, cfg.stats.alpha,
                                 derive_seed(cfg.trial_seed, "statistics"))
    atomic_write_text(out / "report.tsv", stats.report_to_tsv(rows, cfg.stats.ci_method))
    atomic_write_text(out / "roc_points.tsv", stats.roc_points_tsv(samples))
    return ["report.tsv", "roc_points.tsv"]


def stage_analyze(cfg: TrialConfig, out: Path, manifest: Manifest) -> None:
    if manifest.verified(None, "analyze"):
        return
    patients = _load_cohort(out, manifest)
    readings = _load_readings(cfg, out, manifest, patients)
    lesion, patient = build_samples(cfg, readings)
    atomic_write_text(out / "samples_lesion.tsv", stats.samples_to_tsv(lesion))
    atomic_write_text(out / "samples_patient.tsv", stats.samples_to_tsv(patient))
    arts = ["samples_lesion.tsv", "samples_patient.tsv"] + analyze_samples(cfg, lesion + patient, out)
    manifest.record(None, "analyze", "complete", arts)
    manifest.save()


# --- whole trial --------------------------------------------------------------------

# config keys each stage group depends on (dotted paths into TrialConfig.to_dict())
STAGE_KEYS = {
    "cohort": ("trial_seed", "n_with", "n_without"),
    "image": ("phantom_dims", "phantom_spacing_mm", "ct", "cxr", "modalities"),
    "read": ("reader_ct", "reader_cxr", "stats.radius_rule"),
    "analyze": ("stats",),
}
STAGE_ORDER = ("cohort", "image", "read", "analyze")
_PATIENT_STAGES = {"cohort": ("cohort",), "image": ("phantom", "ct", "cxr"),
                   "read": ("read_ct", "read_cxr"), "analyze": ()}


def stage_digests(cfg: TrialConfig) -> dict:
    """Cumulative parameter digest per stage group: a change upstream changes every later digest."""
    d = cfg.to_dict()
    acc, out = [], {}
    for stage in STAGE_ORDER:
        for key in STAGE_KEYS[stage]:
            node = d
            for part in key.split("."):
                node = node[part]
            acc.append((key, node))
        out[stage] = hashlib.sha256(json.dumps(acc, sort_keys=True).encode()).hexdigest()
    return out


def open_run(cfg: TrialConfig, out: Path) -> Manifest:
    """Prepare ``out`` for ``cfg``, dropping records of stages whose parameters changed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load(out)
    new = stage_digests(cfg)
    old = manifest.data.get("stage_params", {})
    for stage in STAGE_ORDER:
        if old.get(stage) != new[stage]:
            manifest.invalidate(None, [stage])
            for pid in manifest.data["patients"]:
                manifest.invalidate(pid, _PATIENT_STAGES[stage])
    manifest.data["stage_params"] = new
    atomic_write_text(out / "config.json", cfg.canonical_json())
    manifest.data["config_sha256"] = sha256_file(out / "config.json")
    manifest.save()
    return manifest


def run_trial(cfg: TrialConfig, out: Path, workers: int | None = None) -> Manifest:
    workers = worker_count() if workers is None else workers
    out = Path(out)
    manifest = open_run(cfg, out)
    stage_cohort(cfg, out, manifest)
    stage_image(cfg, out, manifest, workers)
    stage_read(cfg, out, manifest, workers)
    stage_analyze(cfg, out, manifest)
    return manifest


def read_report(out: Path) -> list[dict]:
    return list(csv.DictReader((Path(out) / "report.tsv").open(), delimiter="\t"))
