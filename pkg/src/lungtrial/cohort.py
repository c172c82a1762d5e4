"""Virtual patient population.

Demographic marginals are calibrated to the trial cohort table (age, sex,
weight, BMI, race, ethnicity); lesion counts, sizes and kinds are calibrated to
the reported lesion summary (512 lesions over 174 patients, size quartiles
6/9/12 mm within [4, 34] mm, 202 homogeneous).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cache
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .rng import derive_seed, generator


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"


class Race(str, Enum):
    WHITE = "white"
    BLACK = "black"
    OTHER = "other"


class Ethnicity(str, Enum):
    NOT_HISPANIC = "not_hispanic"
    HISPANIC_OR_UNKNOWN = "hispanic_or_unknown"


class LesionKind(str, Enum):
    HOMOGENEOUS = "homogeneous"
    HETEROGENEOUS = "heterogeneous"


# (mean, std, lo, hi)
AGE = (59.52, 14.44, 18.0, 100.0)
WEIGHT = (78.33, 20.31, 17.0, 148.0)
BMI = (27.17, 5.99, 13.0, 50.49)
P_MALE = 0.5568
RACE_P = {Race.WHITE: 0.75, Race.BLACK: 0.2121, Race.OTHER: 0.0379}
ETHNICITY_P = {Ethnicity.NOT_HISPANIC: 0.9848, Ethnicity.HISPANIC_OR_UNKNOWN: 0.0152}

LESION_TOTAL, LESION_PATIENTS = 512, 174
P_HOMOGENEOUS = 202 / 512
SIZE_MIN_MM, SIZE_MAX_MM = 4.0, 34.0
SIZE_QUARTILES_MM = (6.0, 9.0, 12.0)


@dataclass(frozen=True)
class Demographics:
    age: float
    sex: Sex
    weight: float
    bmi: float
    race: Race
    ethnicity: Ethnicity

    def __post_init__(self):
        if not AGE[2] <= self.age <= AGE[3]:
            raise ValueError(f"age {self.age} outside [{AGE[2]}, {AGE[3]}]")
        if not WEIGHT[2] <= self.weight <= WEIGHT[3]:
            raise ValueError(f"weight {self.weight} outside [{WEIGHT[2]}, {WEIGHT[3]}]")
        if not BMI[2] <= self.bmi <= BMI[3]:
            raise ValueError(f"bmi {self.bmi} outside [{BMI[2]}, {BMI[3]}]")


@dataclass(frozen=True)
class LesionSpec:
    lesion_id: str
    size_mm: float
    kind: LesionKind
    placement_seed: int

    def __post_init__(self):
        if not SIZE_MIN_MM <= self.size_mm <= SIZE_MAX_MM:
            raise ValueError(f"lesion size {self.size_mm} mm outside [4, 34]")
        object.__setattr__(self, "kind", LesionKind(self.kind))


@dataclass(frozen=True)
class VirtualPatient:
    patient_id: str
    demographics: Demographics
    lesions: tuple[LesionSpec, ...] = field(default_factory=tuple)
    patient_seed: int = 0

    @property
    def has_nodule(self) -> bool:
        return len(self.lesions) > 0


# --- calibrated distributions ----------------------------------------------

def _truncnorm(rng: np.random.Generator, mean, std, lo, hi) -> float:
    a, b = (lo - mean) / std, (hi - mean) / std
    return float(stats.truncnorm.ppf(rng.random(), a, b, loc=mean, scale=std))


@cache
def lesion_count_rate() -> float:
    """Poisson rate whose zero-truncated mean equals 512/174."""
    target = LESION_TOTAL / LESION_PATIENTS
    return optimize.brentq(lambda lam: lam / -math.expm1(-lam) - target, 1e-6, 20.0)


def _truncated_lognorm_ppf(q, mu, sigma, lo=SIZE_MIN_MM, hi=SIZE_MAX_MM):
    dist = stats.lognorm(s=sigma, scale=math.exp(mu))
    clo, chi = dist.cdf(lo), dist.cdf(hi)
    return dist.ppf(clo + np.asarray(q) * (chi - clo))


@cache
def lesion_size_params() -> tuple[float, float]:
    """(mu, sigma) of the log-normal, before truncation to [4, 34] mm.

    Nested 1-D root finding: for a given sigma, mu puts the truncated median
    at 9 mm; sigma is then chosen so the truncated IQR equals 12 - 6 mm.
    """
    q1, q2, q3 = SIZE_QUARTILES_MM

    def mu_for(sigma):
        return optimize.brentq(
            lambda mu: _truncated_lognorm_ppf(0.5, mu, sigma) - q2, -1.0, 6.0)

    def iqr_gap(sigma):
        mu = mu_for(sigma)
        lo, hi = _truncated_lognorm_ppf([0.25, 0.75], mu, sigma)
        return (hi - lo) - (q3 - q1)

    sigma = optimize.brentq(iqr_gap, 0.05, 1.2)
    return mu_for(sigma), sigma


def sample_lesion_size(rng: np.random.Generator) -> float:
    mu, sigma = lesion_size_params()
    return float(_truncated_lognorm_ppf(rng.random(), mu, sigma))


def _zero_truncated_poisson(rng: np.random.Generator, lam: float) -> int:
    while True:
        k = int(rng.poisson(lam))
        if k >= 1:
            return k


def _categorical(rng: np.random.Generator, probs: dict):
    keys = list(probs)
    p = np.array([probs[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


# --- operations -------------------------------------------------------------

def sample_demographics(patient_seed: int) -> Demographics:
    rng = generator(patient_seed, "demographics")
    age = _truncnorm(rng, *AGE)
    sex = Sex.MALE if rng.random() < P_MALE else Sex.FEMALE
    weight = _truncnorm(rng, *WEIGHT)
    bmi = _truncnorm(rng, *BMI)
    race = _categorical(rng, RACE_P)
    ethnicity = _categorical(rng, ETHNICITY_P)
    return Demographics(round(age, 2), sex, round(weight, 2), round(bmi, 2), race, ethnicity)


def sample_lesion_specs(patient_seed: int, patient_id: str = "P") -> list[LesionSpec]:
    """Nodule prescriptions for one with-nodule patient (at least one)."""
    rng = generator(patient_seed, "lesions")
    n = _zero_truncated_poisson(rng, lesion_count_rate())
    specs = []
    for i in range(n):
        size = round(sample_lesion_size(rng), 2)
        kind = LesionKind.HOMOGENEOUS if rng.random() < P_HOMOGENEOUS else LesionKind.HETEROGENEOUS
        specs.append(LesionSpec(f"{patient_id}-L{i + 1}", size, kind,
                                derive_seed(patient_seed, "placement", i)))
    return specs


def patient_id_for(index: int) -> str:
    return f"P{index + 1:04d}"


def make_patient(trial_seed: int, index: int, with_nodule: bool) -> VirtualPatient:
    """Patient ``index``; depends only on (trial_seed, index, arm)."""
    pid = patient_id_for(index)
    pseed = derive_seed(trial_seed, "patient", index)
    lesions = tuple(sample_lesion_specs(pseed, pid)) if with_nodule else ()
    return VirtualPatient(pid, sample_demographics(pseed), lesions, pseed)


def sample_cohort(n_with_nodule: int, n_without_nodule: int, trial_seed: int) -> list[VirtualPatient]:
    """The with-nodule arm occupies indices ``0..n_with-1``, the nodule-free arm follows."""
    if n_with_nodule < 0 or n_without_nodule < 0:
        raise ValueError("cohort sizes must be non-negative")
    return [make_patient(trial_seed, k, k < n_with_nodule)
            for k in range(n_with_nodule + n_without_nodule)]


# --- manifest ---------------------------------------------------------------

MANIFEST_COLUMNS = ("patient_id", "patient_seed", "age", "sex", "weight", "bmi",
                    "race", "ethnicity", "n_lesions", "lesions")


def _lesion_field(specs) -> str:
    return ";".join(f"{s.lesion_id}:{s.size_mm!r}:{s.kind.value}:{s.placement_seed}" for s in specs)


def cohort_to_tsv(patients: list[VirtualPatient]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for p in patients:
        d = p.demographics
        w.writerow([p.patient_id, p.patient_seed, repr(d.age), d.sex.value, repr(d.weight),
                    repr(d.bmi), d.race.value, d.ethnicity.value, len(p.lesions),
                    _lesion_field(p.lesions)])
    return buf.getvalue()


def cohort_from_tsv(text: str) -> list[VirtualPatient]:
    rows = list(csv.DictReader(io.StringIO(text), delimiter="\t"))
    if rows and tuple(rows[0].keys()) != MANIFEST_COLUMNS:
        raise ValueError("unexpected cohort manifest header")
    patients = []
    for r in rows:
        lesions = []
        if r["lesions"]:
            for item in r["lesions"].split(";"):
                lid, size, kind, pseed = item.split(":")
                lesions.append(LesionSpec(lid, float(size), LesionKind(kind), int(pseed)))
        demo = Demographics(float(r["age"]), Sex(r["sex"]), float(r["weight"]), float(r["bmi"]),
                            Race(r["race"]), Ethnicity(r["ethnicity"]))
        patients.append(VirtualPatient(r["patient_id"], demo, tuple(lesions), int(r["patient_seed"])))
    return patients


def write_cohort(path: Path, patients: list[VirtualPatient]) -> None:
    Path(path).write_text(cohort_to_tsv(patients))


def read_cohort(path: Path) -> list[VirtualPatient]:
    return cohort_from_tsv(Path(path).read_text())
