"""Deterministic synthetic stand-ins for the pretraining and downstream data.

The pretraining generator reproduces population marginals (male fraction by
quota, age quartiles by a two-piece triangular distribution that matches
Q1/median/Q3 by construction) and couples comorbidity onset to age so the
regression target is learnable from demographics.

Downstream generators draw binary labels from a logistic model whose
log-odds mix a standardized demographic score (weight = demographic_signal)
with a standardized noise-feature score (weight = 1 - demographic_signal).
The osteoporosis- and thyroid-style profiles are balanced by construction
and emitted positives-first, mirroring the label-blocked file layout of
their public source datasets; the pneumonia-style profile emits multiple
jittered rows per patient with missing cells, exercising aggregation and
imputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .cci import default_cci_table, compute_cci
from .data import CohortStats, TabularDataset, VisitRecord, cohort_stats_from_dataset, cohort_stats_from_visits
from .errors import ConfigError

MAX_AGE = 130
_SQRT_HALF = math.sqrt(0.5)

# (representative code, base prevalence, age midpoint, age scale,
#  male multiplier) -- prevalence at exact age a for gender g is
#  base * sigmoid((a - mid)/scale) * (male_mult if g else 2 - male_mult).
# Gender effects are deliberately pronounced so the pretraining target
# keeps the gender bit informative, not just age. Several conditions have
# sharp age-of-onset profiles (small scales), so burden rises steeply
# inside single years of age rather than only across decades.
_CONDITIONS = [
    ("410.0", 0.18, 62, 3, 1.60),    # myocardial infarction
    ("428.0", 0.16, 68, 10, 1.20),   # heart failure
    ("440.0", 0.11, 66, 2, 1.45),    # peripheral vascular
    ("433.1", 0.13, 70, 9, 1.10),    # cerebrovascular
    ("290.0", 0.09, 78, 3, 0.60),    # dementia
    ("491.2", 0.18, 58, 12, 1.40),   # chronic pulmonary
    ("714.0", 0.07, 52, 4, 0.35),    # rheumatic
    ("531.3", 0.09, 55, 15, 1.25),   # peptic ulcer
    ("571.5", 0.07, 54, 3, 1.70),    # mild liver
    ("250.0", 0.22, 55, 12, 1.05),   # diabetes
    ("250.4", 0.07, 62, 10, 1.05),   # diabetes w/ complications
    ("342.9", 0.03, 68, 9, 1.10),    # hemiplegia
    ("585.0", 0.07, 66, 3, 1.25),    # renal
    ("162.9", 0.09, 64, 10, 1.15),   # malignancy
    ("572.2", 0.02, 60, 10, 1.75),   # severe liver
    ("197.0", 0.03, 68, 8, 1.05),    # metastatic
    ("042.0", 0.015, 40, 12, 3.00),  # hiv
]

_NOISE_CODES = ["780.6", "784.0", "719.4", "729.5", "786.5", "789.0",
                "V70.0", "V72.3", "724.2", "477.9"]


@dataclass
class CohortSpec:
    n_patients: int = 2000
    male_fraction: float = 0.4428
    age_q1: float = 18.0
    age_median: float = 40.0
    age_q3: float = 58.0
    visits_mean: float = 12.0
    visits_max: int = 240
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 0.0 <= self.male_fraction <= 1.0:
            raise ConfigError("male_fraction must lie in [0, 1]")
        if not self.age_q1 <= self.age_median <= self.age_q3:
            raise ConfigError("age quartiles must satisfy q1 <= median <= q3")
        if self.age_q1 < 0 or self.age_q3 > MAX_AGE:
            raise ConfigError(f"age quartiles must lie in [0, {MAX_AGE}]")
        if self.visits_mean < 1:
            raise ConfigError("visits_mean must be >= 1")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def _triangular_bounds(q1: float, med: float, q3: float) -> tuple[float, float]:
    """Support endpoints of the two-piece triangular hitting the quartiles."""
    lo = (q1 - _SQRT_HALF * med) / (1.0 - _SQRT_HALF) if med > q1 else q1
    hi = (q3 - _SQRT_HALF * med) / (1.0 - _SQRT_HALF) if q3 > med else q3
    return lo, hi


def _sample_ages(rng: np.random.Generator, n: int, q1: float, med: float, q3: float) -> np.ndarray:
    """Two-piece triangular draws; clamping to [0, MAX_AGE] piles boundary
    mass at the ends without moving the inner quartiles."""
    lo, hi = _triangular_bounds(q1, med, q3)
    u = rng.random(n)
    left = u < 0.5
    ages = np.empty(n)
    ages[left] = lo + (med - lo) * np.sqrt(2.0 * u[left])
    ages[~left] = hi - (hi - med) * np.sqrt(2.0 * (1.0 - u[~left]))
    return np.clip(ages, 0, MAX_AGE)


def _quota_genders(rng: np.random.Generator, n: int, male_fraction: float) -> np.ndarray:
    """Exact male head-count (rounded), randomly placed."""
    n_male = int(round(n * male_fraction))
    genders = np.zeros(n, dtype=int)
    genders[:n_male] = 1
    rng.shuffle(genders)
    return genders


_ADVANCE_PROB = 0.35
_ADVANCE_STEP = 0.5


def gen_pretrain_cohort(spec: CohortSpec) -> tuple[list[VisitRecord], CohortStats]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # Visit ages creep upward over a patient's record; shift the base-age
    # draw by the expected row-weighted drift so the realized visit-age
    # quartiles land on the spec targets.
    lam = max(spec.visits_mean - 1.0, 0.0)
    drift = _ADVANCE_PROB * _ADVANCE_STEP * lam * (2.0 + lam) / (2.0 * (1.0 + lam))
    base_ages = _sample_ages(rng, spec.n_patients,
                             max(spec.age_q1 - drift, 0.0),
                             max(spec.age_median - drift, 0.0),
                             max(spec.age_q3 - drift, 0.0))
    genders = _quota_genders(rng, spec.n_patients, spec.male_fraction)

    table = default_cci_table()
    keyed: list[tuple[float, VisitRecord]] = []
    for p in range(spec.n_patients):
        pid = f"p{p:06d}"
        g = int(genders[p])
        n_visits = int(min(1 + rng.poisson(max(spec.visits_mean - 1, 0.0)), spec.visits_max))
        # One latent uniform per condition: the condition switches on at the
        # exact age where its rising prevalence crosses the latent, so
        # comorbidity burden is non-decreasing over a patient's visits.
        latents = rng.random(len(_CONDITIONS))
        age = float(base_ages[p])
        for _ in range(n_visits):
            age_int = int(min(round(age), MAX_AGE))
            codes: list[str] = []
            for c, (code, base, mid, scale, male_mult) in enumerate(_CONDITIONS):
                gender_mult = male_mult if g == 1 else 2.0 - male_mult
                prevalence = base * gender_mult * float(_sigmoid((age - mid) / scale))
                if latents[c] < prevalence:
                    codes.append(code)
            n_noise = int(rng.integers(1, 4))
            codes.extend(rng.choice(_NOISE_CODES, size=n_noise, replace=False).tolist())
            keyed.append((age, VisitRecord(pid, age_int, g, tuple(codes))))
            # multiple rows per year: the visit age advances only sometimes
            age = min(age + (_ADVANCE_STEP if rng.random() < _ADVANCE_PROB else 0.0), MAX_AGE)
    # Emit the extract sorted by exact age, the order the claims table was
    # pulled in; a stable integer-age sort downstream preserves it.
    keyed.sort(key=lambda pair: pair[0])
    records = [rec for _, rec in keyed]
    scores = [compute_cci(list(rec.dx_codes), table) for rec in records]
    stats = cohort_stats_from_visits(records, scores)
    return records, stats


_PROFILES = {
    "pneumonia_like": dict(n=585, n_noise_features=50, demographic_signal=0.1,
                           age_q1=51, age_median=62, age_q3=72, male_fraction=0.5915,
                           outcome_fraction=0.4479, missing_rate=0.10,
                           max_rows_per_patient=3, label_sorted=False, effect_scale=3.5),
    "osteoporosis_like": dict(n=1958, n_noise_features=11, demographic_signal=0.9,
                              age_q1=21, age_median=32, age_q3=53, male_fraction=0.5066,
                              outcome_fraction=0.50, missing_rate=0.0,
                              max_rows_per_patient=1, label_sorted=True, effect_scale=4.0,
                              age_band=5.0),
    "thyroid_like": dict(n=450, n_noise_features=20, demographic_signal=0.5,
                         age_q1=46, age_median=60, age_q3=72, male_fraction=0.3756,
                         outcome_fraction=0.50, missing_rate=0.0,
                         max_rows_per_patient=1, label_sorted=True, effect_scale=3.0,
                         age_band=2.0),
}


@dataclass
class DownstreamSpec:
    profile: str = "osteoporosis_like"
    n: int = 1958
    n_noise_features: int = 11
    demographic_signal: float = 0.9
    age_q1: float = 21.0
    age_median: float = 32.0
    age_q3: float = 53.0
    male_fraction: float = 0.5066
    outcome_fraction: float = 0.50
    missing_rate: float = 0.0
    max_rows_per_patient: int = 1
    label_sorted: bool = True
    effect_scale: float = 4.0
    age_band: float = 1.0   # granularity the age column is recorded at
    seed: int = 0

    def validate(self) -> None:
        if self.profile not in _PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.n < 50:
            raise ConfigError("downstream datasets need n >= 50")
        if not 0.0 <= self.demographic_signal <= 1.0:
            raise ConfigError("demographic_signal must lie in [0, 1]")
        if not 0.0 < self.outcome_fraction < 1.0:
            raise ConfigError("outcome_fraction must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if not self.age_q1 <= self.age_median <= self.age_q3:
            raise ConfigError("age quartiles must satisfy q1 <= median <= q3")
        if self.max_rows_per_patient < 1:
            raise ConfigError("max_rows_per_patient must be >= 1")
        if self.age_band <= 0:
            raise ConfigError("age_band must be positive")


def profile_spec(profile: str, seed: int = 0, **overrides) -> DownstreamSpec:
    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    kwargs = dict(_PROFILES[profile])
    kwargs.update(overrides)
    return DownstreamSpec(profile=profile, seed=seed, **kwargs)


def _demographic_score(profile: str, ages: np.ndarray, genders: np.ndarray) -> np.ndarray:
    """Label-model demographic term, evaluated on exact (unrounded) ages.

    The emitted age column is rounded to whole years, so the steep
    osteoporosis threshold leaves label-relevant age variation inside each
    age-year tie group, where only the row ordering can resolve it."""
    if profile == "osteoporosis_like":
        score = np.tanh((ages - 45.0) / 2.5) + 0.1 * (2.0 * genders - 1.0)
    elif profile == "thyroid_like":
        score = 0.6 * np.tanh((ages - 58.0) / 4.0) + 0.8 * (1.0 - 2.0 * genders)
    else:  # pneumonia_like
        score = np.tanh((ages - 65.0) / 9.0) + 0.3 * (2.0 * genders - 1.0)
    return score


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def _calibrate_intercept(logits: np.ndarray, target: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = (lo + hi) / 2.0
        if _sigmoid(logits + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def gen_downstream(spec: DownstreamSpec) -> tuple[TabularDataset, CohortStats]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # Candidate pool large enough to fill both label blocks of a balanced draw.
    pool = spec.n if not spec.label_sorted else 4 * spec.n
    ages_exact = _sample_ages(rng, pool, spec.age_q1, spec.age_median, spec.age_q3)
    ages = spec.age_band * np.round(ages_exact / spec.age_band)
    genders = _quota_genders(rng, pool, spec.male_fraction)
    noise = rng.standard_normal((pool, spec.n_noise_features))
    noise_w = rng.standard_normal(spec.n_noise_features)
    noise_w /= np.linalg.norm(noise_w)

    z_demo = _standardize(_demographic_score(spec.profile, ages_exact, genders))
    z_noise = _standardize(noise @ noise_w)
    logits = spec.effect_scale * (spec.demographic_signal * z_demo
                                  + (1.0 - spec.demographic_signal) * z_noise)
    intercept = _calibrate_intercept(logits, spec.outcome_fraction)
    labels = (rng.random(pool) < _sigmoid(logits + intercept)).astype(int)

    if spec.label_sorted:
        half = spec.n // 2
        pos_idx = np.where(labels == 1)[0][:half]
        neg_idx = np.where(labels == 0)[0][:spec.n - half]
        if pos_idx.size < half or neg_idx.size < spec.n - half:
            raise ConfigError("candidate pool too small to balance labels; raise n or adjust spec")
        keep = np.concatenate([pos_idx, neg_idx])  # positives-first file order
    else:
        keep = np.arange(spec.n)

    ages = ages[keep]
    genders = genders[keep]
    noise = noise[keep]
    labels = labels[keep]

    feature_names = ["age", "gender"] + [f"feat_{j:02d}" for j in range(spec.n_noise_features)]
    rows: list[np.ndarray] = []
    out_labels: list[int] = []
    pids: list[str] = []
    for i in range(spec.n):
        n_rows = int(rng.integers(1, spec.max_rows_per_patient + 1))
        for _ in range(n_rows):
            jitter = rng.standard_normal(spec.n_noise_features) * 0.2 if n_rows > 1 else 0.0
            rows.append(np.concatenate([[ages[i], genders[i]], noise[i] + jitter]))
            out_labels.append(int(labels[i]))
            pids.append(f"d{i:06d}")
    matrix = np.array(rows, dtype=float)

    if spec.missing_rate > 0:
        # only noise-feature cells go missing; demographics stay complete
        mask = rng.random((matrix.shape[0], spec.n_noise_features)) < spec.missing_rate
        block = matrix[:, 2:]
        block[mask] = np.nan
        matrix[:, 2:] = block

    dataset = TabularDataset(feature_names, matrix, np.array(out_labels), pids)
    # Table-style stats describe patients, not pre-aggregation rows.
    first_rows = sorted({pid: i for i, pid in reversed(list(enumerate(pids)))}.values())
    per_patient = TabularDataset(feature_names, matrix[first_rows],
                                 dataset.labels[first_rows],
                                 [pids[i] for i in first_rows])
    stats = cohort_stats_from_dataset(per_patient)
    return dataset, stats


def signal_sweep_specs(profile: str, seed: int, signals=(0.0, 0.25, 0.5, 0.75, 0.9),
                       **overrides) -> list[DownstreamSpec]:
    """Same profile at increasing demographic signal, for monotonicity checks."""
    base = profile_spec(profile, seed=seed, **overrides)
    return [replace(base, demographic_signal=s) for s in signals]
