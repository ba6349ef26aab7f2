"""Dataset schemas, CSV ingestion, per-patient aggregation, and imputation.

Two documented CSV layouts, both UTF-8, comma-delimited, header required:

* visits:  ``patient_id,age,gender,dx_codes`` with diagnosis codes
  semicolon-separated. Rows missing age, gender, or diagnosis info are
  dropped and counted; rejects land in a ``<input>.rejects.csv`` sidecar.
* tabular: ``patient_id,<feature...>,label`` where features conventionally
  start with ``age,gender``. Missing cells are empty strings.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError
from .gbdt import BaggedTreeRegressor

MAX_AGE = 130


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    age: int
    gender: int  # 0 = female, 1 = male
    dx_codes: tuple[str, ...]


@dataclass
class TabularDataset:
    feature_names: list[str]
    rows: np.ndarray          # (n, d) float, NaN = missing
    labels: np.ndarray        # (n,) int in {0, 1}
    patient_ids: list[str]

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        n, d = self.rows.shape
        if d != len(self.feature_names):
            raise DataError("row width does not match feature_names")
        if n != self.labels.size or n != len(self.patient_ids):
            raise DataError("rows, labels, and patient_ids must align")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be binary {0,1}")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.feature_names.index(name)]

    def has_missing(self) -> bool:
        return bool(np.isnan(self.rows).any())


@dataclass(frozen=True)
class CohortStats:
    n: int
    age_median: float
    age_q1: float
    age_q3: float
    male_fraction: float
    outcome_fraction: float

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "age_median": self.age_median,
            "age_q1": self.age_q1,
            "age_q3": self.age_q3,
            "male_fraction": self.male_fraction,
            "outcome_fraction": self.outcome_fraction,
        }


@dataclass
class VisitLoadResult:
    records: list[VisitRecord]
    n_rows: int
    n_rejected: int
    rejects_path: Path | None
    reject_reasons: list[str] = field(default_factory=list)


def load_visits_csv(path: str | Path, write_rejects: bool = True) -> VisitLoadResult:
    """Parse a visits CSV, dropping and counting rows with missing fields."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"visits file not found: {path}")
    records: list[VisitRecord] = []
    rejects: list[tuple[int, str, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        if [h.strip() for h in header] != ["patient_id", "age", "gender", "dx_codes"]:
            raise SchemaError(f"{path}: header must be patient_id,age,gender,dx_codes")
        n_rows = 0
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            n_rows += 1
            if len(row) != 4:
                rejects.append((line_no, "wrong field count", ",".join(row)))
                continue
            pid, age_s, gender_s, dx_s = (c.strip() for c in row)
            if not pid:
                rejects.append((line_no, "empty patient_id", ",".join(row)))
                continue
            if not age_s or not gender_s or not dx_s:
                rejects.append((line_no, "missing age, gender, or diagnosis field", ",".join(row)))
                continue
            try:
                age = int(age_s)
            except ValueError:
                rejects.append((line_no, f"unparseable age {age_s!r}", ",".join(row)))
                continue
            if age < 0 or age > MAX_AGE:
                rejects.append((line_no, f"age {age} outside [0, {MAX_AGE}]", ",".join(row)))
                continue
            if gender_s not in ("0", "1"):
                rejects.append((line_no, f"gender {gender_s!r} not in {{0,1}}", ",".join(row)))
                continue
            codes = tuple(c.strip() for c in dx_s.split(";") if c.strip())
            if not codes:
                rejects.append((line_no, "no diagnosis codes", ",".join(row)))
                continue
            records.append(VisitRecord(pid, age, int(gender_s), codes))
    rejects_path = None
    if write_rejects and rejects:
        rejects_path = path.with_suffix(path.suffix + ".rejects.csv")
        with rejects_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["line", "reason", "raw"])
            writer.writerows(rejects)
    return VisitLoadResult(records, n_rows, len(rejects), rejects_path,
                           [r[1] for r in rejects])


def save_visits_csv(records: list[VisitRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "age", "gender", "dx_codes"])
        for r in records:
            writer.writerow([r.patient_id, r.age, r.gender, ";".join(r.dx_codes)])


def load_tabular_csv(path: str | Path) -> TabularDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "patient_id" or header[-1] != "label":
            raise SchemaError(f"{path}: header must be patient_id,<features...>,label")
        feature_names = header[1:-1]
        ids: list[str] = []
        values: list[list[float]] = []
        labels: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0].strip())
            cells = []
            for name, cell in zip(feature_names, row[1:-1]):
                cell = cell.strip()
                if not cell:
                    cells.append(float("nan"))
                    continue
                try:
                    cells.append(float(cell))
                except ValueError:
                    raise SchemaError(f"{path}:{line_no}: non-numeric cell {cell!r} in {name}") from None
            values.append(cells)
            label_s = row[-1].strip()
            if label_s not in ("0", "1"):
                raise SchemaError(f"{path}:{line_no}: label {label_s!r} not in {{0,1}}")
            labels.append(int(label_s))
    if not ids:
        raise DataError(f"{path}: no data rows")
    return TabularDataset(feature_names, np.array(values, dtype=float),
                          np.array(labels), ids)


def save_tabular_csv(dataset: TabularDataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + dataset.feature_names + ["label"])
        for i in range(dataset.n_rows):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in dataset.rows[i]]
            writer.writerow([dataset.patient_ids[i]] + cells + [int(dataset.labels[i])])


def aggregate_median(dataset: TabularDataset) -> TabularDataset:
    """Collapse to one row per patient: per-column medians of non-missing
    values, majority label with ties going positive. Patients keep their
    first-appearance order."""
    if dataset.n_rows < 1:
        raise DataError("cannot aggregate an empty dataset")
    order: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, pid in enumerate(dataset.patient_ids):
        if pid not in groups:
            groups[pid] = []
            order.append(pid)
        groups[pid].append(i)
    rows = np.empty((len(order), len(dataset.feature_names)))
    labels = np.empty(len(order), dtype=int)
    for out_i, pid in enumerate(order):
        idx = groups[pid]
        sub = dataset.rows[idx]
        with warnings.catch_warnings():
            # a cell stays missing only when every input for it is missing
            warnings.simplefilter("ignore", RuntimeWarning)
            rows[out_i] = np.nanmedian(sub, axis=0)
        pos = int(dataset.labels[idx].sum())
        labels[out_i] = 1 if 2 * pos >= len(idx) else 0
    return TabularDataset(list(dataset.feature_names), rows, labels, order)


def _derive_seed(seed: int, *parts) -> int:
    text = "/".join([str(seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def impute_iterative(dataset: TabularDataset, rounds: int = 10, seed: int = 0) -> TabularDataset:
    """Fill missing cells with round-robin bagged-tree regression.

    Columns are visited in ascending missingness; the initial fill is the
    column mean; a fixed number of rounds is run with no convergence test.
    Observed cells are never altered.
    """
    x = dataset.rows.copy()
    n, d = x.shape
    if d < 2:
        raise DataError("imputation needs at least 2 columns")
    missing = np.isnan(x)
    for j in range(d):
        if missing[:, j].all():
            raise DataError(f"column {dataset.feature_names[j]!r} has no observed values; cannot impute")
    if not missing.any():
        return dataset

    col_order = sorted(range(d), key=lambda j: (missing[:, j].sum(), j))
    means = np.nanmean(dataset.rows, axis=0)
    for j in range(d):
        x[missing[:, j], j] = means[j]

    other = {j: [k for k in range(d) if k != j] for j in range(d)}
    for r in range(rounds):
        for j in col_order:
            miss_j = missing[:, j]
            if not miss_j.any():
                continue
            obs = ~miss_j
            reg = BaggedTreeRegressor(n_trees=20, subsample=0.8,
                                      seed=_derive_seed(seed, r, j))
            reg.fit(x[obs][:, other[j]], x[obs, j])
            x[miss_j, j] = reg.predict(x[miss_j][:, other[j]])

    return TabularDataset(list(dataset.feature_names), x, dataset.labels.copy(),
                          list(dataset.patient_ids))


def cohort_stats_from_dataset(dataset: TabularDataset,
                              age_col: str = "age",
                              gender_col: str = "gender") -> CohortStats:
    ages = dataset.column(age_col)
    ages = ages[~np.isnan(ages)]
    genders = dataset.column(gender_col)
    genders = genders[~np.isnan(genders)]
    q1, med, q3 = np.percentile(ages, [25, 50, 75])
    return CohortStats(dataset.n_rows, float(med), float(q1), float(q3),
                       float(genders.mean()), float(dataset.labels.mean()))


def cohort_stats_from_visits(records: list[VisitRecord],
                             cci_scores: list[int] | None = None) -> CohortStats:
    """Visit-level age quartiles, patient-level male fraction; the outcome
    slot reports the fraction of visits with a positive comorbidity score
    (0.0 when scores are not supplied)."""
    if not records:
        raise DataError("no visit records")
    ages = np.array([r.age for r in records], dtype=float)
    by_patient: dict[str, int] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, r.gender)
    male = float(np.mean(list(by_patient.values())))
    q1, med, q3 = np.percentile(ages, [25, 50, 75])
    outcome = 0.0
    if cci_scores is not None:
        outcome = float(np.mean([1 if s > 0 else 0 for s in cci_scores]))
    return CohortStats(len(by_patient), float(med), float(q1), float(q3), male, outcome)
