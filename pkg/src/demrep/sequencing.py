"""Visit ordering schemes, fixed-length framing, and leakage-safe splits.

Frames are non-overlapping consecutive chunks of frame_len steps; the final
partial chunk is zero-padded so every input row lands at exactly one valid
step. scope="patient" chunks each patient independently (leak-safe);
scope="cohort" chunks the pooled age-sorted rows, which lets frames span
patients and is the construction downstream reports must flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, TypeVar

import numpy as np

from .errors import ConfigError, DataError

T = TypeVar("T")

FRAME_LEN = 120


@dataclass
class EncodedVisits:
    """Parallel arrays of encoded visit rows plus their regression targets."""
    vectors: np.ndarray          # (n, d)
    targets: np.ndarray          # (n,)
    ages: np.ndarray             # (n,)
    patient_ids: list[str]

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.ages = np.asarray(self.ages, dtype=float)
        n = self.vectors.shape[0]
        if not (n == self.targets.size == self.ages.size == len(self.patient_ids)):
            raise DataError("encoded visit arrays must align")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def take(self, indices: Sequence[int]) -> "EncodedVisits":
        idx = np.asarray(indices, dtype=int)
        return EncodedVisits(self.vectors[idx], self.targets[idx], self.ages[idx],
                             [self.patient_ids[i] for i in idx])


@dataclass
class SequenceFrame:
    steps: np.ndarray            # (frame_len, d); zero rows on padding
    valid_mask: np.ndarray       # (frame_len,) bool; valid steps precede padding
    targets: np.ndarray          # (frame_len,); 0 on padding
    source_ids: list[str | None]
    row_indices: np.ndarray      # (frame_len,); original row index, -1 on padding

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(frozen=True)
class SplitAssignment:
    train_patient_ids: frozenset[str]
    test_patient_ids: frozenset[str]
    ratio: float
    seed: int


def split_by_patient(patient_ids: Sequence[str], ratio: float, seed: int) -> SplitAssignment:
    """Disjoint train/test patient sets; train size within one patient of ratio."""
    distinct = sorted(set(patient_ids))
    if len(distinct) < 2:
        raise DataError("patient-level split needs at least 2 distinct patients")
    if not 0 < ratio < 1:
        raise ConfigError("split ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(distinct))
    n_train = int(round(ratio * len(distinct)))
    n_train = min(max(n_train, 1), len(distinct) - 1)
    train = frozenset(distinct[i] for i in order[:n_train])
    test = frozenset(distinct[i] for i in order[n_train:])
    return SplitAssignment(train, test, ratio, seed)


def order_ns(items: Sequence[T], seed: int) -> list[T]:
    """Seeded uniform permutation."""
    rng = np.random.default_rng(seed)
    return [items[i] for i in rng.permutation(len(items))]


def order_seq(items: Sequence[T], age_of: Callable[[T], float]) -> list[T]:
    """Stable non-decreasing sort by age; input order preserved within ties."""
    return sorted(items, key=age_of)


def order_visits_ns(visits: EncodedVisits, seed: int) -> EncodedVisits:
    return visits.take(order_ns(list(range(visits.n)), seed))


def order_visits_seq(visits: EncodedVisits) -> EncodedVisits:
    idx = order_seq(list(range(visits.n)), age_of=lambda i: visits.ages[i])
    return visits.take(idx)


def _chunk(visits: EncodedVisits, indices: list[int], frame_len: int) -> list[SequenceFrame]:
    d = visits.vectors.shape[1]
    frames = []
    for start in range(0, len(indices), frame_len):
        chunk = indices[start:start + frame_len]
        steps = np.zeros((frame_len, d))
        valid = np.zeros(frame_len, dtype=bool)
        targets = np.zeros(frame_len)
        row_idx = np.full(frame_len, -1, dtype=int)
        ids: list[str | None] = [None] * frame_len
        for s, i in enumerate(chunk):
            steps[s] = visits.vectors[i]
            valid[s] = True
            targets[s] = visits.targets[i]
            row_idx[s] = i
            ids[s] = visits.patient_ids[i]
        frames.append(SequenceFrame(steps, valid, targets, ids, row_idx))
    return frames


def frame_sequences(visits: EncodedVisits, frame_len: int = FRAME_LEN,
                    scope: str = "patient") -> list[SequenceFrame]:
    """Chunk ordered rows into zero-padded frames.

    Rows must already be age-ordered within the chosen scope. With
    scope="patient", each patient's rows are chunked independently and
    patients are emitted in sorted-id order; with scope="cohort" the pooled
    row order is chunked as-is.
    """
    if frame_len <= 0:
        raise ConfigError("frame_len must be positive")
    if scope not in ("patient", "cohort"):
        raise ConfigError(f"unknown frame scope {scope!r}")
    if visits.n == 0:
        return []
    if scope == "cohort":
        return _chunk(visits, list(range(visits.n)), frame_len)
    groups: dict[str, list[int]] = {}
    for i, pid in enumerate(visits.patient_ids):
        groups.setdefault(pid, []).append(i)
    frames: list[SequenceFrame] = []
    for pid in sorted(groups):
        frames.extend(_chunk(visits, groups[pid], frame_len))
    return frames


def dump_frames_csv(frames: list[SequenceFrame], path: str | Path) -> None:
    """Debug dump: one row per step, `frame_id, step, valid, target, v0..vd`."""
    path = Path(path)
    d = frames[0].steps.shape[1] if frames else 0
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "step", "valid", "target"] + [f"v{j}" for j in range(d)])
        for f_id, frame in enumerate(frames):
            for s in range(frame.steps.shape[0]):
                writer.writerow([f_id, s, int(frame.valid_mask[s]), repr(float(frame.targets[s]))]
                                + [repr(float(v)) for v in frame.steps[s]])
