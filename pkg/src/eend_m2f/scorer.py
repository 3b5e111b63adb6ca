"""Diarization error rate under the optimal speaker mapping.

Counts are per frame and per speaker: with ``nref[t]`` / ``nsys[t]`` the number
of active reference / system speakers at frame t and ``ncor`` the number of
(frame, speaker) hits under the best one-to-one mapping,

    MS  = sum max(nref - nsys, 0)
    FA  = sum max(nsys - nref, 0)
    SE  = sum min(nref, nsys) - ncor
    DER = sum max(nref, nsys) - ncor = MS + FA + SE

all divided by z = sum nref. Maximizing ``ncor`` is a linear-sum assignment
on the reference/system overlap matrix, so the returned DER is optimal.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .assignment import assignment_pairs
from .diar_core import FrameMask

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class DerResult:
    ms_count: int
    fa_count: int
    se_count: int
    ncor: int
    z: int
    n_frames: int

    @property
    def de_count(self) -> int:
        return self.ms_count + self.fa_count + self.se_count

    @property
    def no_reference(self) -> bool:
        """True when the reference holds no speech and rates fall back to per-frame FA."""
        return self.z == 0

    def _rate(self, count: int) -> float:
        if self.z > 0:
            return count / self.z
        return count / max(self.n_frames, 1)

    @property
    def ms(self) -> float:
        return self._rate(self.ms_count)

    @property
    def fa(self) -> float:
        return self._rate(self.fa_count)

    @property
    def se(self) -> float:
        return self._rate(self.se_count)

    @property
    def der(self) -> float:
        return self._rate(self.de_count)

    def __add__(self, other: "DerResult") -> "DerResult":
        return DerResult(
            self.ms_count + other.ms_count,
            self.fa_count + other.fa_count,
            self.se_count + other.se_count,
            self.ncor + other.ncor,
            self.z + other.z,
            self.n_frames + other.n_frames,
        )


def _as_bool(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, FrameMask) else mask
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {data.shape}")
    return data.astype(bool)


def _counts(sys: np.ndarray, ref: np.ndarray, ncor: int) -> DerResult:
    nsys = sys.sum(1, dtype=np.int64)
    nref = ref.sum(1, dtype=np.int64)
    ms = int(np.maximum(nref - nsys, 0).sum())
    fa = int(np.maximum(nsys - nref, 0).sum())
    se = int(np.minimum(nsys, nref).sum()) - ncor
    return DerResult(ms, fa, se, ncor, int(nref.sum()), sys.shape[0])


def _check_frames(sys: np.ndarray, ref: np.ndarray) -> None:
    if sys.shape[0] != ref.shape[0]:
        raise ValueError(f"frame count mismatch: sys has {sys.shape[0]}, ref has {ref.shape[0]}")


def overlap_matrix(sys, ref) -> np.ndarray:
    """correct[j, i] = number of frames where system j and reference i are both active."""
    sys = _as_bool(sys)
    ref = _as_bool(ref)
    _check_frames(sys, ref)
    return sys.T.astype(np.int64) @ ref.astype(np.int64)


def compute_der(sys, ref) -> DerResult:
    """Optimal DER of a T x S_hat system mask against a T x S reference mask."""
    sys = _as_bool(sys)
    ref = _as_bool(ref)
    _check_frames(sys, ref)
    correct = sys.T.astype(np.int64) @ ref.astype(np.int64)
    rows, cols = assignment_pairs(correct.astype(np.float64), maximize=True)
    ncor = int(correct[rows, cols].sum())
    return _counts(sys, ref, ncor)


def brute_force_der(sys, ref) -> DerResult:
    """Exhaustive-search DER for small speaker counts (test oracle)."""
    sys = _as_bool(sys)
    ref = _as_bool(ref)
    _check_frames(sys, ref)
    n_sys, n_ref = sys.shape[1], ref.shape[1]
    if max(n_sys, n_ref) > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} speakers per side")
    # overlap counts are a plain frame tally here, independent of the assignment solver
    hits_of = [[int(np.logical_and(sys[:, j], ref[:, i]).sum()) for i in range(n_ref)] for j in range(n_sys)]
    base = int(np.maximum(sys.sum(1), ref.sum(1)).sum())
    best = None
    k = min(n_sys, n_ref)
    for sys_cols in itertools.permutations(range(n_sys), k):
        for chosen_ref in itertools.combinations(range(n_ref), k):
            hits = sum(hits_of[j][i] for j, i in zip(sys_cols, chosen_ref))
            if best is None or base - hits < best[0]:
                best = (base - hits, hits)
    ncor = best[1] if best is not None else 0
    return _counts(sys, ref, ncor)


def corpus_der(results: Iterable[DerResult]) -> DerResult:
    """Aggregate per-recording counts; rates are then computed once on the totals."""
    total = DerResult(0, 0, 0, 0, 0, 0)
    for r in results:
        total = total + r
    return total


def format_rate(value: float) -> str:
    return "nan" if math.isnan(value) else f"{100.0 * value:.2f}"
