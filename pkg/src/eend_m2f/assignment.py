"""Linear-sum assignment and the query/speaker matching cost.

The solver is the shortest-augmenting-path form of the Hungarian algorithm
(potentials on rows and columns, one Dijkstra-like sweep per row), O(n^2 m)
for an n x m problem with n <= m.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

PROB_EPS = 1e-7


class LossWeights(NamedTuple):
    lambda_dia: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0

    def validate(self) -> "LossWeights":
        for name, value in self._asdict().items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        return self


def _solve_rows(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Returns ``col_of_row``. Ties resolve to the lowest column index.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    # row_of[j] is the 1-based row owning column j (0 = free); column 0 is a sentinel
    row_of = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free[1:], minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if row_of[j]:
            col_of_row[row_of[j] - 1] = j - 1
    return col_of_row


def _check_finite(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def linear_sum_assignment(cost: np.ndarray, maximize: bool = False) -> np.ndarray:
    """Optimal injective assignment of the S columns (speakers) to the N rows (queries).

    Parameters
    ----------
    cost : (N, S) array, N >= S
    maximize : bool
        Maximize the total instead of minimizing it.

    Returns
    -------
    assign : (S,) int array, speaker ``i`` is matched with query ``assign[i]``.
    """
    cost = _check_finite(cost)
    n_rows, n_cols = cost.shape
    if n_rows < n_cols:
        raise ValueError(f"need at least as many rows as columns, got {n_rows} x {n_cols}")
    if n_cols == 0:
        return np.zeros(0, dtype=np.int64)
    work = -cost.T if maximize else cost.T
    return _solve_rows(np.ascontiguousarray(work))


def assignment_pairs(cost: np.ndarray, maximize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Optimal pairing for a matrix of any shape, as (row_indices, col_indices).

    Matches min(rows, cols) pairs; rows are sorted ascending.
    """
    cost = _check_finite(cost)
    n_rows, n_cols = cost.shape
    if min(n_rows, n_cols) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    if n_rows >= n_cols:
        rows = linear_sum_assignment(cost, maximize)
        cols = np.arange(n_cols)
    else:
        cols = linear_sum_assignment(cost.T, maximize)
        rows = np.arange(n_rows)
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pairwise_bce_mean(probs: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """(N, S) time-averaged binary cross entropy between every prediction and reference column."""
    p = np.clip(probs, PROB_EPS, 1 - PROB_EPS)
    y = ref.astype(np.float64)
    n_frames = p.shape[0]
    total = -(np.log(p).T @ y + np.log1p(-p).T @ (1.0 - y))
    return total / max(n_frames, 1)


def pairwise_dice_loss(probs: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """(N, S) dice loss 1 - 2<p, y> / (sum p + sum y); 0 where both sums vanish."""
    y = ref.astype(np.float64)
    numer = 2.0 * (probs.T @ y)
    denom = probs.sum(0)[:, None] + y.sum(0)[None, :]
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, 1.0 - numer / safe, 0.0)


def build_match_cost(
    pred_logits: np.ndarray, class_probs: np.ndarray, ref: np.ndarray, weights: LossWeights = LossWeights()
) -> np.ndarray:
    """Matching cost between N query predictions and S reference speakers.

    Parameters
    ----------
    pred_logits : (T, N) speaker activity logits
    class_probs : (N,) query speaker probabilities
    ref : (T, S) boolean reference

    Returns
    -------
    (N, S) cost matrix
    """
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    class_probs = np.asarray(class_probs, dtype=np.float64)
    ref = np.asarray(ref)
    if pred_logits.ndim != 2 or ref.ndim != 2 or class_probs.ndim != 1:
        raise ValueError("expected pred_logits (T, N), class_probs (N,), ref (T, S)")
    if pred_logits.shape[0] != ref.shape[0]:
        raise ValueError(f"frame count mismatch: {pred_logits.shape[0]} vs {ref.shape[0]}")
    if pred_logits.shape[1] != class_probs.shape[0]:
        raise ValueError(f"query count mismatch: {pred_logits.shape[1]} vs {class_probs.shape[0]}")
    probs = _sigmoid(pred_logits)
    cost = (
        weights.lambda_dia * pairwise_bce_mean(probs, ref)
        + weights.lambda_dice * pairwise_dice_loss(probs, ref)
        - weights.lambda_cls * class_probs[:, None]
    )
    return cost


def optimal_matching(
    pred_logits: np.ndarray, class_probs: np.ndarray, ref: np.ndarray, weights: LossWeights = LossWeights()
) -> np.ndarray:
    """Speaker-to-query matching minimizing the total matching cost."""
    cost = build_match_cost(pred_logits, class_probs, ref, weights)
    return linear_sum_assignment(cost, maximize=False)
