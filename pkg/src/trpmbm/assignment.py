"""Optimal and k-best assignment over rectangular cost matrices.

Rows are measurements, columns are association targets; every row must be
assigned to exactly one column, one column takes at most one row (rows <=
columns).  Forbidden pairs carry np.inf.  The k-best enumeration uses
binary-partition subproblems around each extracted solution, each solved
with the C assignment solver from scipy.
"""

from __future__ import annotations

import heapq
import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment


class InfeasibleAssignmentError(ValueError):
    """No complete assignment of rows to columns exists."""


def _solve(cost: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Best assignment of a matrix, or None when infeasible."""
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=int), 0.0
    try:
        rows, cols = linear_sum_assignment(cost)
    except ValueError:
        return None
    total = cost[rows, cols]
    if not np.isfinite(total).all():
        return None
    assignment = np.empty(cost.shape[0], dtype=int)
    assignment[rows] = cols
    return assignment, float(total.sum())


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost one-to-one assignment of every row to a column.

    Returns (assignment, cost) where assignment[r] is the column of row r.
    Raises InfeasibleAssignmentError if some row cannot be covered, naming
    a blocked row when one has no finite entry at all.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise ValueError(f"more rows than columns ({n_rows} > {n_cols})")
    blocked = np.flatnonzero(~np.isfinite(cost).any(axis=1))
    if blocked.size:
        raise InfeasibleAssignmentError(f"row {blocked[0]} has no finite entry")
    result = _solve(cost)
    if result is None:
        raise InfeasibleAssignmentError(
            "rows cannot be jointly assigned to distinct columns"
        )
    return result


def murty_kbest(cost: np.ndarray, K: int) -> list[tuple[np.ndarray, float]]:
    """The min(K, #feasible) cheapest assignments in nondecreasing cost order.

    The first entry equals hungarian(cost).  Nodes partition the solution
    space on the best assignment's row order, so no duplicates can occur.
    Children enter the queue unsolved with their parent's total as a valid
    lower bound and are only solved (on a matrix shrunk by the pinned rows
    and columns) if they surface, which keeps solver calls close to the
    number of extracted solutions.
    """
    cost = np.asarray(cost, dtype=float)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    n_rows, n_cols = cost.shape
    first = hungarian(cost)
    if K == 1 or n_rows == 0:
        return [first]

    out: list[tuple[np.ndarray, float]] = []
    counter = itertools.count()
    # solved node: (total, tiebreak, True, fixed_pairs, fixed_cost, matrix,
    #               rows, cols, sub_assignment)
    # lazy child:  (bound, tiebreak, False, fixed_pairs, fixed_cost, matrix,
    #               rows, cols, (parent_sub, t))
    heap = [
        (
            first[1],
            next(counter),
            True,
            (),
            0.0,
            cost,
            np.arange(n_rows),
            np.arange(n_cols),
            first[0],
        )
    ]

    while heap and len(out) < K:
        total, _, solved, fixed, fixed_cost, matrix, rows, cols, tail = heapq.heappop(
            heap
        )
        if not solved:
            sub, t = tail
            col_mask = np.ones(len(cols), dtype=bool)
            col_mask[sub[:t]] = False
            child = matrix[t:][:, col_mask]
            child[0, int(col_mask[: sub[t]].sum())] = np.inf
            best = _solve(child)
            if best is None:
                continue
            child_fixed = fixed + tuple(
                (int(rows[i]), int(cols[sub[i]])) for i in range(t)
            )
            child_fixed_cost = fixed_cost + float(matrix[np.arange(t), sub[:t]].sum())
            heapq.heappush(
                heap,
                (
                    child_fixed_cost + best[1],
                    next(counter),
                    True,
                    child_fixed,
                    child_fixed_cost,
                    child,
                    rows[t:],
                    cols[col_mask],
                    best[0],
                ),
            )
            continue

        sub = tail
        full = np.empty(n_rows, dtype=int)
        for r, c in fixed:
            full[r] = c
        full[rows] = cols[sub]
        out.append((full, total))
        if len(out) == K:
            break
        for t in range(len(rows)):
            heapq.heappush(
                heap,
                (total, next(counter), False, fixed, fixed_cost, matrix, rows, cols, (sub, t)),
            )
    return out
