"""Optimal bipartite assignment, used by both the training loss
(query <-> annotation matching) and evaluation (radius-gated centroid pairing).

All functions here are pure numpy; callers working in torch detach first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NumericalError

__all__ = [
    "FORBIDDEN",
    "Assignment",
    "hungarian",
    "distance_cost",
    "match_within_radius",
    "loss_cost",
]

# Large finite sentinel for infeasible edges. Kept finite so the solver never
# sees an infinity; assignments routed through it are dissolved post hoc.
FORBIDDEN = 1e9


@dataclass(frozen=True)
class Assignment:
    """A partial injective matching; pairs plus the leftovers on either side."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_rows: tuple[int, ...]
    unmatched_cols: tuple[int, ...]

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.pairs))


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment over a rectangular cost matrix.

    Matches min(n_rows, n_cols) pairs; the longer side's leftovers are
    reported unmatched. Empty matrices yield an empty assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment((), tuple(range(n_rows)), tuple(range(n_cols)))
    if np.isnan(cost).any():
        raise NumericalError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise NumericalError("cost matrix contains non-finite entries; use FORBIDDEN instead of inf")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(zip(rows.tolist(), cols.tolist()))
    matched_rows = set(rows.tolist())
    matched_cols = set(cols.tolist())
    return Assignment(
        pairs=pairs,
        unmatched_rows=tuple(i for i in range(n_rows) if i not in matched_rows),
        unmatched_cols=tuple(j for j in range(n_cols) if j not in matched_cols),
    )


def distance_cost(preds: Sequence, gts: Sequence) -> np.ndarray:
    """Pairwise Euclidean distances between two centroid lists, (n_preds, n_gts)."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    diff = p[:, None, :] - g[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def match_within_radius(
    preds: Sequence, gts: Sequence, radius: float
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Globally match centroids, then dissolve pairs at distance >= radius.

    Returns (matched pairs, false-positive pred indices, false-negative gt
    indices). Matching first and filtering second follows the evaluation
    protocol: one global assignment on the full distance matrix, then the
    radius test on each resulting pair.
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    cost = distance_cost(preds, gts)
    assignment = hungarian(cost)
    matched: list[tuple[int, int]] = []
    fp = list(assignment.unmatched_rows)
    fn = list(assignment.unmatched_cols)
    for i, j in assignment.pairs:
        if cost[i, j] < radius:
            matched.append((i, j))
        else:
            fp.append(i)
            fn.append(j)
    return matched, sorted(fp), sorted(fn)


def loss_cost(
    pred_scores: np.ndarray,
    pred_coords: np.ndarray,
    gt_coords: np.ndarray,
    gt_classes: np.ndarray,
    *,
    w_cls: float = 2.0,
    w_l1: float = 5.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> np.ndarray:
    """Matching cost between queries and annotations, (n_q, n_gt).

    ``pred_scores`` are class probabilities over t_d + 1 entries (last =
    no-object); coordinates are normalized to [0, 1]. Each entry is
    w_cls * focal-style classification cost + w_l1 * L1 geometry cost.
    """
    scores = np.asarray(pred_scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise NumericalError("loss_cost: NaN in prediction scores (diverged training?)")
    coords = np.asarray(pred_coords, dtype=np.float64).reshape(-1, 2)
    gt_xy = np.asarray(gt_coords, dtype=np.float64).reshape(-1, 2)
    gt_cls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)

    p = np.clip(scores[:, gt_cls], 1e-8, 1.0)
    cls_cost = alpha * (1.0 - p) ** gamma * (-np.log(p))
    l1 = np.abs(coords[:, None, :] - gt_xy[None, :, :]).sum(axis=2)
    return w_cls * cls_cost + w_l1 * l1
