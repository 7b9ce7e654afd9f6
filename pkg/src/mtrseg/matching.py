"""Mask-only bipartite matching between proposals and ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapacityError, NumericError, ShapeError

PROB_EPS = 1e-7
DICE_EPS = 1.0


@dataclass(frozen=True)
class MatchConfig:
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    objectness_weight: float = 0.0  # adds -log s per proposal when > 0
    full_resolution: bool = False
    teacher_guard: float = 0.0  # incremental steps: cost of taking a slot the teacher spends on another object


@dataclass
class MatchResult:
    sigma: np.ndarray  # sigma[j] = proposal for GT slot j; slots >= num_gt are padding
    num_gt: int

    @property
    def matched_indices(self) -> np.ndarray:
        return self.sigma[: self.num_gt]

    @property
    def unmatched_indices(self) -> np.ndarray:
        return np.sort(self.sigma[self.num_gt:])


def mask_cost(proposal, gt, bce_weight: float = 5.0, dice_weight: float = 5.0, eps: float = PROB_EPS) -> float:
    """Weighted mean-BCE + Dice between one soft proposal and one (possibly soft) GT mask."""
    m = np.asarray(proposal, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if m.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {m.shape} vs {g.shape}")
    return float(pairwise_mask_cost(m[None], g[None], bce_weight, dice_weight, eps)[0, 0])


def pairwise_mask_cost(props: np.ndarray, gts: np.ndarray, bce_weight=5.0, dice_weight=5.0, eps=PROB_EPS) -> np.ndarray:
    """Cost matrix [P, G] for proposals [P, ...] against GT masks [G, ...]."""
    p = np.clip(props.reshape(len(props), -1).astype(np.float64), eps, 1 - eps)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    if p.shape[1] != g.shape[1]:
        raise ShapeError(f"mask sizes differ: {props.shape[1:]} vs {gts.shape[1:]}")
    n = p.shape[1]
    bce = -(np.log(p) @ g.T + np.log1p(-p) @ (1 - g).T) / n
    dice = 1 - (2 * (p @ g.T) + DICE_EPS) / (p.sum(1)[:, None] + g.sum(1)[None, :] + DICE_EPS)
    return bce_weight * bce + dice_weight * dice


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns (row_to_col, u, v) with u, v feasible optimal duals:
    cost[i, j] - u[i] - v[j] >= 0, with equality on the assignment.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row owning column j; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[col_owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[col_owner[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _augment(adj: np.ndarray, owner: np.ndarray, start_row: int, target_col: int, blocked_rows: np.ndarray, blocked_col: int) -> list[int] | None:
    """BFS for an alternating path from ``start_row`` to free ``target_col`` in the tight graph."""
    n = adj.shape[0]
    prev_col = {}
    seen_cols = np.zeros(n, dtype=bool)
    seen_cols[blocked_col] = True
    frontier = [start_row]
    parent_row = {start_row: None}
    while frontier:
        nxt = []
        for r in frontier:
            for c in np.flatnonzero(adj[r] & ~seen_cols):
                seen_cols[c] = True
                prev_col[c] = r
                if c == target_col:
                    path, col = [], c
                    while col is not None:
                        row = prev_col[col]
                        path.append((row, col))
                        col = parent_row[row]
                    return path
                r2 = owner[c]
                if r2 >= 0 and not blocked_rows[r2] and r2 not in parent_row:
                    parent_row[r2] = c
                    nxt.append(r2)
        frontier = nxt
    return None


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment ``row -> column`` of a square matrix.

    Among optimal assignments the lexicographically smallest vector is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"cost must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NumericError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    assign, u, v = _solve(c)
    # every optimal assignment lives on the tight edges of an optimal dual
    scale = max(1.0, float(np.abs(c).max()))
    tight = (c - u[:, None] - v[None, :]) <= 1e-9 * scale * n
    owner = np.full(n, -1, dtype=np.int64)
    owner[assign] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for r in range(n):
        for col in np.flatnonzero(tight[r]):
            if owner[col] == r:
                break
            if fixed[owner[col]]:
                continue
            # move r onto col: the displaced row must reach r's old column
            old = assign[r]
            blocked = fixed.copy()
            blocked[r] = True
            path = _augment(tight, owner, owner[col], old, blocked, col)
            if path is None:
                continue
            for row, pc in path:
                assign[row] = pc
                owner[pc] = row
            assign[r] = col
            owner[col] = r
            break
        fixed[r] = True
    return assign


def guard_cost(t_masks, t_scores, gts, eps: float = PROB_EPS) -> np.ndarray:
    """[N, M] cost -log(1 - s~_i) * (1 - softIoU(m~_i, gt_j)) of reassigning teacher slot i to GT j.

    A confident teacher slot that already covers GT j costs nothing; one that covers a different
    (old, unlabeled) object becomes expensive, so new classes claim otherwise idle slots.
    """
    tm = np.asarray(t_masks, dtype=np.float64).reshape(len(t_masks), -1)
    g = np.asarray(gts, dtype=np.float64).reshape(len(gts), -1)
    inter = tm @ g.T
    union = tm.sum(1)[:, None] + g.sum(1)[None] - inter
    iou = inter / np.maximum(union, eps)
    s = np.clip(np.asarray(t_scores, dtype=np.float64), 0.0, 1.0 - eps)
    return -np.log1p(-s)[:, None] * (1.0 - iou)


def match(stage1_masks, gt_masks, cfg: MatchConfig = MatchConfig(), scores=None, teacher=None) -> MatchResult:
    """Match one image's N proposals to its M GT masks (M <= N), padding GT with no-object slots.

    ``stage1_masks`` are soft proposals [N, h, w]; GT masks [M, H, W] are area-resampled to
    ``h x w`` unless full resolution is requested upstream. ``teacher`` is an optional
    ``(masks, scores)`` pair at proposal resolution, used when ``cfg.teacher_guard > 0``.
    """
    props = stage1_masks.detach() if isinstance(stage1_masks, torch.Tensor) else torch.as_tensor(stage1_masks)
    gts = gt_masks if isinstance(gt_masks, torch.Tensor) else torch.as_tensor(np.asarray(gt_masks))
    n, m = props.shape[0], gts.shape[0]
    if m > n:
        raise CapacityError(f"{m} GT masks exceed {n} proposals")
    slots = np.zeros((n, n))
    if m:
        g = gts.to(torch.float64)
        if g.shape[-2:] != props.shape[-2:]:
            g = F.adaptive_avg_pool2d(g[None], props.shape[-2:])[0]
        real = pairwise_mask_cost(props.to(torch.float64).numpy(), g.numpy(), cfg.bce_weight, cfg.dice_weight)
        if cfg.objectness_weight > 0 and scores is not None:
            s = np.clip(np.asarray(torch.as_tensor(scores).detach(), dtype=np.float64), PROB_EPS, 1.0)
            real = real - cfg.objectness_weight * np.log(s)[:, None]
        if cfg.teacher_guard > 0 and teacher is not None:
            t_masks, t_scores = (np.asarray(torch.as_tensor(x).detach(), dtype=np.float64) for x in teacher)
            real = real + cfg.teacher_guard * guard_cost(t_masks, t_scores, g.numpy())
        slots[:m] = real.T  # rows: GT slots, columns: proposals
    return MatchResult(hungarian(slots), m)
