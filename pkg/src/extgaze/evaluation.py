"""Assignment-based scoring of detections, and heat-map MSE."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .grid import GridCell, GridConfig, HeatMap, cell_distance_m

SUCCESS_THRESHOLD_M = 0.5


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost assignment of ``min(n, m)`` row/column pairs.

    Rectangular matrices are padded to square with a constant sentinel larger
    than every entry; padded pairs are dropped from the result. Returns the
    pairs sorted by row and their total cost.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidInputError("cost must be a 2D matrix")
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return [], 0.0
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost matrix has non-finite entries")
    n = max(n_rows, n_cols)
    sentinel = float(np.abs(c).max()) + 1.0
    a = np.full((n, n), sentinel)
    a[:n_rows, :n_cols] = c

    # potentials u (rows), v (columns); match[j] = row assigned to column j, 1-based, 0 = free
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, math.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], math.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    pairs = sorted((int(match[j]) - 1, j - 1) for j in range(1, n + 1)
                   if match[j] - 1 < n_rows and j - 1 < n_cols)
    return pairs, float(sum(c[r, k] for r, k in pairs))


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_detections: list[int]
    unmatched_objects: list[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_detections)

    @property
    def fn(self) -> int:
        return len(self.unmatched_objects)


def match_detections(dets: Sequence[GridCell], objects: Sequence[GridCell], cfg: GridConfig,
                     threshold_m: float = SUCCESS_THRESHOLD_M) -> MatchResult:
    """Hungarian matching on metric distance; a pair counts only if closer than the threshold.

    An assigned pair at or beyond the threshold leaves both sides unmatched.
    """
    dets, objects = list(dets), list(objects)
    if not dets or not objects:
        return MatchResult([], list(range(len(dets))), list(range(len(objects))))
    dist = np.array([[cell_distance_m(d, o, cfg) for o in objects] for d in dets])
    assignment, _ = hungarian(dist)
    pairs = [(i, j, float(dist[i, j])) for i, j in assignment if dist[i, j] < threshold_m]
    det_hit = {i for i, _, _ in pairs}
    obj_hit = {j for _, j, _ in pairs}
    return MatchResult(pairs,
                       [i for i in range(len(dets)) if i not in det_hit],
                       [j for j in range(len(objects)) if j not in obj_hit])


def heatmap_mse(pred, truth) -> float:
    p = np.asarray(pred.values if isinstance(pred, HeatMap) else pred, dtype=np.float64)
    t = np.asarray(truth.values if isinstance(truth, HeatMap) else truth, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidInputError(f"heat-map shapes differ: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class EvalReport:
    """Pooled (micro-averaged) scores; fractions in [0, 1]."""

    tp: int
    fp: int
    fn: int
    mse: float | None = None
    per_sequence: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def n_sequences(self) -> int:
        return len(self.per_sequence)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    @property
    def mse_x100(self) -> float | None:
        return None if self.mse is None else 100.0 * self.mse


def compute_metrics(matches: Sequence[MatchResult], mses: Sequence[float] | None = None) -> EvalReport:
    per_seq = [(m.tp, m.fp, m.fn) for m in matches]
    tp = sum(s[0] for s in per_seq)
    fp = sum(s[1] for s in per_seq)
    fn = sum(s[2] for s in per_seq)
    mse = float(np.mean(mses)) if mses else None
    return EvalReport(tp, fp, fn, mse, per_seq)
