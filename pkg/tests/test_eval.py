import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from extgaze.errors import InvalidInputError
from extgaze.evaluation import (EvalReport, MatchResult, compute_metrics, f1_score, heatmap_mse,
                                hungarian, match_detections)
from extgaze.grid import GridCell, GridConfig, HeatMap

CFG = GridConfig()

# (precision, recall, f1) rows published for the synthetic and Vernissage test sets
PUBLISHED_ROWS = [
    ("Cone/synthetic", 18.8, 53.9, 27.8), ("Intersect/synthetic", 21.1, 35.0, 26.3),
    ("LinearReg/synthetic", 50.5, 76.9, 60.9), ("FC1/synthetic", 64.9, 61.5, 63.1),
    ("FC3/synthetic", 65.9, 59.9, 62.8), ("Mean2DEnc/synthetic", 74.5, 59.5, 66.1),
    ("Enc2D/synthetic", 76.8, 62.2, 68.7), ("Enc3D/synthetic", 88.2, 71.4, 78.9),
    ("UNet3D2D/synthetic", 89.0, 78.0, 83.2),
    ("Cone/vernissage", 20.7, 35.8, 26.2), ("Intersect/vernissage", 34.9, 27.2, 30.6),
    ("LinearReg/vernissage", 37.0, 53.7, 43.7), ("FC1/vernissage", 29.9, 35.2, 32.3),
    ("FC3/vernissage", 28.0, 29.9, 28.8), ("Mean2DEnc/vernissage", 60.1, 41.1, 48.8),
    ("Enc2D/vernissage", 54.9, 40.5, 46.6), ("Enc3D/vernissage", 49.9, 37.1, 42.5),
    ("UNet3D2D/vernissage", 45.1, 38.5, 41.5),
]


def brute_force_min(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return brute_force_min(cost.T)


def test_hungarian_examples():
    assert hungarian([[4.5]]) == ([(0, 0)], 4.5)
    pairs, total = hungarian([[1, 2], [2, 1]])
    assert pairs == [(0, 0), (1, 1)] and total == 2
    assert hungarian(np.zeros((0, 3))) == ([], 0.0)


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(11)
    for trial in range(500):
        n, m = (6, 6) if trial < 100 else tuple(rng.integers(1, 7, size=2))
        cost = rng.uniform(-5, 10, size=(n, m))
        if trial % 5 == 0:
            cost = np.round(cost)  # ties
        pairs, total = hungarian(cost)
        assert len(pairs) == min(n, m)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == len(pairs)
        assert total == pytest.approx(sum(cost[i, j] for i, j in pairs))
        assert total == pytest.approx(brute_force_min(cost), abs=1e-9)


def test_hungarian_agrees_with_scipy_on_larger_matrices():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cost = rng.uniform(size=tuple(rng.integers(5, 30, size=2)))
        r, c = linear_sum_assignment(cost)
        assert hungarian(cost)[1] == pytest.approx(cost[r, c].sum())


def test_hungarian_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        hungarian([[1.0, np.inf]])
    with pytest.raises(InvalidInputError):
        hungarian([[np.nan]])


def test_match_examples():
    objs = [GridCell(3, 30), GridCell(20, 2), GridCell(31, 15)]
    r = match_detections(objs, objs, CFG)
    assert (r.tp, r.fp, r.fn) == (3, 0, 0)
    near = match_detections([GridCell(10, 13)], [GridCell(10, 10)], CFG)
    assert near.tp == 1 and near.pairs[0][2] == pytest.approx(0.28125)
    far = match_detections([GridCell(10, 18)], [GridCell(10, 10)], CFG)
    assert (far.tp, far.fp, far.fn) == (0, 1, 1)
    assert match_detections([], objs, CFG).fn == 3
    assert match_detections(objs, [], CFG).fp == 3


def test_threshold_is_strict():
    # neighbouring cells of a 0.5 m grid are exactly 0.5 m apart, which is not lower than 0.5 m
    cfg = GridConfig(6, 6, 0, 3, 0, 3)
    assert match_detections([GridCell(1, 1)], [GridCell(2, 1)], cfg).tp == 0
    assert match_detections([GridCell(1, 1)], [GridCell(2, 1)], cfg, threshold_m=0.51).tp == 1


def test_matching_prefers_global_optimum():
    # greedy would pair det 0 with obj 0 and leave det 1 out of range
    objs = [GridCell(10, 10), GridCell(10, 14)]
    dets = [GridCell(10, 12), GridCell(10, 9)]
    assert match_detections(dets, objs, CFG).tp == 2


def _random_cells(rng, k):
    return [GridCell(int(u), int(v)) for u, v in rng.integers(1, 33, size=(k, 2))]


def test_permutation_invariance_and_threshold_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(200):
        dets, objs = _random_cells(rng, rng.integers(0, 6)), _random_cells(rng, rng.integers(0, 5))
        base = match_detections(dets, objs, CFG)
        shuffled = match_detections(list(rng.permutation(dets)) if dets else [],
                                    list(rng.permutation(objs)) if objs else [], CFG)
        assert (base.tp, base.fp, base.fn) == (shuffled.tp, shuffled.fp, shuffled.fn)
        tps = [match_detections(dets, objs, CFG, t).tp for t in (0.1, 0.3, 0.5, 1.0, 2.0, 5.0)]
        assert tps == sorted(tps)
        assert base.tp + base.fp == len(dets) and base.tp + base.fn == len(objs)
        assert all(d < 0.5 for _, _, d in base.pairs)


def test_compute_metrics_pools_counts():
    a = MatchResult([(0, 0, 0.1)], [1, 2], [])
    b = MatchResult([], [], [0, 1])
    r = compute_metrics([a, b], [0.01, 0.03])
    assert (r.tp, r.fp, r.fn, r.n_sequences) == (1, 2, 2, 2)
    assert r.precision == pytest.approx(1 / 3) and r.recall == pytest.approx(1 / 3)
    assert r.mse_x100 == pytest.approx(2.0)


def test_metric_conventions():
    none = compute_metrics([MatchResult([], [], [0, 1])])
    assert none.precision == none.recall == none.f1 == 0.0
    perfect = compute_metrics([MatchResult([(0, 0, 0.0), (1, 1, 0.0)], [], [])])
    assert perfect.precision == perfect.recall == perfect.f1 == 1.0
    assert EvalReport(0, 0, 0).mse_x100 is None


def test_cone_row_f1():
    assert 100 * f1_score(0.188, 0.539) == pytest.approx(27.9, abs=0.15)


@pytest.mark.parametrize("name,p,r,f", PUBLISHED_ROWS, ids=[row[0] for row in PUBLISHED_ROWS])
def test_published_f1_consistent(name, p, r, f):
    assert f1_score(p, r) == pytest.approx(f, abs=0.15)


def test_heatmap_mse():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
    loops = sum((a[i, j] - b[i, j]) ** 2 for i in range(32) for j in range(32)) / 1024
    assert heatmap_mse(a, b) == pytest.approx(loops)
    assert heatmap_mse(HeatMap(CFG, a), HeatMap(CFG, a)) == 0
    assert heatmap_mse(np.zeros((4, 4)), np.ones((4, 4))) == 1
    with pytest.raises(InvalidInputError):
        heatmap_mse(np.zeros((4, 4)), np.zeros((4, 5)))
