import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from extgaze.errors import InvalidInputError
from extgaze.grid import GridCell, GridConfig, WorldPoint, cell_center, world_to_cell
from extgaze.render import (DEFAULT_EPSILON, Frame, GazeSequence, PersonState, frame_gaze_map,
                            intersection_map, mean_gaze_map, mean_intersection_map, object_heatmap,
                            render_cone, render_sequence, wrap_angle)

CFG = GridConfig()
EPS = math.radians(2)
CENTER = cell_center(GridCell(16, 16), CFG)


def person(cell, pan, cfg=CFG):
    return PersonState(cell_center(GridCell(*cell), cfg), pan)


def supersampled_cone(p: PersonState, cfg: GridConfig, eps: float, n: int = 10) -> np.ndarray:
    """Fraction of an n x n sub-grid of each cell lying strictly inside the cone."""
    out = np.zeros(cfg.shape)
    offs = (np.arange(n) + 0.5) / n
    for u in range(cfg.s_u):
        for v in range(cfg.s_v):
            xs = cfg.x_min + (u + offs) * cfg.cell_width
            ys = cfg.y_min + (v + offs) * cfg.cell_height
            X, Y = np.meshgrid(xs, ys)
            ang = np.arctan2(Y - p.position.y, X - p.position.x) - p.pan
            ang = np.pi - np.mod(np.pi - ang, 2 * np.pi)
            out[u, v] = np.mean(np.abs(ang) < eps)
    own = world_to_cell(p.position, cfg)
    out[own.u - 1, own.v - 1] = 0
    return out


def closed_cell_touches_cone(p, u, v, cfg, eps, n=400):
    """Dense sampling of the closed cell boundary, corners included (0-based u, v)."""
    t = np.linspace(0.0, 1.0, n)
    x0 = cfg.x_min + u * cfg.cell_width
    y0 = cfg.y_min + v * cfg.cell_height
    xs = np.concatenate([x0 + t * cfg.cell_width, x0 + t * cfg.cell_width, np.full(n, x0), np.full(n, x0 + cfg.cell_width)])
    ys = np.concatenate([np.full(n, y0), np.full(n, y0 + cfg.cell_height), y0 + t * cfg.cell_height, y0 + t * cfg.cell_height])
    ang = np.arctan2(ys - p.position.y, xs - p.position.x) - p.pan
    ang = np.pi - np.mod(np.pi - ang, 2 * np.pi)
    return bool(np.any(np.abs(ang) < eps))


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.0) == 0.0


def test_cone_on_axis_and_off_axis():
    p = person((16, 16), 0.0)
    m = render_cone(p, CFG, EPS)
    assert m[GridCell(26, 16)] == 1
    assert m[GridCell(26, 26)] == 0
    assert m[GridCell(16, 16)] == 0  # own cell


def test_cone_corner_sampling_keeps_thin_cones_alive():
    # pan aimed at the shared corner of cells (26,16)/(26,17): only corners are within 2 degrees
    p = person((16, 16), 0.0)
    cx = cell_center(GridCell(26, 17), CFG)
    corner = (cx.x - CFG.cell_width / 2, cx.y - CFG.cell_height / 2)
    pan = math.atan2(corner[1] - p.position.y, corner[0] - p.position.x)
    m = render_cone(PersonState(p.position, pan), CFG, EPS)
    center_angle = math.atan2(cx.y - p.position.y, cx.x - p.position.x)
    assert abs(center_angle - pan) > EPS  # a center-only test would miss this cell
    assert m[GridCell(26, 17)] == 1


def test_cone_against_supersampled_rasterizer():
    """Compare 5-point sampling with a 100-point-per-cell rasterizer on 20 random poses.

    Near the apex the cone is narrower than half a cell and can slip between
    sample points; from 6 cells out every cell the dense rasterizer touches is
    lit. Lit cells always touch the cone, and they include every cell the
    center-only rule would light.
    """
    rng = np.random.default_rng(3)
    uu, vv = np.meshgrid(np.arange(1, 33), np.arange(1, 33), indexing="ij")
    for _ in range(20):
        p = PersonState(WorldPoint(*rng.uniform(0.3, 2.7, 2)), rng.uniform(-math.pi, math.pi))
        fast = render_cone(p, CFG, EPS).values
        dense = supersampled_cone(p, CFG, EPS)
        own = world_to_cell(p.position, CFG)
        far = np.hypot(uu - own.u, vv - own.v) >= 6
        assert np.all(fast[(dense > 0) & far] == 1)
        lit_only = (fast == 1) & (dense == 0)
        for u, v in np.argwhere(lit_only):
            assert closed_cell_touches_cone(p, u, v, CFG, EPS)
        xc, yc = np.meshgrid(CFG.x_min + (np.arange(32) + 0.5) * CFG.cell_width,
                             CFG.y_min + (np.arange(32) + 0.5) * CFG.cell_height, indexing="ij")
        center_only = np.abs(wrap_angle(np.arctan2(yc - p.position.y, xc - p.position.x) - p.pan)) < EPS
        center_only[own.u - 1, own.v - 1] = False
        assert np.all(fast[center_only] == 1)


def test_render_cone_translation_invariance():
    p = PersonState(WorldPoint(1.23, 0.87), 0.4)
    shift = (5.0, -2.0)
    cfg2 = GridConfig(32, 32, shift[0], 3 + shift[0], shift[1], 3 + shift[1])
    p2 = PersonState(WorldPoint(1.23 + shift[0], 0.87 + shift[1]), 0.4)
    assert np.array_equal(render_cone(p, CFG, EPS).values, render_cone(p2, cfg2, EPS).values)


def test_frame_gaze_map():
    p1 = person((10, 10), 0.3)
    p2 = person((20, 25), -2.0)
    assert frame_gaze_map(Frame((p1,)), CFG, EPS) == render_cone(p1, CFG, EPS)
    two = frame_gaze_map(Frame((p1, p2)), CFG, EPS).values
    assert set(np.unique(two)) <= {0.0, 0.5, 1.0}
    assert not frame_gaze_map(Frame(()), CFG, EPS).values.any()


def test_mean_gaze_map():
    rng = np.random.default_rng(0)
    maps = rng.integers(0, 3, size=(7,) + CFG.shape) / 2
    s = GazeSequence(CFG, maps)
    brute = np.zeros(CFG.shape)
    for u in range(CFG.s_u):
        for v in range(CFG.s_v):
            total = 0.0
            for t in range(7):
                total += maps[t, u, v]
            brute[u, v] = total / 7
    assert np.allclose(mean_gaze_map(s).values, brute, atol=1e-15)
    const = GazeSequence(CFG, np.stack([maps[0]] * 4))
    assert np.allclose(mean_gaze_map(const).values, maps[0])
    half = GazeSequence(CFG, np.stack([maps[0], np.zeros(CFG.shape)]))
    assert np.allclose(mean_gaze_map(half).values, maps[0] / 2)


def test_intersection_maps():
    single = Frame((person((10, 10), 0.3),))
    assert not intersection_map(single, CFG, EPS).values.any()
    # facing each other along row v=16
    a, b = person((6, 16), 0.0), person((26, 16), math.pi)
    inter = intersection_map(Frame((a, b)), CFG, EPS).values
    brute = ((render_cone(a, CFG, EPS).values + render_cone(b, CFG, EPS).values) >= 2)
    assert np.array_equal(inter, brute.astype(float))
    for u in range(7, 26):
        assert inter[u - 1, 15] == 1
    # parallel cones two rows apart never meet
    c, d = person((6, 10), 0.0), person((6, 20), 0.0)
    assert not intersection_map(Frame((c, d)), CFG, EPS).values.any()


def test_mean_intersection_and_gaze_relation():
    rng = np.random.default_rng(1)
    frames = []
    for _ in range(5):
        frames.append(Frame(tuple(PersonState(WorldPoint(*rng.uniform(0.5, 2.5, 2)),
                                               rng.uniform(-math.pi, math.pi)) for _ in range(3))))
    for f in frames:
        g = frame_gaze_map(f, CFG, EPS).values
        i = intersection_map(f, CFG, EPS).values
        assert np.all(g[i == 1] >= 2 / 3 - 1e-12)
    seq = render_sequence(frames, CFG, EPS)
    assert seq.T == 5
    mi = mean_intersection_map(frames, CFG, EPS).values
    expected = np.mean([intersection_map(f, CFG, EPS).values for f in frames], axis=0)
    assert np.allclose(mi, expected)


def test_object_heatmap_examples():
    m = object_heatmap([GridCell(10, 10)], CFG, 1.5)
    assert m[GridCell(10, 10)] == 1.0
    # distance sigma along u: 1.5 cells is not a cell offset, so use sigma = 2
    m2 = object_heatmap([GridCell(10, 10)], CFG, 2.0)
    assert m2[GridCell(12, 10)] == pytest.approx(math.exp(-0.5))
    two = object_heatmap([GridCell(10, 10), GridCell(10, 20)], CFG, 2.0)
    assert two[GridCell(10, 15)] == pytest.approx(math.exp(-25 / 8))
    assert not object_heatmap([], CFG).values.any()
    with pytest.raises(InvalidInputError):
        object_heatmap([GridCell(0, 3)], CFG)


cells = st.tuples(st.integers(1, 32), st.integers(1, 32))


@settings(max_examples=50)
@given(st.lists(cells, max_size=4), cells)
def test_object_heatmap_monotone_under_adding(objs, extra):
    base = object_heatmap(objs, CFG).values
    more = object_heatmap(objs + [extra], CFG).values
    assert np.all(more >= base)
    assert more.max() <= 1.0


def test_person_state_wraps_pan():
    assert PersonState(WorldPoint(1, 1), 3 * math.pi).pan == pytest.approx(math.pi)
    with pytest.raises(InvalidInputError):
        PersonState(WorldPoint(math.nan, 1), 0.0)


def test_default_epsilon_is_two_degrees():
    assert DEFAULT_EPSILON == pytest.approx(math.radians(2))
