import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from extgaze.errors import InvalidInputError
from extgaze.grid import (GridCell, GridConfig, HeatMap, WorldPoint, cell_center, cell_distance_m,
                          world_to_cell)

CFG = GridConfig()


@pytest.mark.parametrize("x,u", [(3.0, 32), (1.5, 16), (0.0, 1), (0.05, 1), (0.1, 2)])
def test_world_to_cell_x(x, u):
    assert world_to_cell(WorldPoint(x, 1.0), CFG).u == u


def test_out_of_bounds_clamps():
    assert world_to_cell((-1.0, 7.0), CFG) == GridCell(1, 32)


def test_non_finite_point_rejected():
    with pytest.raises(InvalidInputError):
        world_to_cell((math.nan, 1.0), CFG)
    with pytest.raises(InvalidInputError):
        world_to_cell((1.0, math.inf), CFG)


def test_cell_center_examples():
    assert cell_center(GridCell(1, 1), CFG).x == pytest.approx(3 / 64)
    assert cell_center(GridCell(32, 1), CFG).x == pytest.approx(3 - 3 / 64)


def test_cell_center_round_trip_all_cells():
    for c in CFG.cells():
        assert world_to_cell(cell_center(c, CFG), CFG) == c


def test_round_trip_on_offset_grid():
    cfg = GridConfig(10, 7, -2.5, 4.0, 1.0, 2.4)
    for c in cfg.cells():
        assert world_to_cell(cell_center(c, cfg), cfg) == c


def test_cell_distance():
    assert cell_distance_m(GridCell(5, 5), GridCell(5, 5), CFG) == 0
    assert cell_distance_m(GridCell(5, 5), GridCell(6, 5), CFG) == pytest.approx(0.09375)
    # centers at 3/64 and 3 - 3/64 on both axes: 31 cell widths of 3/32 m, diagonally
    span = (3 - 3 / 64) - 3 / 64
    expected = math.sqrt(2 * span * span)
    assert expected == pytest.approx(31 * (3 / 32) * math.sqrt(2))
    assert cell_distance_m(GridCell(1, 1), GridCell(32, 32), CFG) == pytest.approx(expected)
    assert expected == pytest.approx(4.1101, abs=1e-4)


def test_out_of_range_cell_rejected():
    for bad in [GridCell(0, 1), GridCell(1, 33), GridCell(33, 5)]:
        with pytest.raises(InvalidInputError):
            cell_center(bad, CFG)
        with pytest.raises(InvalidInputError):
            cell_distance_m(bad, GridCell(1, 1), CFG)


@pytest.mark.parametrize("kwargs", [
    dict(s_u=1), dict(s_v=0), dict(x_min=1.0, x_max=1.0), dict(y_min=2.0, y_max=1.0),
    dict(x_max=math.inf),
])
def test_grid_config_invariants(kwargs):
    with pytest.raises(InvalidInputError):
        GridConfig(**kwargs)


coord = st.floats(-1.0, 4.0, allow_nan=False)


@given(coord, coord, coord)
def test_world_to_cell_monotone(x1, x2, y):
    a, b = sorted((x1, x2))
    assert world_to_cell((a, y), CFG).u <= world_to_cell((b, y), CFG).u
    assert world_to_cell((y, a), CFG).v <= world_to_cell((y, b), CFG).v


@given(st.floats(0.7, 2.3), st.floats(0.7, 2.3), st.integers(-5, 5), st.integers(-5, 5))
def test_translation_by_whole_cells(x, y, ku, kv):
    w = CFG.cell_width
    # keep away from cell edges, where float rounding could flip the ceiling
    frac = (x / w) % 1.0
    frac_y = (y / w) % 1.0
    if min(frac, 1 - frac, frac_y, 1 - frac_y) < 1e-6:
        return
    c0 = world_to_cell((x, y), CFG)
    c1 = world_to_cell((x + ku * w, y + kv * w), CFG)
    assert (c1.u - c0.u, c1.v - c0.v) == (ku, kv)


def test_heatmap_rejects_bad_values():
    with pytest.raises(InvalidInputError):
        HeatMap(CFG, np.full(CFG.shape, np.nan))
    with pytest.raises(InvalidInputError):
        HeatMap(CFG, np.full(CFG.shape, 1.5))
    with pytest.raises(InvalidInputError):
        HeatMap(CFG, np.zeros((3, 3)))
    # unnormalized maps may leave [0, 1]
    assert HeatMap(CFG, np.full(CFG.shape, -2.0), normalized=False)[GridCell(1, 1)] == -2.0
    # tiny slack is tolerated and clipped
    m = HeatMap(CFG, np.full(CFG.shape, 1 + 1e-10))
    assert m.values.max() == 1.0


def test_heatmap_is_read_only():
    m = HeatMap.zeros(CFG)
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0
