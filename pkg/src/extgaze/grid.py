"""Top-view grid geometry and the heat-map container.

Cells are 1-based ``(u, v)`` pairs; ``u`` indexes the x axis and ``v`` the y
axis. Heat-map values are stored as an ``(s_u, s_v)`` array indexed by
``[u - 1, v - 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

NORMALIZED_SLACK = 1e-9


class GridCell(NamedTuple):
    u: int
    v: int


class WorldPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class GridConfig:
    s_u: int = 32
    s_v: int = 32
    x_min: float = 0.0
    x_max: float = 3.0
    y_min: float = 0.0
    y_max: float = 3.0

    def __post_init__(self):
        if int(self.s_u) != self.s_u or int(self.s_v) != self.s_v:
            raise InvalidInputError("grid dimensions must be integers")
        if self.s_u < 2 or self.s_v < 2:
            raise InvalidInputError(f"grid must be at least 2x2, got {self.s_u}x{self.s_v}")
        bounds = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(math.isfinite(b) for b in bounds):
            raise InvalidInputError("grid bounds must be finite")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError("grid bounds must satisfy min < max")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.s_u, self.s_v)

    @property
    def cell_width(self) -> float:
        return (self.x_max - self.x_min) / self.s_u

    @property
    def cell_height(self) -> float:
        return (self.y_max - self.y_min) / self.s_v

    def contains(self, p: WorldPoint) -> bool:
        return self.x_min <= p[0] <= self.x_max and self.y_min <= p[1] <= self.y_max

    def wall_distance(self, p: WorldPoint) -> float:
        """Distance from ``p`` to the nearest room boundary (negative outside)."""
        x, y = p
        return min(x - self.x_min, self.x_max - x, y - self.y_min, self.y_max - y)

    def cells(self):
        for u in range(1, self.s_u + 1):
            for v in range(1, self.s_v + 1):
                yield GridCell(u, v)


def _check_cell(c, cfg: GridConfig) -> GridCell:
    u, v = c
    if not (1 <= u <= cfg.s_u and 1 <= v <= cfg.s_v):
        raise InvalidInputError(f"cell {tuple(c)} outside {cfg.s_u}x{cfg.s_v} grid")
    return GridCell(int(u), int(v))


def world_to_cell(p: WorldPoint, cfg: GridConfig) -> GridCell:
    """Map a world point to its grid cell with the ceiling rule.

    Indices are clamped into ``[1, s_u] x [1, s_v]``, so ``x == x_min`` and any
    point outside the room land on the nearest border cell.
    """
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidInputError(f"non-finite world point {p!r}")
    u = math.ceil(cfg.s_u * (x - cfg.x_min) / (cfg.x_max - cfg.x_min))
    v = math.ceil(cfg.s_v * (y - cfg.y_min) / (cfg.y_max - cfg.y_min))
    return GridCell(min(max(u, 1), cfg.s_u), min(max(v, 1), cfg.s_v))


def cell_center(c: GridCell, cfg: GridConfig) -> WorldPoint:
    u, v = _check_cell(c, cfg)
    return WorldPoint(cfg.x_min + (u - 0.5) * cfg.cell_width,
                      cfg.y_min + (v - 0.5) * cfg.cell_height)


def cell_distance_m(a: GridCell, b: GridCell, cfg: GridConfig) -> float:
    """Euclidean distance in meters between two cell centers."""
    pa = cell_center(a, cfg)
    pb = cell_center(b, cfg)
    return math.hypot(pa.x - pb.x, pa.y - pb.y)


def cell_centers(cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of every cell center as two ``(s_u, s_v)`` arrays."""
    xs = cfg.x_min + (np.arange(cfg.s_u) + 0.5) * cfg.cell_width
    ys = cfg.y_min + (np.arange(cfg.s_v) + 0.5) * cfg.cell_height
    return np.meshgrid(xs, ys, indexing="ij")


@dataclass(frozen=True, eq=False)
class HeatMap:
    """Real-valued map over a grid.

    ``normalized`` records the claim that every value lies in [0, 1]; the
    constructor enforces it up to a 1e-9 slack and then clips the slack away.
    """

    config: GridConfig
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != self.config.shape:
            raise InvalidInputError(f"heat-map shape {vals.shape} does not match grid {self.config.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("heat-map values must be finite")
        if self.normalized:
            if vals.size and (vals.min() < -NORMALIZED_SLACK or vals.max() > 1 + NORMALIZED_SLACK):
                raise InvalidInputError("normalized heat-map has values outside [0, 1]")
            np.clip(vals, 0.0, 1.0, out=vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __getitem__(self, c) -> float:
        u, v = _check_cell(c, self.config)
        return float(self.values[u - 1, v - 1])

    def __eq__(self, other):
        if not isinstance(other, HeatMap):
            return NotImplemented
        return (self.config == other.config and self.normalized == other.normalized
                and np.array_equal(self.values, other.values))

    __hash__ = None

    @classmethod
    def zeros(cls, cfg: GridConfig) -> "HeatMap":
        return cls(cfg, np.zeros(cfg.shape))
