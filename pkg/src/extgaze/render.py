"""Gaze cones, gaze heat-maps, intersection maps and object heat-maps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .grid import GridCell, GridConfig, HeatMap, WorldPoint, _check_cell, world_to_cell

DEFAULT_EPSILON = math.radians(2.0)
DEFAULT_SIGMA_OMEGA = 1.5

# center first, then the four corners, in units of half a cell
_SAMPLE_OFFSETS = np.array([(0, 0), (-1, -1), (-1, 1), (1, -1), (1, 1)], dtype=np.float64)


def wrap_angle(a):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays."""
    a = np.asarray(a, dtype=np.float64)
    # leave in-range angles untouched so wrapping is idempotent bit for bit
    w = np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2 * np.pi))
    w = np.where(w <= -np.pi, w + 2 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class PersonState:
    position: WorldPoint
    pan: float

    def __post_init__(self):
        x, y = self.position
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(self.pan)):
            raise InvalidInputError("person state must be finite")
        object.__setattr__(self, "position", WorldPoint(float(x), float(y)))
        object.__setattr__(self, "pan", wrap_angle(self.pan))


@dataclass(frozen=True)
class Frame:
    persons: tuple[PersonState, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "persons", tuple(self.persons))


@dataclass(frozen=True, eq=False)
class GazeSequence:
    """T gaze heat-maps over one grid, stored as a ``(T, s_u, s_v)`` array."""

    cfg: GridConfig
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[1:] != self.cfg.shape:
            raise InvalidInputError(f"sequence shape {vals.shape} does not match grid {self.cfg.shape}")
        if vals.shape[0] < 1:
            raise InvalidInputError("a gaze sequence needs at least one frame")
        if not np.all(np.isfinite(vals)) or vals.min() < -1e-9 or vals.max() > 1 + 1e-9:
            raise InvalidInputError("gaze maps must be finite and within [0, 1]")
        vals = np.clip(vals, 0.0, 1.0)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_maps(cls, maps: Sequence[HeatMap]) -> "GazeSequence":
        if not maps:
            raise InvalidInputError("a gaze sequence needs at least one frame")
        cfg = maps[0].config
        if any(m.config != cfg for m in maps):
            raise InvalidInputError("all maps of a sequence must share one grid")
        return cls(cfg, np.stack([m.values for m in maps]))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def maps(self) -> list[HeatMap]:
        return [HeatMap(self.cfg, m) for m in self.values]


def _sample_points(cfg: GridConfig) -> np.ndarray:
    """``(s_u, s_v, 5, 2)`` world coordinates of each cell's center and corners."""
    us = np.arange(cfg.s_u)[:, None, None]
    vs = np.arange(cfg.s_v)[None, :, None]
    hx = 0.5 * cfg.cell_width
    hy = 0.5 * cfg.cell_height
    px = cfg.x_min + (2 * us + 1) * hx + _SAMPLE_OFFSETS[None, None, :, 0] * hx
    py = cfg.y_min + (2 * vs + 1) * hy + _SAMPLE_OFFSETS[None, None, :, 1] * hy
    px, py = np.broadcast_arrays(px, py)
    return np.stack([px, py], axis=-1)


def cone_masks(positions, pans, cfg: GridConfig, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Binary cone maps for P persons at once, shape ``(P, s_u, s_v)``."""
    if not epsilon > 0:
        raise InvalidInputError("cone aperture must be positive")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    pans = np.asarray(pans, dtype=np.float64).reshape(-1)
    if pos.shape[0] != pans.shape[0]:
        raise InvalidInputError("positions and pans differ in length")
    out = np.zeros((pos.shape[0],) + cfg.shape, dtype=bool)
    if pos.shape[0] == 0:
        return out
    pts = _sample_points(cfg)
    dx = pts[None, ..., 0] - pos[:, 0, None, None, None]
    dy = pts[None, ..., 1] - pos[:, 1, None, None, None]
    diff = wrap_angle(np.arctan2(dy, dx) - pans[:, None, None, None])
    hit = (np.abs(diff) < epsilon) & ((dx != 0) | (dy != 0))
    out = hit.any(axis=-1)
    for i, (x, y) in enumerate(pos):
        u, v = world_to_cell((x, y), cfg)
        out[i, u - 1, v - 1] = False
    return out


def render_cone(p: PersonState, cfg: GridConfig, epsilon: float = DEFAULT_EPSILON) -> HeatMap:
    mask = cone_masks([p.position], [p.pan], cfg, epsilon)[0]
    return HeatMap(cfg, mask.astype(np.float64))


def _frame_masks(f: Frame, cfg: GridConfig, epsilon: float) -> np.ndarray:
    return cone_masks([p.position for p in f.persons], [p.pan for p in f.persons], cfg, epsilon)


def frame_gaze_map(f: Frame, cfg: GridConfig, epsilon: float = DEFAULT_EPSILON) -> HeatMap:
    masks = _frame_masks(f, cfg, epsilon)
    if masks.shape[0] == 0:
        return HeatMap.zeros(cfg)
    return HeatMap(cfg, masks.mean(axis=0))


def intersection_map(f: Frame, cfg: GridConfig, epsilon: float = DEFAULT_EPSILON) -> HeatMap:
    """1 where at least two cones of the frame overlap."""
    masks = _frame_masks(f, cfg, epsilon)
    return HeatMap(cfg, (masks.sum(axis=0) >= 2).astype(np.float64) if len(masks) else np.zeros(cfg.shape))


def frame_arrays(frames: Sequence[Frame], cfg: GridConfig,
                 epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame gaze maps and intersection maps, each ``(T, s_u, s_v)``.

    Persons of all frames are rasterized in one batch.
    """
    counts = [len(f.persons) for f in frames]
    positions = [p.position for f in frames for p in f.persons]
    pans = [p.pan for f in frames for p in f.persons]
    masks = cone_masks(np.reshape(positions, (-1, 2)), pans, cfg, epsilon)
    gaze = np.zeros((len(frames),) + cfg.shape)
    inter = np.zeros_like(gaze)
    start = 0
    for t, n in enumerate(counts):
        if n:
            s = masks[start:start + n].sum(axis=0)
            gaze[t] = s / n
            inter[t] = s >= 2
        start += n
    return gaze, inter


def render_sequence(frames: Sequence[Frame], cfg: GridConfig,
                    epsilon: float = DEFAULT_EPSILON) -> GazeSequence:
    gaze, _ = frame_arrays(frames, cfg, epsilon)
    return GazeSequence(cfg, gaze)


def mean_gaze_map(s: GazeSequence) -> HeatMap:
    return HeatMap(s.cfg, s.values.mean(axis=0))


def mean_intersection_map(frames: Sequence[Frame], cfg: GridConfig,
                          epsilon: float = DEFAULT_EPSILON) -> HeatMap:
    if not frames:
        raise InvalidInputError("need at least one frame")
    _, inter = frame_arrays(frames, cfg, epsilon)
    return HeatMap(cfg, inter.mean(axis=0))


def object_heatmap(objects: Sequence[GridCell], cfg: GridConfig,
                   sigma_omega: float = DEFAULT_SIGMA_OMEGA) -> HeatMap:
    """Max over objects of an isotropic Gaussian in cell-index units."""
    if not sigma_omega > 0:
        raise InvalidInputError("sigma_omega must be positive")
    cells = [_check_cell(c, cfg) for c in objects]
    if not cells:
        return HeatMap.zeros(cfg)
    uu, vv = np.meshgrid(np.arange(1, cfg.s_u + 1), np.arange(1, cfg.s_v + 1), indexing="ij")
    obj = np.array(cells, dtype=np.float64)
    d2 = (uu[None] - obj[:, 0, None, None]) ** 2 + (vv[None] - obj[:, 1, None, None]) ** 2
    return HeatMap(cfg, np.exp(-d2 / (2 * sigma_omega ** 2)).max(axis=0))
