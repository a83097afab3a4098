"""Local-maximum extraction from object heat-maps, and the two no-learning detectors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .grid import GridCell, GridConfig, HeatMap
from .render import DEFAULT_EPSILON, Frame, GazeSequence, mean_gaze_map, mean_intersection_map

SHRINK_FUNCTIONS: dict[str, Callable[[float], float]] = {
    "ln1p": math.log1p,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class PeakConfig:
    neighborhood_radius: int = 2
    shrink: str = "ln1p"

    def __post_init__(self):
        if self.neighborhood_radius < 1:
            raise InvalidInputError("neighborhood radius must be >= 1")
        if self.shrink not in SHRINK_FUNCTIONS:
            raise InvalidInputError(f"unknown shrink function {self.shrink!r}; "
                                    f"choose from {sorted(SHRINK_FUNCTIONS)}")

    def threshold(self, global_max: float) -> float:
        return SHRINK_FUNCTIONS[self.shrink](global_max)


def extract_peaks(m, pc: PeakConfig = PeakConfig()) -> list[GridCell]:
    """Cells that dominate their clipped (2r+1)^2 window and reach shrink(global max).

    Zero-valued cells never qualify. Adjacent qualifying cells (necessarily of
    equal value) collapse to the lexicographically smallest one. Results are
    sorted by decreasing value, ties by (u, v).
    """
    values = np.asarray(m.values if isinstance(m, HeatMap) else m, dtype=np.float64)
    if values.ndim != 2 or not np.all(np.isfinite(values)):
        raise InvalidInputError("peak extraction needs a finite 2D map")
    size = 2 * pc.neighborhood_radius + 1
    # edge replication only repeats in-window values, so this equals a clipped window
    local_max = ndimage.maximum_filter(values, size=size, mode="nearest")
    keep = (values >= local_max) & (values > 0) & (values >= pc.threshold(values.max()))
    labels, n = ndimage.label(keep, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    peaks = []
    for lab in range(1, n + 1):
        us, vs = np.nonzero(labels == lab)
        i = np.lexsort((vs, us))[0]
        peaks.append((values[us[i], vs[i]], GridCell(int(us[i]) + 1, int(vs[i]) + 1)))
    peaks.sort(key=lambda pv: (-pv[0], pv[1]))
    return [c for _, c in peaks]


def detect_cone(s: GazeSequence, pc: PeakConfig = PeakConfig()) -> list[GridCell]:
    return extract_peaks(mean_gaze_map(s), pc)


def detect_intersect(frames: Sequence[Frame], cfg: GridConfig, pc: PeakConfig = PeakConfig(),
                     epsilon: float = DEFAULT_EPSILON) -> list[GridCell]:
    return extract_peaks(mean_intersection_map(frames, cfg, epsilon), pc)
