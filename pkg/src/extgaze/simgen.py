"""Seeded synthetic scenarios: objects, people motion, attention and head pans.

Sampling follows the factorization objects -> motion -> head orientation,
where head orientation is driven by latent attention targets sampled per
person as a semi-Markov chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import GenerationError, InvalidInputError
from .grid import GridCell, GridConfig, WorldPoint, _check_cell, cell_center, cell_distance_m
from .render import Frame, PersonState, wrap_angle

MAX_REJECTIONS = 100
TARGET_CLASSES = ("object", "person", "camera", "wander")


class Target(NamedTuple):
    """Latent attention target of one person at one frame.

    ``index`` is the object or person index for those classes and ``angle`` the
    absolute pan for ``wander``; unused fields are -1 / 0.0.
    """

    kind: str
    index: int = -1
    angle: float = 0.0

    def label(self) -> str:
        if self.kind in ("object", "person"):
            return f"{self.kind}:{self.index}"
        if self.kind == "wander":
            return f"wander:{self.angle!r}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Target":
        kind, _, arg = text.partition(":")
        if kind in ("object", "person"):
            return cls(kind, int(arg))
        if kind == "wander":
            return cls(kind, -1, float(arg))
        if kind == "camera" and not arg:
            return cls(kind)
        raise ValueError(f"unknown target label {text!r}")


@dataclass(frozen=True)
class GenConfig:
    cfg: GridConfig = field(default_factory=GridConfig)
    n_people: int = 2
    n_objects: int = 3
    horizon: int = 20
    camera_cell: GridCell = GridCell(16, 1)
    seed: int = 0
    # placement thresholds, meters
    d_obj_min: float = 0.5
    d_edge_max: float = 0.75
    d_person_min: float = 0.3
    d_person_edge_min: float = 0.4
    # motion
    p_stay: float = 0.95
    step_sigma: float = 0.3
    speed_m_per_frame: float = 0.1
    # attention and head pan
    mean_hold_frames: float = 25.0
    target_class_weights: tuple[float, float, float, float] = (0.60, 0.20, 0.15, 0.05)
    head_blend: float = 0.7
    pan_noise_sigma: float = math.radians(5.0)
    relax_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "camera_cell", _check_cell(self.camera_cell, self.cfg))
        object.__setattr__(self, "target_class_weights", tuple(float(w) for w in self.target_class_weights))
        if self.n_people < 1:
            raise InvalidInputError("need at least one person")
        if self.n_objects < 0 or self.horizon < 1:
            raise InvalidInputError("n_objects must be >= 0 and horizon >= 1")
        for name in ("d_obj_min", "d_edge_max", "d_person_min", "d_person_edge_min",
                     "step_sigma", "speed_m_per_frame"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not 0 <= self.p_stay <= 1 or not 0 <= self.head_blend <= 1:
            raise InvalidInputError("p_stay and head_blend must lie in [0, 1]")
        if not 0 < self.relax_rate <= 1:
            raise InvalidInputError("relax_rate must lie in (0, 1]")
        if self.mean_hold_frames < 1:
            raise InvalidInputError("mean_hold_frames must be >= 1")
        if self.pan_noise_sigma < 0:
            raise InvalidInputError("pan_noise_sigma must be >= 0")
        w = self.target_class_weights
        if len(w) != 4 or min(w) < 0 or abs(sum(w) - 1) > 1e-9:
            raise InvalidInputError("target_class_weights must be 4 non-negative numbers summing to 1")


@dataclass(frozen=True, eq=False)
class Scenario:
    cfg: GridConfig
    objects: tuple[GridCell, ...]
    camera_cell: GridCell
    frames: tuple[Frame, ...]
    latent_targets: tuple[tuple[Target, ...], ...]
    seed: int

    @property
    def horizon(self) -> int:
        return len(self.frames)

    @property
    def n_people(self) -> int:
        return len(self.frames[0].persons) if self.frames else 0

    def positions(self) -> np.ndarray:
        """``(T, N, 2)`` array of person positions."""
        return np.array([[p.position for p in f.persons] for f in self.frames], dtype=np.float64)

    def pans(self) -> np.ndarray:
        return np.array([[p.pan for p in f.persons] for f in self.frames], dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.cfg == other.cfg and self.objects == other.objects
                and self.camera_cell == other.camera_cell and self.frames == other.frames
                and self.latent_targets == other.latent_targets and self.seed == other.seed)

    __hash__ = None


def scenario_seed(base_seed: int, index: int, attempt: int = 0) -> int:
    """Independent 63-bit seed for item ``index`` of a seeded collection."""
    key = [int(base_seed), int(index)] + ([int(attempt)] if attempt else [])
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sample_objects(gc: GenConfig, rng: np.random.Generator) -> list[GridCell]:
    """Rejection-sample object cells near the walls and apart from each other.

    The camera cell holds the blank object: it is never drawn as an object and
    counts as an occupied cell for the separation test.
    """
    cfg = gc.cfg
    placed = [gc.camera_cell]
    objects = []
    for _ in range(gc.n_objects):
        for _attempt in range(MAX_REJECTIONS):
            c = GridCell(int(rng.integers(1, cfg.s_u + 1)), int(rng.integers(1, cfg.s_v + 1)))
            if c == gc.camera_cell:
                continue
            if cfg.wall_distance(cell_center(c, cfg)) > gc.d_edge_max:
                continue
            if any(cell_distance_m(c, o, cfg) < gc.d_obj_min for o in placed):
                continue
            break
        else:
            raise GenerationError(f"could not place object {len(objects) + 1} after {MAX_REJECTIONS} draws")
        placed.append(c)
        objects.append(c)
    return objects


def _anchor_points(gc: GenConfig, objects: Sequence[GridCell]) -> np.ndarray:
    cells = [gc.camera_cell, *objects]
    return np.array([cell_center(c, gc.cfg) for c in cells], dtype=np.float64)


def _too_close(p: np.ndarray, others: np.ndarray, dmin: float) -> bool:
    if len(others) == 0:
        return False
    return bool(np.min(np.hypot(others[:, 0] - p[0], others[:, 1] - p[1])) < dmin)


def sample_initial_people(gc: GenConfig, objects: Sequence[GridCell],
                          rng: np.random.Generator) -> list[WorldPoint]:
    cfg = gc.cfg
    anchors = _anchor_points(gc, objects)
    people: list[WorldPoint] = []
    for _ in range(gc.n_people):
        for _attempt in range(MAX_REJECTIONS):
            p = np.array([rng.uniform(cfg.x_min, cfg.x_max), rng.uniform(cfg.y_min, cfg.y_max)])
            if cfg.wall_distance(p) < gc.d_person_edge_min:
                continue
            if _too_close(p, anchors, gc.d_person_min):
                continue
            if _too_close(p, np.array(people).reshape(-1, 2), gc.d_person_min):
                continue
            break
        else:
            raise GenerationError(f"could not place person {len(people) + 1} after {MAX_REJECTIONS} draws")
        people.append(WorldPoint(float(p[0]), float(p[1])))
    return people


class MotionState:
    """Current positions plus, per person, the queue of interpolated waypoints."""

    def __init__(self, positions, anchors):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 2)
        self.anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
        self.pending: list[list[np.ndarray]] = [[] for _ in range(len(self.positions))]


def interpolate_path(start, dest, speed: float) -> list[np.ndarray]:
    """Waypoints x_{t+1} .. x_{t+tau} of a linear move, tau = ceil(dist / speed)."""
    start = np.asarray(start, dtype=np.float64)
    dest = np.asarray(dest, dtype=np.float64)
    dist = float(np.hypot(*(dest - start)))
    tau = max(1, math.ceil(dist / speed - 1e-12))
    return [start + (k / tau) * (dest - start) for k in range(1, tau)] + [dest.copy()]


def step_motion(state: MotionState, gc: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Advance every person by one frame and return the new ``(N, 2)`` positions."""
    cfg = gc.cfg
    for n in range(len(state.positions)):
        if state.pending[n]:
            state.positions[n] = state.pending[n].pop(0)
            continue
        if rng.random() < gc.p_stay:
            continue
        others = np.delete(state.positions, n, axis=0)
        for _attempt in range(MAX_REJECTIONS):
            dest = rng.normal(state.positions[n], gc.step_sigma)
            if not cfg.contains(dest):
                continue
            if _too_close(dest, state.anchors, gc.d_person_min) or _too_close(dest, others, gc.d_person_min):
                continue
            break
        else:
            continue
        state.pending[n] = interpolate_path(state.positions[n], dest, gc.speed_m_per_frame)
        state.positions[n] = state.pending[n].pop(0)
    return state.positions.copy()


def sample_trajectories(gc: GenConfig, objects: Sequence[GridCell], rng: np.random.Generator) -> np.ndarray:
    """``(T, N, 2)`` positions: initial placement then T - 1 motion steps."""
    start = sample_initial_people(gc, objects, rng)
    state = MotionState(start, _anchor_points(gc, objects))
    traj = [state.positions.copy()]
    for _ in range(gc.horizon - 1):
        traj.append(step_motion(state, gc, rng))
    return np.stack(traj)


def _draw_target(gc: GenConfig, n: int, n_objects: int, rng: np.random.Generator) -> Target:
    members = (n_objects, gc.n_people - 1, 1, 1)
    w = np.array([wt if k > 0 else 0.0 for wt, k in zip(gc.target_class_weights, members)])
    if w.sum() <= 0:
        # every weighted class is empty; wandering is always possible
        w = np.array([0.0, 0.0, 0.0, 1.0])
    cls = TARGET_CLASSES[int(rng.choice(4, p=w / w.sum()))]
    if cls == "object":
        return Target("object", int(rng.integers(n_objects)))
    if cls == "person":
        k = int(rng.integers(gc.n_people - 1))
        return Target("person", k + (k >= n))
    if cls == "camera":
        return Target("camera")
    return Target("wander", -1, float(rng.uniform(-math.pi, math.pi)))


def sample_hold(gc: GenConfig, rng: np.random.Generator) -> int:
    """Geometric hold duration on {1, 2, ...} with mean ``mean_hold_frames``."""
    return int(rng.geometric(1.0 / gc.mean_hold_frames))


def sample_attention_targets(gc: GenConfig, n_objects: int, rng: np.random.Generator
                             ) -> tuple[tuple[Target, ...], ...]:
    """Per person, a semi-Markov sequence of T targets."""
    out = []
    for n in range(gc.n_people):
        seq: list[Target] = []
        while len(seq) < gc.horizon:
            target = _draw_target(gc, n, n_objects, rng)
            seq.extend([target] * sample_hold(gc, rng))
        out.append(tuple(seq[:gc.horizon]))
    return tuple(out)


def target_direction(target: Target, n: int, t: int, traj: np.ndarray,
                     objects: Sequence[GridCell], gc: GenConfig) -> float:
    """Absolute direction from person ``n`` at frame ``t`` to its target."""
    if target.kind == "wander":
        return target.angle
    if target.kind == "object":
        goal = cell_center(objects[target.index], gc.cfg)
    elif target.kind == "camera":
        goal = cell_center(gc.camera_cell, gc.cfg)
    else:
        goal = traj[t, target.index]
    here = traj[t, n]
    return math.atan2(goal[1] - here[1], goal[0] - here[0])


def head_pan_step(prev_pan: float, target_direction: float, gc: GenConfig,
                  rng: np.random.Generator | None = None) -> float:
    """Relax the head pan toward a blend of the gaze direction and the previous pan.

    Both the blend and the relaxation run along the shortest arc.
    """
    goal = wrap_angle(prev_pan + gc.head_blend * wrap_angle(target_direction - prev_pan))
    noise = rng.normal(0.0, gc.pan_noise_sigma) if (rng is not None and gc.pan_noise_sigma > 0) else 0.0
    return wrap_angle(prev_pan + gc.relax_rate * wrap_angle(goal - prev_pan) + noise)


def generate_scenario(gc: GenConfig) -> Scenario:
    rng = np.random.default_rng(gc.seed)
    objects = sample_objects(gc, rng)
    traj = sample_trajectories(gc, objects, rng)
    targets = sample_attention_targets(gc, len(objects), rng)
    pans = np.zeros((gc.horizon, gc.n_people))
    for n in range(gc.n_people):
        prev = target_direction(targets[n][0], n, 0, traj, objects, gc)
        for t in range(gc.horizon):
            prev = head_pan_step(prev, target_direction(targets[n][t], n, t, traj, objects, gc), gc, rng)
            pans[t, n] = prev
    frames = tuple(
        Frame(tuple(PersonState(WorldPoint(*traj[t, n]), pans[t, n]) for n in range(gc.n_people)))
        for t in range(gc.horizon))
    return Scenario(gc.cfg, tuple(objects), gc.camera_cell, frames, targets, gc.seed)


def generate_with_retry(gc: GenConfig, base_seed: int, index: int, max_attempts: int = 10) -> Scenario:
    """Scenario ``index`` of a collection; failed seeds are replaced deterministically."""
    for attempt in range(max_attempts):
        try:
            return generate_scenario(replace(gc, seed=scenario_seed(base_seed, index, attempt)))
        except GenerationError:
            continue
    raise GenerationError(f"scenario {index} failed {max_attempts} seeds")


def validate_scenario(s: Scenario, gc: GenConfig) -> list[str]:
    """Independent check of the scenario invariants; returns violation messages."""
    cfg = s.cfg
    problems = []
    if s.camera_cell in s.objects:
        problems.append("camera cell listed among objects")
    for i, a in enumerate(s.objects):
        ca = cell_center(a, cfg)
        wall = min(ca.x - cfg.x_min, cfg.x_max - ca.x, ca.y - cfg.y_min, cfg.y_max - ca.y)
        if wall > gc.d_edge_max + 1e-12:
            problems.append(f"object {i} is {wall:.3f} m from the nearest wall")
        for j in range(i + 1, len(s.objects)):
            cb = cell_center(s.objects[j], cfg)
            d = math.hypot(ca.x - cb.x, ca.y - cb.y)
            if d < gc.d_obj_min - 1e-12:
                problems.append(f"objects {i},{j} only {d:.3f} m apart")
    n_people = {len(f.persons) for f in s.frames}
    if len(n_people) > 1:
        problems.append("number of people varies over time")
    for t, f in enumerate(s.frames):
        for n, p in enumerate(f.persons):
            x, y = p.position
            if not (cfg.x_min <= x <= cfg.x_max and cfg.y_min <= y <= cfg.y_max):
                problems.append(f"person {n} out of bounds at frame {t}")
            if not -math.pi < p.pan <= math.pi:
                problems.append(f"person {n} pan not wrapped at frame {t}")
    if len(s.latent_targets) != (n_people.pop() if n_people else 0):
        problems.append("latent targets do not cover every person")
    elif any(len(seq) != len(s.frames) for seq in s.latent_targets):
        problems.append("latent targets do not cover every frame")
    return problems
