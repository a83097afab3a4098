"""Data pipelines and experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import GenerationError, InvalidInputError
from .evaluation import EvalReport, compute_metrics, heatmap_mse, match_detections
from .grid import GridCell, GridConfig
from .models import (HEURISTIC_KINDS, LEARNED_KINDS, AdamConfig, ModelSpec, TrainedModel, heuristic_map,
                     predict_batch, train)
from .peaks import PeakConfig, extract_peaks
from .render import DEFAULT_EPSILON, DEFAULT_SIGMA_OMEGA, frame_arrays, object_heatmap
from .simgen import GenConfig, Scenario, generate_scenario, scenario_seed

log = logging.getLogger(__name__)

# pseudo-method: peak extraction on the ground-truth object heat-map
TRUTH = "Truth"

# Adam step sizes used when none is given, tuned for the 200-step desk budget
DEFAULT_LEARNING_RATES = {
    "LinearReg": 3e-3, "FC1": 3e-3, "FC3": 3e-3, "Mean2DEnc": 3e-3,
    "Enc2D": 3e-3, "Enc3D": 1e-3, "UNet3D2D": 1e-3,
}


@dataclass(frozen=True)
class DataConfig:
    """How training and test scenarios are drawn and rendered.

    People and object counts are drawn uniformly per scenario from the
    inclusive ranges; every other generator parameter comes from ``gen``.
    """

    gen: GenConfig = field(default_factory=GenConfig)
    n_people: tuple[int, int] = (2, 2)
    n_objects: tuple[int, int] = (1, 3)
    epsilon: float = DEFAULT_EPSILON
    sigma_omega: float = DEFAULT_SIGMA_OMEGA

    def __post_init__(self):
        for lo, hi in (self.n_people, self.n_objects):
            if lo > hi:
                raise InvalidInputError("count ranges must satisfy lo <= hi")
        if self.n_people[0] < 1 or self.n_objects[0] < 0:
            raise InvalidInputError("need >= 1 person and >= 0 objects")

    @property
    def cfg(self) -> GridConfig:
        return self.gen.cfg

    @property
    def T(self) -> int:
        return self.gen.horizon

    def with_horizon(self, T: int) -> "DataConfig":
        return replace(self, gen=replace(self.gen, horizon=T))


def sample_scenario(dc: DataConfig, base_seed: int, index: int, max_attempts: int = 10) -> Scenario:
    """Scenario ``index`` of the collection seeded by ``base_seed``."""
    rng = np.random.default_rng(scenario_seed(base_seed, index))
    n = int(rng.integers(dc.n_people[0], dc.n_people[1] + 1))
    m = int(rng.integers(dc.n_objects[0], dc.n_objects[1] + 1))
    gc = replace(dc.gen, n_people=n, n_objects=m)
    for attempt in range(1, max_attempts + 1):
        try:
            return generate_scenario(replace(gc, seed=scenario_seed(base_seed, index, attempt)))
        except GenerationError:
            continue
    raise GenerationError(f"scenario {index} of collection {base_seed} failed {max_attempts} seeds")


@dataclass
class Sample:
    gaze: np.ndarray            # (T, s_u, s_v)
    intersections: np.ndarray   # (T, s_u, s_v)
    omega: np.ndarray           # (s_u, s_v)
    objects: list[GridCell]


def render_sample(s: Scenario, epsilon: float = DEFAULT_EPSILON,
                  sigma_omega: float = DEFAULT_SIGMA_OMEGA) -> Sample:
    gaze, inter = frame_arrays(s.frames, s.cfg, epsilon)
    omega = object_heatmap(s.objects, s.cfg, sigma_omega).values
    return Sample(gaze, inter, np.array(omega), list(s.objects))


class SyntheticStream:
    """Online training data: batch ``k`` holds scenarios ``k*B .. k*B + B - 1``."""

    def __init__(self, dc: DataConfig, seed: int):
        self.dc = dc
        self.seed = seed

    def sample(self, index: int) -> Sample:
        return render_sample(sample_scenario(self.dc, self.seed, index), self.dc.epsilon, self.dc.sigma_omega)

    def batch(self, step: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        items = [self.sample(step * batch_size + i) for i in range(batch_size)]
        return np.stack([s.gaze for s in items]), np.stack([s.omega for s in items])


class CachedStream:
    """Memoizes another source's batches so several models can share one data stream."""

    def __init__(self, source):
        self.source = source
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def batch(self, step: int, batch_size: int):
        key = (step, batch_size)
        if key not in self._cache:
            g, o = self.source.batch(step, batch_size)
            self._cache[key] = (g.astype(np.float32), o)
        return self._cache[key]


class ArrayDataset:
    """A fixed set of (sequence, object map) pairs, reshuffled every epoch from ``seed``."""

    def __init__(self, gaze: np.ndarray, omega: np.ndarray, seed: int = 0):
        self.gaze = np.asarray(gaze, dtype=np.float64)
        self.omega = np.asarray(omega, dtype=np.float64)
        if len(self.gaze) != len(self.omega) or len(self.gaze) == 0:
            raise InvalidInputError("dataset needs matching, non-empty inputs and targets")
        self.seed = seed

    def __len__(self):
        return len(self.gaze)

    def batch(self, step: int, batch_size: int):
        n = len(self)
        idx = []
        pos = step * batch_size
        while len(idx) < batch_size:
            epoch, offset = divmod(pos, n)
            perm = np.random.default_rng([self.seed, epoch]).permutation(n)
            take = min(batch_size - len(idx), n - offset)
            idx.extend(perm[offset:offset + take])
            pos += take
        idx = np.array(idx)
        return self.gaze[idx], self.omega[idx]


def build_test_set(dc: DataConfig, seed: int, count: int) -> list[Sample]:
    stream = SyntheticStream(dc, seed)
    return [stream.sample(i) for i in range(count)]


def evaluate_method(method, test_set: Sequence[Sample], cfg: GridConfig,
                    pc: PeakConfig = PeakConfig(), batch_size: int = 50) -> EvalReport:
    """Score a trained model, a heuristic name, or ``TRUTH`` on a test set."""
    matches, mses = [], []
    if isinstance(method, str):
        for s in test_set:
            if method == TRUTH:
                m = s.omega
            elif method in HEURISTIC_KINDS:
                m = heuristic_map(method, s.gaze, s.intersections)
            else:
                raise InvalidInputError(f"unknown method {method!r}")
            matches.append(match_detections(extract_peaks(m, pc), s.objects, cfg))
        return compute_metrics(matches)
    for start in range(0, len(test_set), batch_size):
        chunk = test_set[start:start + batch_size]
        seqs = np.stack([s.gaze for s in chunk])
        preds = predict_batch(method, seqs)
        raw = predict_batch(method, seqs, rescale=False) if method.spec.kind == "LinearReg" else preds
        for pred, r, s in zip(preds, raw, chunk):
            matches.append(match_detections(extract_peaks(pred, pc), s.objects, cfg))
            mses.append(heatmap_mse(r, s.omega))
    return compute_metrics(matches, mses)


def zero_predictor_mse(test_set: Sequence[Sample]) -> float:
    return float(np.mean([np.mean(s.omega ** 2) for s in test_set]))


@dataclass
class RunResult:
    kind: str
    seed: int
    T: int
    report: EvalReport
    model: TrainedModel | None = None
    seconds: float = 0.0


def default_optim(kind: str) -> AdamConfig:
    return AdamConfig(lr=DEFAULT_LEARNING_RATES.get(kind, AdamConfig.lr))


def train_model(kind: str, dc: DataConfig, seed: int, steps: int, batch_size: int,
                optim: AdamConfig | None = None, channels=(16, 32, 64), source=None,
                progress: Callable | None = None) -> TrainedModel:
    """Train one model; data comes from ``source`` or from the online stream seeded by ``seed``."""
    spec = ModelSpec(kind, dc.cfg.s_u, dc.cfg.s_v, dc.T, tuple(channels), seed)
    source = source or SyntheticStream(dc, train_data_seed(seed))
    return train(spec, source, steps, batch_size, optim or default_optim(kind), progress=progress)


def train_data_seed(seed: int) -> int:
    return 1_000_000 + int(seed)


def test_data_seed(seed: int) -> int:
    return 2_000_000 + int(seed)


def run_suite(kinds: Sequence[str], seeds: Sequence[int], dc: DataConfig, steps: int,
              batch_size: int, test_set: Sequence[Sample], pc: PeakConfig = PeakConfig(),
              optim: AdamConfig | dict | None = None, channels=(16, 32, 64),
              keep_models: bool = False) -> list[RunResult]:
    """Train every learned kind for every seed and evaluate all kinds on ``test_set``.

    Kinds trained with the same seed share one cached training stream.
    ``optim`` may map kinds to their own Adam settings; kinds it leaves out
    (or all kinds, when it is None) use ``default_optim``.
    """
    results = []
    for seed in seeds:
        stream = SyntheticStream(dc, train_data_seed(seed))
        if sum(k in LEARNED_KINDS for k in kinds) > 1:
            stream = CachedStream(stream)
        for kind in kinds:
            t0 = time.perf_counter()
            if kind in HEURISTIC_KINDS or kind == TRUTH:
                report = evaluate_method(kind, test_set, dc.cfg, pc)
                model = None
            else:
                opt = optim.get(kind) if isinstance(optim, dict) else optim
                opt = opt or default_optim(kind)
                model = train_model(kind, dc, seed, steps, batch_size, opt, channels, source=stream)
                report = evaluate_method(model, test_set, dc.cfg, pc)
            dt = time.perf_counter() - t0
            log.info("%s seed=%d T=%d f1=%.3f (%.1fs)", kind, seed, dc.T, report.f1, dt)
            results.append(RunResult(kind, seed, dc.T, report, model if keep_models else None, dt))
    return results


def summarize(results: Sequence[RunResult], attr: str = "f1") -> dict[tuple[str, int], tuple[float, float, int]]:
    """(kind, T) -> (mean, std, count) of a report attribute over seeds."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in results:
        groups.setdefault((r.kind, r.T), []).append(getattr(r.report, attr))
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


def bench_T(kinds: Sequence[str], T_values: Sequence[int], seeds: Sequence[int], dc: DataConfig,
            steps: int, batch_size: int, test_count: int, test_seed: int = 0,
            pc: PeakConfig = PeakConfig(), optim: AdamConfig | dict | None = None,
            channels=(16, 32, 64)) -> list[RunResult]:
    """Re-train and evaluate each kind at each sequence length."""
    results = []
    for T in T_values:
        dcT = dc.with_horizon(int(T))
        test_set = build_test_set(dcT, test_data_seed(test_seed), test_count)
        results += run_suite(kinds, seeds, dcT, steps, batch_size, test_set, pc, optim, channels)
    return results
