"""The detectors: two heuristics, three regression baselines, four encoder/decoders."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from . import tensor as tt
from .errors import InvalidInputError, TrainingError
from .grid import GridCell, GridConfig, HeatMap
from .peaks import PeakConfig, extract_peaks
from .render import GazeSequence

HEURISTIC_KINDS = ("Cone", "Intersect")
MEAN_INPUT_KINDS = ("LinearReg", "FC1", "FC3", "Mean2DEnc")
SEQUENCE_INPUT_KINDS = ("Enc2D", "Enc3D", "UNet3D2D")
LEARNED_KINDS = MEAN_INPUT_KINDS + SEQUENCE_INPUT_KINDS
ENCODER_KINDS = ("Mean2DEnc",) + SEQUENCE_INPUT_KINDS
ALL_KINDS = HEURISTIC_KINDS + LEARNED_KINDS

# names used in reports, following the published table
DISPLAY_NAMES = {
    "Cone": "Cone", "Intersect": "Intersect", "LinearReg": "Linear Reg.", "FC1": "1-FC",
    "FC3": "3-FC", "Mean2DEnc": "Mean-2D-Enc", "Enc2D": "2D-Enc", "Enc3D": "3D-Enc",
    "UNet3D2D": "3D/2D U-Net",
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    s_u: int = 32
    s_v: int = 32
    T: int = 20
    channels: tuple[int, int, int] = (16, 32, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ALL_KINDS:
            raise InvalidInputError(f"unknown model kind {self.kind!r}; choose from {', '.join(ALL_KINDS)}")
        if self.s_u < 2 or self.s_v < 2 or self.T < 1:
            raise InvalidInputError("grid must be at least 2x2 and T >= 1")
        if self.kind in ENCODER_KINDS:
            if self.s_u % 8 or self.s_v % 8:
                raise InvalidInputError(f"{self.kind} needs grid sides divisible by 8, got {self.s_u}x{self.s_v}")
            if len(self.channels) != 3 or min(self.channels) < 1:
                raise InvalidInputError("channels must be three positive widths")

    @property
    def uses_sequence(self) -> bool:
        return self.kind in SEQUENCE_INPUT_KINDS

    @property
    def is_heuristic(self) -> bool:
        return self.kind in HEURISTIC_KINDS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], d["s_u"], d["s_v"], d["T"], tuple(d["channels"]), d["seed"])


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, tt.Tensor] = field(default_factory=dict)
    log: list[float] = field(default_factory=list)

    def parameter_list(self) -> list[tt.Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class BatchSource(Protocol):
    def batch(self, step: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Return gaze sequences (B, T, s_u, s_v) and object heat-maps (B, s_u, s_v)."""


def _uniform(rng, shape, fan_in, gain):
    bound = math.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


OUTPUT_BIAS_INIT = math.log(0.02 / 0.98)


def build(spec: ModelSpec) -> TrainedModel:
    """Initialize parameters (fan-in scaled uniform weights, zero biases) from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    P: dict[str, np.ndarray] = {}
    D = spec.s_u * spec.s_v
    relu_gain, out_gain = 6.0, 3.0

    def dense_layer(name, n_in, n_out, gain):
        P[f"{name}.W"] = _uniform(rng, (n_out, n_in), n_in, gain)
        P[f"{name}.b"] = np.zeros(n_out)

    def conv_layer(name, c_in, c_out, nd, gain):
        fan_in = c_in * 3 ** nd
        P[f"{name}.k"] = _uniform(rng, (c_out, c_in) + (3,) * nd, fan_in, gain)
        P[f"{name}.b"] = np.zeros(c_out)

    kind = spec.kind
    if kind in HEURISTIC_KINDS:
        pass
    elif kind == "LinearReg":
        dense_layer("out", D, D, out_gain)
    elif kind in ("FC1", "FC3"):
        depth = 1 if kind == "FC1" else 3
        for i in range(depth):
            dense_layer(f"fc{i + 1}", D, D, relu_gain)
        dense_layer("out", D, D, out_gain)
    else:
        c1, c2, c3 = spec.channels
        nd = 3 if kind in ("Enc3D", "UNet3D2D") else 2
        c_in = spec.T if kind == "Enc2D" else 1
        for i, (a, b) in enumerate(((c_in, c1), (c1, c2), (c2, c3))):
            conv_layer(f"enc{i + 1}", a, b, nd, relu_gain)
        skip = kind == "UNet3D2D"
        conv_layer("dec1", c3 + (c3 if skip else 0), c2, 2, relu_gain)
        conv_layer("dec2", c2 + (c2 if skip else 0), c1, 2, relu_gain)
        conv_layer("dec3", c1 + (c1 if skip else 0), 1, 2, out_gain)
    # start sigmoid outputs near the sparse object-map base rate instead of 0.5
    out_bias = {"FC1": "out.b", "FC3": "out.b"}.get(kind, "dec3.b")
    if kind in LEARNED_KINDS and kind != "LinearReg":
        P[out_bias][:] = OUTPUT_BIAS_INIT
    params = {name: tt.parameter(arr, name=name) for name, arr in P.items()}
    return TrainedModel(spec, params)


def model_input(spec: ModelSpec, sequences: np.ndarray) -> np.ndarray:
    """Select the input a model consumes from a (B, T, s_u, s_v) batch of gaze sequences."""
    seq = np.asarray(sequences)
    if seq.ndim != 4 or seq.shape[2:] != (spec.s_u, spec.s_v):
        raise InvalidInputError(f"expected gaze sequences (B, T, {spec.s_u}, {spec.s_v}), got {seq.shape}")
    if spec.uses_sequence:
        if seq.shape[1] != spec.T:
            raise InvalidInputError(f"{spec.kind} was built for T={spec.T}, got T={seq.shape[1]}")
        return seq
    return seq.mean(axis=1)


def forward(model: TrainedModel, x: np.ndarray, skip_scale: float = 1.0) -> tt.Tensor:
    """Raw network output (B, s_u, s_v) for a batch of model inputs.

    ``x`` is (B, s_u, s_v) mean maps or (B, T, s_u, s_v) sequences depending on
    the kind. ``skip_scale`` multiplies the U-Net skip tensors (0 disables them).
    """
    spec = model.spec
    P = model.params
    kind = spec.kind
    if kind in HEURISTIC_KINDS:
        raise InvalidInputError(f"{kind} has no network")
    x = np.asarray(x)
    want = (spec.T, spec.s_u, spec.s_v) if spec.uses_sequence else (spec.s_u, spec.s_v)
    if x.shape[1:] != want:
        raise InvalidInputError(f"{kind} expects inputs of shape (B, {', '.join(map(str, want))}), got {x.shape}")
    B = x.shape[0]
    D = spec.s_u * spec.s_v
    inp = tt.Tensor(x)
    if kind in ("LinearReg", "FC1", "FC3"):
        h = tt.reshape(inp, (B, D))
        depth = {"LinearReg": 0, "FC1": 1, "FC3": 3}[kind]
        for i in range(depth):
            h = tt.relu(tt.dense(h, P[f"fc{i + 1}.W"], P[f"fc{i + 1}.b"]))
        h = tt.dense(h, P["out.W"], P["out.b"])
        if kind != "LinearReg":
            h = tt.sigmoid(h)
        return tt.reshape(h, (B, spec.s_u, spec.s_v))

    skips = []
    if kind in ("Mean2DEnc", "Enc2D"):
        h = tt.reshape(inp, (B, 1, spec.s_u, spec.s_v)) if kind == "Mean2DEnc" else inp
        for i in range(3):
            h = tt.relu(tt.conv2d(h, P[f"enc{i + 1}.k"], P[f"enc{i + 1}.b"]))
            h = tt.maxpool2d(h, 2)
    else:
        h = tt.reshape(inp, (B, 1, spec.T, spec.s_u, spec.s_v))
        for i in range(3):
            h = tt.relu(tt.conv3d(h, P[f"enc{i + 1}.k"], P[f"enc{i + 1}.b"]))
            if kind == "UNet3D2D":
                skips.append(tt.temporal_global_maxpool(h))
            h = tt.maxpool3d(h, (2, 2, 2))
        h = tt.temporal_global_maxpool(h)
    for i in range(3):
        h = tt.upsample2d(h, 2)
        if skips:
            s = skips[2 - i]
            h = tt.concat([h, s if skip_scale == 1.0 else tt.scale(s, skip_scale)], axis=1)
        h = tt.conv2d(h, P[f"dec{i + 1}.k"], P[f"dec{i + 1}.b"])
        h = tt.relu(h) if i < 2 else tt.sigmoid(h)
    return tt.reshape(h, (B, spec.s_u, spec.s_v))


def rescale01(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def predict_batch(model: TrainedModel, sequences: np.ndarray, rescale: bool = True) -> np.ndarray:
    """Estimated object heat-maps (B, s_u, s_v) in [0, 1] for a batch of gaze sequences.

    LinearReg output is min-max rescaled unless ``rescale`` is False, in which
    case it is only clipped (that is the map its training loss was measured on).
    """
    raw = forward(model, model_input(model.spec, sequences)).data
    if model.spec.kind == "LinearReg" and rescale:
        return np.stack([rescale01(r) for r in raw])
    return np.clip(raw, 0.0, 1.0)


def _as_sequence_array(model: TrainedModel, inp) -> np.ndarray:
    spec = model.spec
    if isinstance(inp, GazeSequence):
        return inp.values[None]
    if isinstance(inp, HeatMap):
        if spec.uses_sequence:
            raise InvalidInputError(f"{spec.kind} needs a gaze sequence, got a single map")
        return inp.values[None, None]
    arr = np.asarray(inp, dtype=np.float64)
    if arr.ndim == 2:
        if spec.uses_sequence:
            raise InvalidInputError(f"{spec.kind} needs a gaze sequence, got a single map")
        return arr[None, None]
    if arr.ndim == 3:
        return arr[None]
    raise InvalidInputError(f"cannot interpret input of shape {arr.shape}")


def predict(model: TrainedModel, inp) -> HeatMap:
    """Estimated object heat-map for one input.

    Mean-input kinds take a mean gaze map (a full sequence is averaged first);
    sequence kinds take the whole gaze sequence.
    """
    spec = model.spec
    if spec.is_heuristic:
        raise InvalidInputError(f"{spec.kind} is a heuristic; use detect()")
    seq = _as_sequence_array(model, inp)
    cfg = inp.cfg if isinstance(inp, GazeSequence) else (
        inp.config if isinstance(inp, HeatMap) else GridConfig(spec.s_u, spec.s_v))
    return HeatMap(cfg, predict_batch(model, seq)[0])


def heuristic_map(kind: str, gaze: np.ndarray, intersections: np.ndarray | None = None) -> np.ndarray:
    """Map the heuristics search for peaks: mean gaze (Cone) or mean intersection (Intersect)."""
    if kind == "Cone":
        return np.asarray(gaze).mean(axis=0)
    if kind == "Intersect":
        if intersections is None:
            raise InvalidInputError("Intersect needs per-frame intersection maps")
        return np.asarray(intersections).mean(axis=0)
    raise InvalidInputError(f"{kind} is not a heuristic")


def detect(model: TrainedModel, inp, pc: PeakConfig = PeakConfig(),
           intersections: np.ndarray | None = None) -> list[GridCell]:
    """Object cells found by ``model``; heuristics run peak extraction on their own map."""
    if model.spec.is_heuristic:
        gaze = inp.values if isinstance(inp, GazeSequence) else np.asarray(inp)
        return extract_peaks(heuristic_map(model.spec.kind, gaze, intersections), pc)
    return extract_peaks(predict(model, inp), pc)


def loss_and_grads(model: TrainedModel, x: np.ndarray, target: np.ndarray) -> tuple[float, list]:
    params = model.parameter_list()
    for p in params:
        p.grad = None
    loss = tt.mse_loss(forward(model, x), target)
    loss.backward()
    return loss.item(), [p.grad for p in params]


def train(spec: ModelSpec, data: BatchSource, steps: int = 200, batch_size: int = 32,
          optim: AdamConfig = AdamConfig(), model: TrainedModel | None = None,
          progress=None, dtype=np.float32) -> TrainedModel:
    """Adam on the MSE between network output and object heat-maps.

    Arithmetic runs in ``dtype`` (float32 by default, for speed); the returned
    parameters are float64 either way. ``progress`` is an optional callable
    ``(step, loss)`` invoked after each step.
    """
    if spec.is_heuristic:
        raise InvalidInputError(f"{spec.kind} has nothing to train")
    if steps < 0 or batch_size < 1:
        raise InvalidInputError("steps must be >= 0 and batch_size >= 1")
    model = model or build(spec)
    state = tt.AdamState()
    params = model.parameter_list()
    try:
        with tt.precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
            for step in range(steps):
                seqs, targets = data.batch(step, batch_size)
                x = model_input(spec, seqs)
                loss, grads = loss_and_grads(model, x, np.asarray(targets, dtype=dtype))
                if not math.isfinite(loss):
                    raise TrainingError(f"{spec.kind}: non-finite loss {loss} at step {step}")
                tt.adam_step(params, grads, state, optim.lr, optim.beta1, optim.beta2, optim.eps)
                model.log.append(loss)
                if progress is not None:
                    progress(step, loss)
    finally:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
    return model


def save_model(model: TrainedModel, path):
    tt.save_checkpoint(path, model.spec.kind, {k: p.data for k, p in model.params.items()},
                       {"spec": model.spec.to_dict()})


def load_model(path) -> TrainedModel:
    kind, arrays, meta = tt.load_checkpoint(path)
    try:
        spec = ModelSpec.from_dict(meta["spec"])
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"checkpoint {path} lacks a model spec: {exc}") from None
    if spec.kind != kind:
        raise InvalidInputError(f"checkpoint model line {kind!r} disagrees with spec kind {spec.kind!r}")
    model = build(spec)
    if set(arrays) != set(model.params):
        raise InvalidInputError(f"checkpoint tensors {sorted(arrays)} do not match {spec.kind}")
    for name, arr in arrays.items():
        if arr.shape != model.params[name].shape:
            raise InvalidInputError(f"tensor {name} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name].data = np.ascontiguousarray(arr)
    return model


def write_loss_log(model: TrainedModel, path):
    with open(path, "w") as fh:
        fh.write("step\tloss\n")
        for i, loss in enumerate(model.log):
            fh.write(f"{i}\t{loss!r}\n")
