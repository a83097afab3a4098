"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators needed by the detectors are provided: affine maps, ReLU,
sigmoid, 2D/3D convolutions (3-wide kernels, zero padding 1), max pooling,
nearest-neighbor upsampling, concatenation, MSE, plus Adam and a
finite-difference gradient checker. Tensors carry a leading batch axis for
convolutional ops; unbatched inputs are accepted and treated as batch 1.

Arithmetic runs in float64 unless a :func:`precision` block selects another
floating type (training uses float32 for speed; gradient checks stay in float64).
"""
from __future__ import annotations

import itertools
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import InvalidInputError, ParseError

_working_dtype = [np.dtype(np.float64)]


def working_dtype() -> np.dtype:
    """Floating type of newly created tensors."""
    return _working_dtype[-1]


@contextmanager
def precision(dtype):
    """Create tensors of ``dtype`` (float32 or float64) inside the block."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise InvalidInputError(f"unsupported precision {dtype}")
    _working_dtype.append(dtype)
    try:
        yield
    finally:
        _working_dtype.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.ascontiguousarray(data, dtype=working_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Fill ``.grad`` of every tensor reachable from this one.

        Gradients accumulate, so shared subexpressions receive the sum of
        their contributions.
        """
        if grad is None:
            if self.data.size != 1:
                raise InvalidInputError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, parents=parents if rg else (), backward=backward if rg else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, np.asarray(g).item(), dtype=x.data.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` with ``W`` of shape (out, in); ``x`` is (in,) or (N, in)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or x.data.ndim not in (1, 2):
        raise InvalidInputError(f"dense: cannot apply weights {W.shape} to input {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise InvalidInputError(f"dense: bias shape {b.shape} does not match {W.shape[0]} outputs")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, W.shape[0])
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        out = [gx, g2.T @ x2]
        if b is not None:
            out.append(g2.sum(axis=0))
        return tuple(out)

    return _result(y, parents, back)


def _batched(x: Tensor, nd: int) -> tuple[Tensor, bool]:
    if x.data.ndim == nd + 1:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != nd + 2:
        raise InvalidInputError(f"expected a {nd + 1}D or {nd + 2}D input, got shape {x.shape}")
    return x, False


def _conv(x: Tensor, k: Tensor, b: Tensor | None, nd: int) -> Tensor:
    x, k = as_tensor(x), as_tensor(k)
    x, squeeze = _batched(x, nd)
    N, C = x.shape[:2]
    spatial = x.shape[2:]
    if k.data.ndim != nd + 2 or k.shape[1] != C or k.shape[2:] != (3,) * nd:
        raise InvalidInputError(f"conv{nd}d: kernel {k.shape} incompatible with input {x.shape}")
    O = k.shape[0]
    if b is not None and b.shape != (O,):
        raise InvalidInputError(f"conv{nd}d: bias shape {b.shape} does not match {O} output channels")
    if nd == 3:
        out = _conv3d_shifted(x, k, b)
        return reshape(out, out.shape[1:]) if squeeze else out
    offsets = list(itertools.product(range(3), repeat=nd))
    K = len(offsets)
    P = N * math.prod(spatial)
    pad = [(0, 0)] + [(1, 1)] * nd

    def window(arr, off):
        return arr[(slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))]

    # one (P, K*C) column matrix and a single GEMM; columns are ordered
    # (offset, channel) except for single-channel inputs, where both orders agree
    if C == 1:
        xp = np.pad(x.data[:, 0], pad)
        cols = sliding_window_view(xp, (3,) * nd, axis=tuple(range(1, nd + 1))).reshape(P, K)
    else:
        xp = np.pad(np.moveaxis(x.data, 1, -1), pad + [(0, 0)])
        cols = np.empty((P, K * C), dtype=x.data.dtype)
        cview = cols.reshape((N,) + spatial + (K, C))
        for i, off in enumerate(offsets):
            cview[..., i, :] = window(xp, off)
    kmat = np.ascontiguousarray(np.moveaxis(k.data, 1, -1).reshape(O, K * C).T)
    y = cols @ kmat
    if b is not None:
        y += b.data
    y = np.moveaxis(y.reshape((N,) + spatial + (O,)), -1, 1)
    parents = (x, k) if b is None else (x, k, b)

    def back(g):
        gl = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(P, O)
        gk = np.moveaxis((cols.T @ gl).T.reshape((O,) + (3,) * nd + (C,)), -1, 1)
        gx = None
        if x.requires_grad:
            dcols = (gl @ kmat.T).reshape((N,) + spatial + (K, C))
            dxp = np.zeros((N,) + tuple(s + 2 for s in spatial) + (C,), dtype=dcols.dtype)
            for i, off in enumerate(offsets):
                window(dxp, off)[...] += dcols[..., i, :]
            gx = np.moveaxis(dxp[(slice(None),) + (slice(1, -1),) * nd], -1, 1)
        out = [gx, gk]
        if b is not None:
            out.append(gl.sum(axis=0))
        return tuple(out)

    out = _result(y, parents, back)
    return reshape(out, out.shape[1:]) if squeeze else out


def _conv3d_shifted(x: Tensor, k: Tensor, b: Tensor | None) -> Tensor:
    """3D convolution as a 2D im2col over all padded frames plus time-shifted sums.

    The columns are built once for the T+2 padded frames; a single GEMM against
    the three temporal kernel slices side by side gives three partial outputs
    that are summed with shifts of 0, 1 and 2 frames.
    """
    N, C, T, H, W = x.shape
    O = k.shape[0]
    Tp = T + 2
    offsets = list(itertools.product(range(3), repeat=2))
    P2 = N * Tp * H * W
    xp = np.pad(np.moveaxis(x.data, 1, -1), [(0, 0), (1, 1), (1, 1), (1, 1), (0, 0)])
    if C == 1:
        cols = sliding_window_view(xp[..., 0], (3, 3), axis=(2, 3)).reshape(P2, 9)
    else:
        cols = np.empty((P2, 9 * C), dtype=x.data.dtype)
        cview = cols.reshape(N, Tp, H, W, 9, C)
        for i, (du, dv) in enumerate(offsets):
            cview[..., i, :] = xp[:, :, du:du + H, dv:dv + W]
    # (9C, 3O): column block dt holds the kernel slice at temporal offset dt
    kall = np.ascontiguousarray(
        np.moveaxis(k.data, 1, -1).transpose(1, 0, 2, 3, 4).reshape(3 * O, 9 * C).T)
    z = (cols @ kall).reshape(N, Tp, H, W, 3, O)
    y = z[:, 0:T, ..., 0, :] + z[:, 1:T + 1, ..., 1, :] + z[:, 2:T + 2, ..., 2, :]
    if b is not None:
        y += b.data
    y = np.moveaxis(y, -1, 1)
    parents = (x, k) if b is None else (x, k, b)

    def back(g):
        gl = np.moveaxis(g, 1, -1)
        G = np.zeros((N, Tp, H, W, 3, O), dtype=gl.dtype)
        for dt in range(3):
            G[:, dt:dt + T, ..., dt, :] = gl
        G = G.reshape(P2, 3 * O)
        gk = (cols.T @ G).T.reshape(3, O, 3, 3, C).transpose(1, 4, 0, 2, 3)
        gx = None
        if x.requires_grad:
            dcols = (G @ kall.T).reshape(N, Tp, H, W, 9, C)
            dxp = np.zeros((N, Tp, H + 2, W + 2, C), dtype=dcols.dtype)
            for i, (du, dv) in enumerate(offsets):
                dxp[:, :, du:du + H, dv:dv + W] += dcols[..., i, :]
            gx = np.moveaxis(dxp[:, 1:-1, 1:-1, 1:-1], -1, 1)
        out = [gx, gk]
        if b is not None:
            out.append(gl.reshape(-1, O).sum(axis=0))
        return tuple(out)

    return _result(y, parents, back)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1: (N, C, H, W) -> (N, O, H, W)."""
    return _conv(x, k, b, 2)


def conv3d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1: (N, C, T, H, W) -> (N, O, T, H, W)."""
    return _conv(x, k, b, 3)


def _maxpool(x: Tensor, kernel: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    nd = len(kernel)
    x, squeeze = _batched(x, nd)
    lead = x.shape[:2]
    spatial = x.shape[2:]
    pads = [(-s) % kk for s, kk in zip(spatial, kernel)]
    # odd sizes: replicate the trailing edge so every window is full
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(0, p) for p in pads], mode="edge") if any(pads) else x.data
    out_sp = tuple(s // kk for s, kk in zip(xp.shape[2:], kernel))
    split = lead + tuple(v for pair in zip(out_sp, kernel) for v in pair)
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    win = xp.reshape(split).transpose(perm).reshape(lead + out_sp + (math.prod(kernel),))
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=win.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gp = gw.reshape(lead + out_sp + kernel).transpose(inv).reshape(xp.shape)
        for ax, (s, p) in enumerate(zip(spatial, pads)):
            if p:
                axis = 2 + ax
                tail = np.take(gp, range(s, s + p), axis=axis).sum(axis=axis, keepdims=True)
                edge = [slice(None)] * gp.ndim
                edge[axis] = slice(s - 1, s)
                gp[tuple(edge)] += tail
                keep = [slice(None)] * gp.ndim
                keep[axis] = slice(0, s)
                gp = gp[tuple(keep)]
        return (gp,)

    out = _result(y, (x,), back)
    return reshape(out, out.shape[1:]) if squeeze else out


def maxpool2d(x: Tensor, factor: int = 2) -> Tensor:
    return _maxpool(x, (factor, factor))


def maxpool3d(x: Tensor, kernel: tuple[int, int, int] = (2, 2, 2)) -> Tensor:
    return _maxpool(x, tuple(kernel))


def temporal_global_maxpool(x: Tensor) -> Tensor:
    """Max over the time axis: (N, C, T, H, W) -> (N, C, H, W); ties go to the earliest frame."""
    x = as_tensor(x)
    x, squeeze = _batched(x, 3)
    arg = x.data.argmax(axis=2)
    y = np.take_along_axis(x.data, arg[:, :, None], axis=2)[:, :, 0]

    def back(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        np.put_along_axis(gx, arg[:, :, None], g[:, :, None], axis=2)
        return (gx,)

    out = _result(y, (x,), back)
    return reshape(out, out.shape[1:]) if squeeze else out


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of the last two axes."""
    x = as_tensor(x)
    y = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def back(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor)).sum(axis=(-3, -1)),)

    return _result(y, (x,), back)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise InvalidInputError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _result(np.array(np.mean(diff * diff)), (pred,), lambda g: (g * (2.0 / n) * diff,))


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``params[i].data``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple = ()
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(f: Callable[..., Tensor], x, tolerance: float = 1e-4, h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*x)`` with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` limits the number of coordinates probed per tensor, drawn
    at random from ``rng``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
    rng = rng or np.random.default_rng(0)
    worst = (0.0, None, None, 0.0, 0.0)
    n_checked = 0
    for i, t in enumerate(xs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            fp = f(*xs).item()
            flat[j] = old - h
            fm = f(*xs).item()
            flat[j] = old
            num = (fp - fm) / (2 * h)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n_checked += 1
            if err > worst[0]:
                worst = (err, i, int(j), float(a), float(num))
    for t in xs:
        t.grad = None
    return GradCheckReport(worst[0], n_checked, worst, tolerance)


CHECKPOINT_MAGIC = "EXTGAZE-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model_name: str, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays: a text header, then raw little-endian float64 data in order."""
    lines = [CHECKPOINT_MAGIC, f"version {CHECKPOINT_VERSION}", f"model {model_name}",
             "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise InvalidInputError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr)
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ParseError("truncated header", line=len(header) + 1, path=path)
        header.append(raw[pos:nl].decode("ascii", errors="replace"))
        pos = nl + 1
        if header[-1] == "end":
            break
    if header[0] != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", line=1, path=path)
    try:
        version = int(header[1].split()[1])
    except (IndexError, ValueError):
        raise ParseError("bad version line", line=2, path=path) from None
    if header[1].split()[0] != "version" or version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version line {header[1]!r}", line=2, path=path)
    if not header[2].startswith("model "):
        raise ParseError("missing model line", line=3, path=path)
    model = header[2][len("model "):]
    if not header[3].startswith("meta "):
        raise ParseError("missing meta line", line=4, path=path)
    try:
        meta = json.loads(header[3][len("meta "):])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad meta json: {exc}", line=4, path=path) from None
    tensors = {}
    for lineno, line in enumerate(header[4:-1], start=5):
        parts = line.split()
        try:
            if parts[0] != "tensor":
                raise ValueError
            ndim = int(parts[2])
            shape = tuple(int(d) for d in parts[3:])
            if len(shape) != ndim:
                raise ValueError
        except (IndexError, ValueError):
            raise ParseError(f"bad tensor line {line!r}", line=lineno, path=path) from None
        count = math.prod(shape)
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise ParseError(f"data for tensor {parts[1]} is truncated", path=path)
        tensors[parts[1]] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise ParseError(f"{len(raw) - pos} trailing bytes after tensor data", path=path)
    return model, tensors, meta
