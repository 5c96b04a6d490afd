"""Dense tensors with reverse-mode automatic differentiation.

Everything differentiable in this package (networks, losses, gradient
checks) runs through the primitives defined here. Design constraints:

* no broadcasting except scalar-scale and the per-channel affine baked
  into ``layer_norm``/``conv2d`` bias; all other shapes must match exactly,
* float32 for training, float64 for the finite-difference suite,
* values are immutable once created; the backward pass accumulates
  gradients into per-node buffers on a :class:`Tape` and never touches
  forward data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "constant",
    "wrap",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "absval",
    "hinge",
    "sigmoid",
    "concat_channels",
    "reduce_sum",
    "reduce_mean",
    "masked_mean",
    "upsample2x",
    "conv2d",
    "layer_norm",
    "leaky_relu",
    "log_clamped",
    "finite_difference",
    "gradient_check",
    "GradCheckReport",
]

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class Tensor:
    """Immutable dense n-dimensional value, optionally recorded for backward.

    ``data`` is a read-only numpy array. Interior nodes keep ``(parent, vjp)``
    edges; ``vjp`` maps the output gradient to the parent gradient, both as
    plain ndarrays.
    """

    __slots__ = ("data", "requires_grad", "_parents")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: tuple = ()):
        self.data = data
        self.requires_grad = requires_grad
        self._parents = _parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable tensor. The optimizer replaces the value wholesale via
    :meth:`assign`; graphs recorded against the old value keep referencing
    the old array, so backward replay stays consistent."""

    __slots__ = ("name",)

    def __init__(self, data: np.ndarray, name: str):
        arr = np.array(data, dtype=TRAIN_DTYPE)
        arr.flags.writeable = False
        super().__init__(arr, requires_grad=True)
        self.name = name

    def assign(self, data: np.ndarray) -> None:
        if data.shape != self.data.shape:
            raise ValueError(f"parameter {self.name}: assign shape {data.shape} != {self.data.shape}")
        arr = np.array(data, dtype=self.data.dtype)
        arr.flags.writeable = False
        self.data = arr


def _wrap(data: np.ndarray, requires_grad: bool = False, parents: tuple = ()) -> Tensor:
    if not isinstance(data, np.ndarray):
        # 0-dim results come back as numpy scalars
        data = np.asarray(data)
    data.flags.writeable = False
    return Tensor(data, requires_grad, parents)


def tensor(data, dtype=TRAIN_DTYPE, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from array-like data; rejects non-finite values."""
    arr = np.array(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains NaN or Inf")
    return _wrap(arr, requires_grad=requires_grad)


def wrap(arr: np.ndarray) -> Tensor:
    """Zero-copy constant tensor around an existing array (marked read-only).
    For internal hot paths where the data is already known finite."""
    return _wrap(arr)


def constant(data, dtype=TRAIN_DTYPE) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=False)


def _record(out_data: np.ndarray, edges: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Wrap an op result, keeping only edges to grad-requiring parents."""
    kept = tuple((p, vjp) for p, vjp in edges if p.requires_grad)
    return _wrap(out_data, requires_grad=bool(kept), parents=kept)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _record(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * a.dtype.type(s)
    return _record(out, [(a, lambda g: g * a.dtype.type(s))])


def absval(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record(np.abs(a.data), [(a, lambda g: g * sign)])


def hinge(a: Tensor) -> Tensor:
    """max(x, 0); subgradient at the kink takes the zero branch."""
    pos = a.data > 0
    return _record(np.maximum(a.data, 0), [(a, lambda g: g * pos)])


def sigmoid(a: Tensor) -> Tensor:
    z = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype)
    return _record(s, [(a, lambda g: g * s * (1.0 - s))])


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in [0, 1), got {slope}")
    pos = a.data >= 0
    out = np.where(pos, a.data, a.dtype.type(slope) * a.data)
    return _record(out, [(a, lambda g: g * np.where(pos, a.dtype.type(1.0), a.dtype.type(slope)))])


def log_clamped(a: Tensor, eps: float = 1e-7) -> Tensor:
    """log(clip(x, eps, 1-eps)); gradient is zero wherever the clamp bites."""
    lo, hi = a.dtype.type(eps), a.dtype.type(1.0 - eps)
    clipped = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _record(np.log(clipped), [(a, lambda g: g * inside / clipped)])


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (C,H,W) tensors along the channel axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: empty input")
    base = parts[0]
    for p in parts[1:]:
        if p.data.ndim != base.data.ndim or p.shape[1:] != base.shape[1:]:
            raise ValueError(f"concat_channels: trailing dims differ, {p.shape} vs {base.shape}")
        if p.dtype != base.dtype:
            raise ValueError("concat_channels: dtype mismatch")
    out = np.concatenate([p.data for p in parts], axis=0)
    edges = []
    off = 0
    for p in parts:
        lo, hi = off, off + p.shape[0]
        edges.append((p, lambda g, lo=lo, hi=hi: g[lo:hi]))
        off = hi
    return _record(out, edges)


def reduce_sum(a: Tensor) -> Tensor:
    shp, dt = a.shape, a.dtype
    return _record(np.asarray(a.data.sum(), dtype=dt),
                   [(a, lambda g: np.broadcast_to(g, shp).astype(dt, copy=False))])


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    shp, dt = a.shape, a.dtype
    return _record(np.asarray(a.data.mean(dtype=dt), dtype=dt),
                   [(a, lambda g: np.broadcast_to(g / n, shp).astype(dt, copy=False))])


def masked_mean(a: Tensor, mask: Tensor) -> Tensor:
    """Mean of ``a`` over positions where the 0/1 mask is 1; 0 if mask empty."""
    _check_same(a, mask, "masked_mean")
    if mask.requires_grad:
        raise ValueError("masked_mean: mask must not require grad")
    m = mask.data
    count = float(m.sum())
    if count == 0.0:
        return _record(np.asarray(0.0, dtype=a.dtype), [(a, lambda g: np.zeros(a.shape, a.dtype))])
    out = np.asarray((a.data * m).sum(dtype=a.dtype) / a.dtype.type(count), dtype=a.dtype)
    return _record(out, [(a, lambda g: (g / a.dtype.type(count)) * m)])


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsample of a (C,H,W) tensor."""
    if a.data.ndim != 3:
        raise ValueError(f"upsample2x: expected (C,H,W), got {a.shape}")
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)
    return _record(out, [(a, lambda g: g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))])


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of (Cin,H,W) with (Cout,Cin,kh,kw), zero padding."""
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ValueError(
            f"conv2d: expected input (Cin,H,W), kernel (Cout,Cin,kh,kw), bias (Cout,); "
            f"got {x.shape}, {kernel.shape}, {bias.shape}")
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    if bias.shape[0] != cout:
        raise ValueError(f"conv2d: bias has {bias.shape[0]} entries, kernel has {cout} output channels")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((cin, hp, wp), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = np.empty((cin, kh, kw, hout, wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * hout:stride, j:j + stride * wout:stride]
    cols2 = cols.reshape(cin * kh * kw, hout * wout)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (kmat @ cols2 + bias.data[:, None]).reshape(cout, hout, wout)

    def vjp_x(g):
        gcols = (kmat.T @ g.reshape(cout, -1)).reshape(cin, kh, kw, hout, wout)
        gpad = np.zeros((cin, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i:i + stride * hout:stride, j:j + stride * wout:stride] += gcols[:, i, j]
        if padding:
            return gpad[:, padding:-padding, padding:-padding]
        return gpad

    def vjp_kernel(g):
        return (g.reshape(cout, -1) @ cols2.T).reshape(kernel.shape)

    def vjp_bias(g):
        return g.reshape(cout, -1).sum(axis=1)

    return _record(out, [(x, vjp_x), (kernel, vjp_kernel), (bias, vjp_bias)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize a (C,H,W) tensor over all its elements, then apply a
    per-channel affine gain*x + bias."""
    if eps <= 0:
        raise ValueError(f"layer_norm: epsilon must be > 0, got {eps}")
    if x.data.ndim != 3:
        raise ValueError(f"layer_norm: expected (C,H,W), got {x.shape}")
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"layer_norm: gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    dt = x.dtype
    n = x.data.size
    mu = x.data.mean(dtype=dt)
    var = np.mean((x.data - mu) ** 2, dtype=dt)
    inv = dt.type(1.0) / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mu) * inv
    out = gain.data[:, None, None] * xhat + bias.data[:, None, None]

    def vjp_x(g):
        dxhat = g * gain.data[:, None, None]
        return inv * (dxhat - dxhat.mean(dtype=dt) - xhat * np.mean(dxhat * xhat, dtype=dt))

    return _record(out, [
        (x, vjp_x),
        (gain, lambda g: (g * xhat).sum(axis=(1, 2))),
        (bias, lambda g: g.sum(axis=(1, 2))),
    ])


# ---------------------------------------------------------------------------
# reverse pass

class Tape:
    """Replay record of one backward pass.

    Holds the reverse topological order of the graph below the root and the
    accumulated gradient buffer of every leaf that requires grad.
    """

    def __init__(self, root: Tensor):
        if root.data.ndim != 0:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        self.root = root
        self._order: list[Tensor] = []
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}
        self._toposort()
        self._run()

    def _toposort(self) -> None:
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self._order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def _run(self) -> None:
        grads = self._grads
        grads[id(self.root)] = np.ones((), dtype=self.root.dtype)
        for node in reversed(self._order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    grads[id(node)] = g
                    self._leaves[id(node)] = node
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                buf = grads.get(id(parent))
                if buf is None:
                    grads[id(parent)] = pg
                else:
                    grads[id(parent)] = buf + pg

    def grad(self, leaf: Tensor) -> np.ndarray:
        """Gradient of the root w.r.t. ``leaf``; zeros if the leaf was not reached."""
        if not leaf.requires_grad:
            raise ValueError("grad requested for a tensor with requires_grad=False")
        g = self._grads.get(id(leaf))
        if g is None:
            return np.zeros(leaf.shape, dtype=leaf.dtype)
        return np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)

    def leaves(self) -> Iterable[Tensor]:
        return self._leaves.values()


def backward(root: Tensor) -> Tape:
    return Tape(root)


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst_index: tuple[int, ...]
    analytic_at_worst: float
    numeric_at_worst: float


def finite_difference(fn: Callable[[Tensor], Tensor], point: Tensor,
                      step: float = 1e-4, mode: str = "central") -> np.ndarray:
    """Per-component finite differences of a scalar tensor function."""
    base = point.data.astype(CHECK_DTYPE)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)

    def evaluate(arr) -> float:
        v = fn(_wrap(np.array(arr, dtype=CHECK_DTYPE))).data
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("finite_difference: function value is not finite")
        return v

    f0 = evaluate(base) if mode != "central" else 0.0
    for idx in range(base.size):
        plus = base.copy().reshape(-1)
        plus[idx] += step
        minus = base.copy().reshape(-1)
        minus[idx] -= step
        if mode == "central":
            flat[idx] = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * step)
        elif mode == "forward":
            flat[idx] = (evaluate(plus.reshape(base.shape)) - f0) / step
        elif mode == "backward":
            flat[idx] = (f0 - evaluate(minus.reshape(base.shape))) / step
        else:
            raise ValueError(f"finite_difference: unknown mode {mode!r}")
    return grad


def gradient_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                   step: float = 1e-4, tolerance: float = 1e-4,
                   mode: str = "central", atol_scale: float = 1e-6) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``fn`` at ``point`` against
    finite differences.

    Relative error per component is |a - f| / max(|a|, |f|, atol_scale), so
    components whose true gradient is zero are compared absolutely at the
    atol_scale floor. Requires a float64 point.
    """
    if point.dtype != CHECK_DTYPE:
        raise ValueError("gradient_check requires a float64 point")
    leaf = _wrap(point.data.astype(CHECK_DTYPE), requires_grad=True)
    value = fn(leaf)
    if not math.isfinite(float(value.data)):
        raise ValueError("gradient_check: function value is not finite")
    analytic = backward(value).grad(leaf)
    numeric = finite_difference(fn, point, step=step, mode=mode)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol_scale)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    widx = np.unravel_index(worst, analytic.shape) if analytic.ndim else ()
    max_rel = float(rel.reshape(-1)[worst]) if rel.size else 0.0
    return GradCheckReport(
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=max_rel <= tolerance,
        worst_index=tuple(int(i) for i in widx),
        analytic_at_worst=float(analytic.reshape(-1)[worst]) if rel.size else 0.0,
        numeric_at_worst=float(numeric.reshape(-1)[worst]) if rel.size else 0.0,
    )
