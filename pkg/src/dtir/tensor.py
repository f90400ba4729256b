"""Dense float32 tensors with a reverse-mode tape, plus Adam.

Only the operations the restoration network and its losses need are
provided. Elementwise binary ops require identical shapes; broadcasting is
explicit through :func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericsError, ShapeError

F32 = np.float32
F64 = np.float64

_grad_enabled = True
_dtype = F32  # storage precision; float64 only inside oracle_precision()


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference, matching, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def oracle_precision():
    """Store values in float64 inside the block.

    Used by :func:`finite_diff_grad` so the numerical reference is not
    limited by float32 rounding of the very outputs it differences.
    """
    global _dtype
    prev = _dtype
    _dtype = F64
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=_dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self)) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full(like.shape, x, dtype=F32))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = np.asarray(out, dtype=_dtype)
    if not np.isfinite(out).all():
        raise NumericsError(f"non-finite value produced by {op}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(out, True, op=op, parents=tuple(parents), backward=backward)
    return Tensor(out, False, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    if (bd == 0).any():
        raise NumericsError("division by zero")
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = F32(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + F32(c), (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, F32(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "silu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericsError("log of non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if (x < 0).any():
        raise NumericsError("sqrt of negative value")
    r = np.sqrt(x)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(r > 0, g / (2 * r), F32(0)),)

    return _make(r, (a,), bw, "sqrt")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * g * x,), "square")


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


# ---------------------------------------------------------------------------
# reductions (accumulate in float64)
# ---------------------------------------------------------------------------

def _expand_like(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis, dtype=F64)
    shape = a.shape
    return _make(out, (a,), lambda g: (np.array(_expand_like(g, shape, axis), dtype=F32),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    out = np.mean(a.data, axis=axis, dtype=F64)
    shape = a.shape
    n = a.size if axis is None else a.size // max(np.asarray(out).size, 1)

    def bw(g):
        return (np.array(_expand_like(g, shape, axis), dtype=F32) / F32(n),)

    return _make(out, (a,), bw, "mean")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference, a scalar."""
    _same_shape(a, b, "l1_distance")
    diff = a.data.astype(F64) - b.data
    n = diff.size
    sgn = np.sign(diff).astype(F32)
    out = np.abs(diff).sum() / n
    return _make(out, (a, b), lambda g: (g * sgn / F32(n), -g * sgn / F32(n)), "l1_distance")


def l2_norm(a: Tensor) -> Tensor:
    x64 = a.data.astype(F64)
    nrm = math.sqrt(float((x64 * x64).sum()))

    def bw(g):
        if nrm == 0.0:
            return (np.zeros_like(a.data),)
        return (g * (a.data / F32(nrm)),)

    return _make(nrm, (a,), bw, "l2_norm")


def softmax(a: Tensor) -> Tensor:
    x = a.data.astype(F64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s64 = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g.astype(F64) * s64, axis=-1, keepdims=True)
        return ((s64 * (g - dot)).astype(F32),)

    return _make(s64, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, C, H, W] -> [B, C*k*k, H*W] patches for a stride-1 'same' conv."""
    B, C, H, W = x.shape
    if k == 1:
        return x.reshape(B, C, H * W)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((B, C, k, k, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(B, C * k * k, H * W)


def _conv_raw(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = np.matmul(w.reshape(Co, -1), cols)
    return out.reshape(B, Co, H, W), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution with zero padding; kernel size 1 or 3.

    x: [B, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout] or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, k, k2 = w.shape
    if Ci != C or k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({Co},)")
    out, cols = _conv_raw(x.data, w.data)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        g3 = g.reshape(B, Co, H * W)
        gw = gb = gx = None
        if w.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 2), dtype=F64).astype(F32)
        if x.requires_grad:
            # transposed conv == 'same' conv with the flipped, channel-swapped kernel
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_raw(np.ascontiguousarray(g), wt)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape

    def bw(g):
        gx = np.zeros(shape, dtype=F32)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (a,), bw, "slice")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead)), dtype=F64) if lead else g.astype(F64)
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.astype(F32),)

    return _make(np.array(out), (a,), bw, "broadcast_to")


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    if a.ndim != 4:
        raise ShapeError(f"upsample2x expects [B,C,H,W], got {a.shape}")
    B, C, H, W = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    return _make(out, (a,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample2x")


def avgpool2x(a: Tensor) -> Tensor:
    if a.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise ShapeError(f"avgpool2x expects [B,C,H,W] with even H, W; got {a.shape}")
    B, C, H, W = a.shape
    out = a.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5), dtype=F64)

    def bw(g):
        q = g * F32(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return _make(out, (a,), bw, "avgpool2x")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate tensors receive their gradient by assignment; leaves
    accumulate, so repeated calls sum.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=F32)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=F32)
            else:
                node.grad = node.grad + g
            continue
        node.grad = g
        for p, gp in zip(node.parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = np.asarray(gp, dtype=F32)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class CosineSchedule:
    total: int
    floor: float

    def lr(self, lr0: float, step: int) -> float:
        step = min(max(step, 0), self.total)
        return self.floor + 0.5 * (lr0 - self.floor) * (1.0 + math.cos(math.pi * step / self.total))


@dataclass
class AdamState:
    lr0: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    floor: float | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.floor is None:
            self.floor = self.lr0 / 100.0
        self.schedule = CosineSchedule(max(int(self.total_steps), 1), float(self.floor))

    def lr_at(self, step: int) -> float:
        return self.schedule.lr(self.lr0, step)


def adam_step(params: Mapping[str, Tensor], state: AdamState,
              names: Iterable[str] | None = None) -> None:
    """One bias-corrected Adam update at the cosine-annealed rate.

    The rate used for update number ``n`` (1-based) is ``lr_at(n - 1)``, so
    the first update runs at ``lr0``. Gradients are zeroed afterwards.
    """
    keys = list(params.keys()) if names is None else list(names)
    for k in keys:
        if params[k].grad is None:
            raise ContractError(f"adam_step: parameter {k!r} has no gradient")
    state.step += 1
    lr = state.lr_at(state.step - 1)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in keys:
        p = params[k]
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        upd = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(F32)
        if not np.isfinite(p.data).all():
            raise NumericsError(f"adam_step produced non-finite values in {k!r}")
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# numerical oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-3,
                     precise: bool = True) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    The probe points x +- h are float32 values. With ``precise`` the function
    is evaluated in float64 at those points, so the reference is limited by
    the O(h^2) truncation error instead of float32 output rounding.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.zeros(flat.size, dtype=F64)

    def ev(arr):
        val = f(Tensor(arr.reshape(base.shape)))
        return float(val.data.reshape(-1)[0]) if isinstance(val, Tensor) else float(val)

    ctx = oracle_precision() if precise else contextlib.nullcontext()
    with no_grad(), ctx:
        for k in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += F32(h)
            xm[k] -= F32(h)
            # use the actually representable step
            step = float(xp[k]) - float(xm[k])
            out[k] = (ev(xp) - ev(xm)) / step
    return Tensor(out.reshape(base.shape))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=F64)
    b = np.asarray(b, dtype=F64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)
