"""Dense tensors with a reverse-mode autodiff tape.

Values live in contiguous numpy arrays (float32 or float64).  An operation
is recorded on the active :class:`Tape` when at least one input requires a
gradient; the backbone runs with no tape at all and therefore records
nothing.

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
    grads = backward(loss, tape)
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
LAYERNORM_EPS = 1e-6


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise ContractError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def dtype_name(dtype) -> str:
    return "f32" if np.dtype(dtype) == np.float32 else "f64"


class Tensor:
    """Immutable n-d array plus an optional link into a tape.

    ``data`` is read-only; optimizers swap in a fresh array instead of
    writing in place.
    """

    __slots__ = ("data", "requires_grad", "name", "_recorded", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in DTYPES.values() else np.float32
        arr = np.array(arr, dtype=as_dtype(dtype), order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._recorded = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def assign(self, arr: np.ndarray) -> None:
        """Replace the value (optimizer updates only)."""
        arr = np.array(arr, dtype=self.dtype, order="C", copy=True)
        if arr.shape != self.shape:
            raise DimensionError(f"assign shape {arr.shape} != {self.shape}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Append-only record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and not t._recorded and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("edgetune_tape", default=None)


@dataclass
class MacCounter:
    macs: int = 0


_MAC_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar("edgetune_macs", default=None)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of matmul-like ops executed in the block."""
    counter = MacCounter()
    token = _MAC_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTER.reset(token)


def _add_macs(n: int) -> None:
    counter = _MAC_COUNTER.get()
    if counter is not None:
        counter.macs += int(n)


@contextlib.contextmanager
def no_tape():
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64), dtype=dtype)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._recorded = True
        tape.nodes.append(Node(op, tuple(inputs), result, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ContractError(f"dtype mismatch: {dtype_name(a.dtype)} vs {dtype_name(b.dtype)}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_same_dtype(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = a.data.dtype.type(b)
        return _record("scale", (a,), a.data * c, lambda g: (g * c,))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    av, bv = a.data, b.data
    return _record(
        "mul", (a, b), out, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _record("gelu", (a,), out, vjp)


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _add_macs(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    av, bv = a.data, b.data
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", (a, b), out, vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _record("reshape", (a,), out.copy(), lambda g: (g.reshape(src),))


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """``a`` indexed at ``index`` along ``axis`` (the axis is dropped)."""
    axis = axis % a.ndim
    src = a.shape
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros(src, dtype=g.dtype)
        idx = [slice(None)] * len(src)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _record("select", (a,), out, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record(
        "stack", tensors, out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(a.dtype),)

    return _record("sum", (a,), out, vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# normalisation and probabilities


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ContractError("softmax needs a last dimension of size >= 1")
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, vjp)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm over last dim {d} got gamma {gamma.shape}, beta {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.data
    out = xhat * gv + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx.astype(x.dtype), dgamma.astype(x.dtype), dbeta.astype(x.dtype)

    return _record("layernorm", (a, gamma, beta), out.astype(x.dtype), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, C]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [B, C] logits and [B] labels, got {logits.shape}, {labels.shape}")
    x = logits.data
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite logits")
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(len(labels))
    b = len(labels)
    loss = np.asarray(-logp[rows, labels].sum() / b, dtype=x.dtype)

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((grad * (g / b)).astype(x.dtype),)

    return _record("cross_entropy", (logits,), loss, vjp)


# --------------------------------------------------------------------------
# depthwise convolution over the patch grid


def depthwise_conv_tokens(x: Tensor, weight: Tensor, bias: Tensor, grid: int) -> Tensor:
    """3x3 depthwise convolution over the ``grid x grid`` patch tokens.

    ``x`` is [..., T, d] with T = grid**2 + 1; token 0 (class token) sees
    only the centre tap.  Zero padding at the grid border.
    """
    *lead, t, d = x.shape
    ksz = weight.shape[0]
    if t != grid * grid + 1 or weight.shape != (ksz, ksz, d) or bias.shape != (d,) or ksz % 2 != 1:
        raise DimensionError(f"dwconv: x {x.shape}, weight {weight.shape}, bias {bias.shape}, grid {grid}")
    pad = ksz // 2
    xv = x.data
    wv = weight.data
    patches = xv[..., 1:, :].reshape(*lead, grid, grid, d)
    padded = np.zeros((*lead, grid + 2 * pad, grid + 2 * pad, d), dtype=xv.dtype)
    padded[..., pad : pad + grid, pad : pad + grid, :] = patches
    out_p = np.zeros_like(patches)
    for i in range(ksz):
        for j in range(ksz):
            out_p += padded[..., i : i + grid, j : j + grid, :] * wv[i, j]
    out_cls = xv[..., :1, :] * wv[pad, pad]
    out = np.concatenate([out_cls, out_p.reshape(*lead, grid * grid, d)], axis=-2) + bias.data
    _add_macs(int(np.prod(lead, dtype=np.int64)) * dwconv_macs(t, d, ksz))

    def vjp(g):
        g_cls = g[..., :1, :]
        g_p = g[..., 1:, :].reshape(*lead, grid, grid, d)
        lead_axes = tuple(range(len(lead)))
        gw = np.zeros_like(wv)
        gpad = np.zeros_like(padded)
        for i in range(ksz):
            for j in range(ksz):
                gw[i, j] = (padded[..., i : i + grid, j : j + grid, :] * g_p).sum(axis=lead_axes + (-3, -2))
                gpad[..., i : i + grid, j : j + grid, :] += g_p * wv[i, j]
        gw[pad, pad] += (xv[..., :1, :] * g_cls).sum(axis=lead_axes + (-2,))
        gx_p = gpad[..., pad : pad + grid, pad : pad + grid, :].reshape(*lead, grid * grid, d)
        gx = np.concatenate([g_cls * wv[pad, pad], gx_p], axis=-2)
        gb = g.sum(axis=lead_axes + (-2,))
        return gx, gw, gb

    return _record("dwconv", (x, weight, bias), out, vjp)


def dwconv_macs(t: int, d: int, ksz: int = 3) -> int:
    # full kernel on every patch token (padding taps counted), centre tap on the class token
    return (t - 1) * ksz * ksz * d + d


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``loss`` for every leaf on ``tape`` (and ``params``).

    Leaves the loss does not reach get zero gradients.  The tape is not
    consumed, so repeated calls return identical results.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not recorded on a tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = np.asarray(gi, dtype=inp.dtype)
    leaves = tape.leaves()
    if params is not None:
        known = {id(p) for p in leaves}
        leaves += [p for p in params if id(p) not in known]
    grads = {}
    for p in leaves:
        g = adj.get(id(p))
        grads[p] = Tensor(np.zeros(p.shape) if g is None else g.reshape(p.shape), dtype=p.dtype)
    return grads


# central-difference weights: f'(x) ~ sum_k w_k (f(x+kh) - f(x-kh)) / (den h)
_STENCILS = {
    2: ((1.0,), 2.0),
    4: ((8.0, -1.0), 12.0),
    6: ((45.0, -9.0, 1.0), 60.0),
    8: ((672.0, -168.0, 32.0, -3.0), 840.0),
}


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, order: int = 2) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    ``order`` picks the 3, 5, 7 or 9 point stencil (2, 4, 6, 8).  Higher
    orders keep truncation error small at larger steps, which cuts the
    roundoff that otherwise swamps tiny gradient entries.
    """
    if order not in _STENCILS:
        raise ContractError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    weights, den = _STENCILS[order]
    with Tape() as tape:
        loss = f()
    auto = backward(loss, tape, params) if loss.requires_grad else {p: Tensor(np.zeros(p.shape), dtype=p.dtype) for p in params}
    worst = 0.0
    with no_tape():
        for p in params:
            base = p.data.copy()
            ga = auto[p].data.reshape(-1)
            for idx in range(base.size):

                def at(k: int) -> float:
                    moved = base.copy().reshape(-1)
                    moved[idx] += k * step
                    p.assign(moved.reshape(base.shape))
                    return f().item()

                # differences first, so a loss that ignores the entry gives exactly 0
                acc = 0.0
                for k, w in enumerate(weights, 1):
                    acc += w * (at(k) - at(-k))
                gfd = acc / (den * step)
                err = abs(ga[idx] - gfd) / max(abs(ga[idx]), abs(gfd), 1e-12)
                worst = max(worst, err)
            p.assign(base)
    return worst


# --------------------------------------------------------------------------
# deterministic random initialisation


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator fully determined by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype="f32") -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range values."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(as_dtype(dtype))
