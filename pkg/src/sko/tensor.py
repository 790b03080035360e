"""Dense tensors with reverse-mode automatic differentiation on numpy.

A Tensor wraps a row-major numpy array. While a Tape is active, every
operation appends a node (inputs, backward closure, retained buffers) to it;
Tape.backward walks the nodes once in reverse and deposits gradients on leaf
tensors (those created with requires_grad=True). With no active tape,
operations are plain eager numpy and retain nothing.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "AutodiffError",
    "set_default_dtype",
    "get_default_dtype",
    "set_debug_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "clamp",
    "l2_normalize_rows",
    "rmsnorm",
    "softmax_rows",
    "cross_entropy",
    "tril_mask",
    "gelu",
    "embedding",
    "reshape",
    "transpose",
    "sum_to_scalar",
    "mean_all",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class AutodiffError(RuntimeError):
    """Misuse of the tape: double backward, non-scalar loss, stale grads."""


_DEFAULT_DTYPE = np.float64
_DEBUG_FINITE = False
_ids = itertools.count(1)
_tls = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from python data (f32 or f64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness checks (slow; intended for tests/selftest)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """A dense real array plus optional gradient buffer and tape identity."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; scalars are folded in without creating leaf tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out_tid", "inputs", "backward", "saved", "op")

    def __init__(self, out_tid, inputs, backward, saved, op):
        self.out_tid = out_tid
        self.inputs = inputs          # Tensor objects, aligned with backward outputs
        self.backward = backward      # grad_out -> tuple of arrays/None per input
        self.saved = saved            # arrays retained for backward (census only)
        self.op = op


class Tape:
    """Ordered record of executed operations, consumed once by backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise AutodiffError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def _tracks(self, t) -> bool:
        return isinstance(t, Tensor) and (t.requires_grad or t._tid in self._tracked)

    def _add(self, node: _Node) -> None:
        self.nodes.append(node)
        self._tracked.add(node.out_tid)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

        The loss must be a scalar recorded on this tape. A second backward on
        the same tape, or one that would overwrite an existing leaf .grad,
        raises instead of silently accumulating.
        """
        if self._consumed:
            raise AutodiffError("backward() already ran on this tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise AutodiffError("loss must be a scalar tensor")
        if loss._tid not in self._tracked:
            raise AutodiffError("loss is not connected to any leaf on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss._tid: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_tid, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not self._tracks(t):
                    continue
                # accumulate out-of-place: a backward may hand the same
                # array to several inputs (add gives both sides one object),
                # so += here would corrupt the aliased entries
                if t._tid in grads:
                    grads[t._tid] = grads[t._tid] + ig
                else:
                    grads[t._tid] = ig
                if t.requires_grad:
                    leaves[t._tid] = t
        assigned: set[int] = set()
        for tid, leaf in leaves.items():
            if leaf.grad is not None:
                raise AutodiffError(
                    f"grad already present on {leaf.name or 'tensor'}; zero it first"
                )
            g = grads.pop(tid)
            # two leaves may still share one array (single add of two leaves);
            # copy so in-place grad edits (clipping) stay per-leaf
            if id(g) in assigned:
                g = g.copy()
            assigned.add(id(g))
            leaf.grad = g

    def retained_square_buffers(self, n: int, op: str | None = None) -> int:
        """Count distinct float buffers with trailing shape (n, n) retained
        for backward, optionally restricted to nodes of one op kind."""
        seen = set()
        count = 0
        for node in self.nodes:
            if op is not None and node.op != op:
                continue
            for arr in node.saved:
                if not isinstance(arr, np.ndarray) or arr.dtype.kind != "f":
                    continue
                if arr.ndim >= 2 and arr.shape[-2:] == (n, n) and id(arr) not in seen:
                    seen.add(id(arr))
                    count += 1
        return count


def _check_finite(out: np.ndarray, op: str) -> None:
    if _DEBUG_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _emit(data, inputs, backward, op, saved=(), check=True):
    """Wrap an op result; record a node if a tape is active and relevant."""
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tensors = tuple(t for t in inputs)
        tape._add(_Node(out._tid, tensors, backward, tuple(saved), op))
    return out


def _as_array(x, dtype):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    """Coerce (a, b) where at least one is a Tensor; scalars follow its dtype."""
    if isinstance(a, Tensor):
        return a, b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    return Tensor(np.asarray(a, dtype=b.dtype)), b


def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)
    data = a.data - b.data
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _emit(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(data, (a, b), backward, "mul", saved=(ad, bd))


def div(a, b):
    """Elementwise/broadcast division; zero anywhere in b is a checked error."""
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in div(); check the denominator")
    data = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _emit(data, (a, b), backward, "div", saved=(ad, bd))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 strictly inside, 0 at and beyond bounds."""
    data = np.clip(x.data, lo, hi)
    xd = x.data

    def backward(g):
        return (g * ((xd > lo) & (xd < hi)),)

    return _emit(data, (x,), backward, "clamp", saved=(xd,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from e
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _emit(data, (a, b), backward, "matmul", saved=(ad, bd))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.ascontiguousarray(x.data).reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit(data, (x,), backward, "reshape", check=False)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _emit(data, (x,), backward, "transpose", check=False)


def sum_to_scalar(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())
    shape, dtype = x.shape, x.dtype

    def backward(g):
        return (np.broadcast_to(g.astype(dtype), shape).copy(),)

    return _emit(data, (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean())
    shape, dtype = x.shape, x.dtype
    n = x.size

    def backward(g):
        return (np.broadcast_to((g / n).astype(dtype), shape).copy(),)

    return _emit(data, (x,), backward, "mean")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm.

    The norm is clamped below by eps, so non-degenerate rows come out exactly
    unit length and zero rows map to zero.
    """
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    data = xd / denom
    y = data

    def backward(g):
        live = norm > eps
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(live, (g - y * dot) / denom, g / eps),)

    return _emit(data, (x,), backward, "l2_normalize", saved=(xd, y))


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2) + eps) scaled elementwise by gain over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"gain shape {gain.shape} does not match last axis of {x.shape}")
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    xn = xd / r
    data = xn * gd

    def backward(g):
        gg = g * gd
        dot = np.sum(gg * xd, axis=-1, keepdims=True)
        dx = gg / r - xd * dot / (d * r * r * r)
        dgain = np.sum(g * xn, axis=tuple(range(xd.ndim - 1)))
        return dx, dgain

    return _emit(data, (x, gain), backward, "rmsnorm", saved=(xd, xn))


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; -inf entries get weight 0."""
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (x,), backward, "softmax", saved=(s,))


def tril_mask(x: Tensor, fill: float = 0.0) -> Tensor:
    """Replace strictly upper-triangular entries of the last two axes by fill.

    The diagonal is kept. fill=-inf is the pre-softmax masking convention and
    is exempt from the finiteness debug check (the sentinel is intentional).
    """
    n, m = x.shape[-2], x.shape[-1]
    if n != m:
        raise ShapeError(f"tril_mask needs square trailing dims, got {x.shape}")
    keep = _tril_bool(n, x.dtype)
    data = np.where(keep, x.data, x.dtype.type(fill))

    def backward(g):
        return (g * keep,)

    return _emit(data, (x,), backward, "tril_mask", check=np.isfinite(fill))


_TRIL_CACHE: dict[tuple, np.ndarray] = {}


def _tril_bool(n: int, dtype) -> np.ndarray:
    key = (n,)
    mask = _TRIL_CACHE.get(key)
    if mask is None:
        mask = np.tril(np.ones((n, n), dtype=bool))
        mask.setflags(write=False)
        _TRIL_CACHE[key] = mask
    return mask


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit(data, (x,), backward, "gelu", saved=(xd,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer ids; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"token ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}"
        )
    data = table.data[ids]
    tshape = table.shape
    dtype = table.dtype

    def backward(g):
        dt = np.zeros(tshape, dtype=dtype)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (dt,)

    return _emit(data, (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over all positions."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} must match logits {logits.shape} minus last axis"
        )
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of vocab range [0, {v})")
    ld = logits.data
    m = np.max(ld, axis=-1, keepdims=True)
    z = ld - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    flat_t = targets.reshape(-1)
    picked = z.reshape(-1, v)[np.arange(flat_t.size), flat_t]
    count = flat_t.size
    data = np.asarray(-(picked - lse.reshape(-1)).sum() / count)

    def backward(g):
        p = np.exp(z - lse)
        p = p.reshape(-1, v)
        p[np.arange(flat_t.size), flat_t] -= 1.0
        return ((g.item() / count) * p.reshape(ld.shape),)

    return _emit(data, (logits,), backward, "cross_entropy", saved=(z, lse))
