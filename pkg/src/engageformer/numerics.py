"""Dense tensors with reverse-mode differentiation, plus a seedable PRNG.

Every op takes :class:`Tensor` inputs, computes the forward value with numpy
and records a closure that maps the output cotangent to input cotangents.
``Tensor.backward`` walks the recorded graph in reverse topological order.

Precision is a process-wide switch: ``float32`` for training and ``float64``
for gradient checks (see :func:`precision`).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

_DTYPE = np.dtype(np.float32)


def get_dtype() -> np.dtype:
    return _DTYPE


def set_precision(name: str) -> None:
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE = np.dtype(name)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global scalar precision."""
    previous = _DTYPE.name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a cotangent needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior cotangents are dead once propagated
                node.grad = None

    # convenience operators; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=live, _backward=backward)


def _give(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vector-matrix and matrix-vector allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or (a.data.ndim == 1 and b.data.ndim == 1):
        raise DimensionError(f"matmul supports matrix operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                _give(a, np.outer(g, b.data))
            else:
                _give(a, g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                _give(b, np.outer(a.data, g))
            else:
                _give(b, a.data.T @ g)

    return _result(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        _give(x, g.T)

    return _result(x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        _give(x, g.reshape(x.shape))

    return _result(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _give(x, g[tuple(idx)])

    return _result(out, xs, backward)


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([x.data for x in xs])

    def backward(g):
        for i, x in enumerate(xs):
            _give(x, g[i])

    return _result(out, xs, backward)


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum of equal shapes, or tensor plus a Python scalar."""
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _result(a.data + b, (a,), lambda g: _give(a, g))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def backward(g):
        _give(a, g)
        _give(b, g)

    return _result(a.data + b.data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x`` (the one explicit broadcast)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias of shape {bias.shape} does not match last axis of {x.shape}")

    def backward(g):
        _give(x, g)
        if bias.requires_grad:
            _give(bias, g.reshape(-1, bias.shape[0]).sum(axis=0))

    return _result(x.data + bias.data, (x, bias), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _give(a, g * b.data)
        if b.requires_grad:
            _give(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: _give(x, g * g.dtype.type(c)))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: _give(x, np.full(x.shape, g, dtype=x.data.dtype)))


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / as_tensor(x).data.size)


# ---------------------------------------------------------------- nonlinearities

def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _give(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        _give(x, g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each token over its last axis, then apply ``gamma * x + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match d={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _give(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _give(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _give(x, inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(out, (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF from erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _give(x, (g * (cdf + x.data * pdf)).astype(x.data.dtype))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- PRNG
#
# splitmix64 expands a 64-bit seed into the four state words of xoshiro256**.
# Child streams: Rng(seed).derive(k1, k2, ...) seeds a new generator with
#   s = seed; for k in keys: s = splitmix64_next(s ^ (k mod 2**64))[output]
# i.e. each key is xor-ed in and scrambled by one splitmix64 step.

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def xoshiro256ss_reference(state: list[int], n: int) -> list[int]:
    """Pure-Python xoshiro256** (mutates ``state``); the oracle for the fast kernel."""
    s0, s1, s2, s3 = state
    out = []
    for _ in range(n):
        out.append((_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64)
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[:] = [s0, s1, s2, s3]
    return out


@numba.njit(cache=True)
def _xoshiro_fill(state, out):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    five = np.uint64(5)
    nine = np.uint64(9)
    for i in range(out.size):
        x = s1 * five
        r = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = r * nine
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


class Rng:
    """xoshiro256** generator seeded through splitmix64. Single owner; not thread-safe."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    def derive(self, *keys: int) -> "Rng":
        s = self.seed
        for k in keys:
            _, s = splitmix64(s ^ (int(k) & MASK64))
        return Rng(s)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _xoshiro_fill(self.state, out)
        return out

    def random(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def gaussian(self, n: int) -> np.ndarray:
        """``n`` standard normals via Box-Muller; uniforms are consumed in pairs."""
        pairs = (int(n) + 1) // 2
        u = self.random(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        return out[:n]

    def below(self, n: int) -> int:
        """Integer uniform in [0, n) by multiply-shift on one 64-bit draw."""
        return (int(self.next_u64(1)[0]) * int(n)) >> 64

    def shuffle(self, items: list) -> list:
        """Return a Fisher-Yates shuffled copy."""
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def _shape_size(shape: Iterable[int]) -> tuple[tuple[int, ...], int]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"shape extents must be >= 1, got {shape}")
    return shape, int(np.prod(shape, dtype=np.int64))


def rng_uniform(rng: Rng, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
    shape, n = _shape_size(shape)
    return Tensor((low + (high - low) * rng.random(n)).reshape(shape))


def rng_gaussian(rng: Rng, shape: Sequence[int], std: float = 1.0) -> Tensor:
    shape, n = _shape_size(shape)
    return Tensor((std * rng.gaussian(n)).reshape(shape))
