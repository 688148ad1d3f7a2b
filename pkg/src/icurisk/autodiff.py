"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape: every operation returns a new `Tensor` that remembers its
parents and how to push gradients back to them. The op set is exactly what
the sequence model needs (affine maps, elementwise nonlinearities, softmax,
cosine similarity, Gaussian log-density / KL primitives); there is no
general broadcasting engine beyond what those ops use.

Tensors are immutable values once created. The only sanctioned mutation of
`.data` happens in the optimizer between gradient computations and in the
finite-difference oracle, which re-runs whole expressions.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class NumericError(RuntimeError):
    """Non-finite value where the computation contract requires finite ones."""


class GradError(ValueError):
    """Misuse of the gradient machinery (non-scalar root, missing graph)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 ndarray plus the tape bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; constants auto-wrap.
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        """Seed gradient 1 at this scalar and accumulate into the graph."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise GradError(f"backward() requires a scalar root, got shape {self.data.shape}")
        if not np.isfinite(self.data):
            raise NumericError("non-finite value at the root of the backward pass")
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that gradients are accumulated into."""
    t = Tensor(np.array(data, dtype=np.float64))
    t.requires_grad = True  # parameters track gradients even inside no_grad()
    return t


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative DFS."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    # numpy arithmetic on 0-d arrays yields scalars; keep .data a real ndarray
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting semantics)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid exp overflow at large |x|.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    # Overflow-safe: max(x, 0) + log1p(exp(-|x|)); output > 0 for all finite x.
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            _accumulate(a, g * s)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 2.0 * a.data)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / data)

    return _make(data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map: x (B, n) @ w.T (n, m) [+ b (m,)] -> (B, m)."""
    data = x.data @ w.data.T
    if b is not None:
        data = data + b.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product a (n, k) @ b (k, m)."""
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def stack_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape (B,) into (B, T)."""
    data = np.stack([t.data for t in tensors], axis=1)

    def backward(g):
        for j, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, g[:, j])

    return _make(data, tuple(tensors), backward)


def column(x: Tensor, j: int) -> Tensor:
    """Select column j of (B, T) as (B, 1)."""
    data = x.data[:, j : j + 1]

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, j : j + 1] = g
            _accumulate(x, full)

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Broadcast a (d,) vector to (n, d) rows."""
    data = np.broadcast_to(v.data, (n, v.data.shape[0])).copy()

    def backward(g):
        if v.requires_grad:
            _accumulate(v, g.sum(axis=0))

    return _make(data, (v,), backward)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accumulate(x, np.broadcast_to(ge, x.data.shape).copy())

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(x, data * (g - inner))

    return _make(data, (x,), backward)


def cosine_rows(z: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of each row of z (B, a) against v (a,) -> (B,).

    A zero-norm row has undefined cosine; it scores 0 with zero gradient
    (continuous limit choice) and is logged as a warning.
    """
    zd, vd = z.data, v.data
    dots = zd @ vd
    z_norms = np.sqrt((zd * zd).sum(axis=1))
    v_norm = float(np.sqrt(vd @ vd))
    degenerate = (z_norms == 0.0) | (v_norm == 0.0)
    if degenerate.any():
        _logger.warning("cosine similarity undefined for %d zero-norm key(s); using 0",
                    int(degenerate.sum()))
    safe_zn = np.where(z_norms == 0.0, 1.0, z_norms)
    safe_vn = v_norm if v_norm > 0.0 else 1.0
    data = np.where(degenerate, 0.0, dots / (safe_zn * safe_vn))

    def backward(g):
        ge = np.where(degenerate, 0.0, g)
        if z.requires_grad:
            coef = (ge / (safe_zn * safe_vn))[:, None]
            gz = coef * vd[None, :] - (ge * data / (safe_zn * safe_zn))[:, None] * zd
            _accumulate(z, gz)
        if v.requires_grad:
            gv = (ge / (safe_zn * safe_vn)) @ zd - (ge * data).sum() / (safe_vn * safe_vn) * vd
            _accumulate(v, gv)

    return _make(data, (z, v), backward)


# ---------------------------------------------------------------------------
# Gaussian primitives
# ---------------------------------------------------------------------------


@dataclass
class DiagGaussian:
    """Diagonal Gaussian: per-dimension mean and standard deviation.

    mean/stddev can be (d,) vectors or (B, d) batches; stddev may broadcast
    against mean (e.g. a shared (d,) head over a (B, d) mean).
    """

    mean: Tensor
    stddev: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.stddev = as_tensor(self.stddev)
        try:
            np.broadcast_shapes(self.mean.data.shape, self.stddev.data.shape)
        except ValueError as err:
            raise ValueError(
                f"mean shape {self.mean.data.shape} and stddev shape "
                f"{self.stddev.data.shape} are incompatible"
            ) from err
        if not np.all(self.stddev.data > 0.0):
            raise ValueError("DiagGaussian requires strictly positive stddev")

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]


def gaussian_logpdf(x, g: DiagGaussian) -> Tensor:
    """Elementwise log N(x; mean, stddev^2): -ln(2*pi)/2 - ln(s) - (x-m)^2/(2 s^2)."""
    x = as_tensor(x)
    diff = sub(x, g.mean)
    var2 = mul(square(g.stddev), 2.0)
    return sub(mul(add(log(g.stddev), 0.5 * LOG_2PI), -1.0), div(square(diff), var2))


def masked_gaussian_loglik(x: np.ndarray, mask: np.ndarray, g: DiagGaussian) -> Tensor:
    """Sum of observed-cell Gaussian log-densities per row.

    x, mask are constant (B, M) arrays; mean/stddev are (B, M) tensors
    (stddev may broadcast from (M,)). Mask-0 cells contribute exactly 0.
    Fused forward/backward keeps the tape short in the sequence loop.
    """
    mu, sg = g.mean, g.stddev
    md, sd = mu.data, sg.data
    diff = x - md
    inv_var = 1.0 / (sd * sd)
    cell = -0.5 * LOG_2PI - np.log(sd) - 0.5 * diff * diff * inv_var
    cell = np.where(mask > 0, cell, 0.0)
    data = cell.sum(axis=1)

    def backward(gout):
        go = gout[:, None]
        if mu.requires_grad:
            _accumulate(mu, _unbroadcast(go * mask * diff * inv_var, md.shape))
        if sg.requires_grad:
            gs = go * mask * (-1.0 / sd + diff * diff * inv_var / sd)
            _accumulate(sg, _unbroadcast(gs, sd.shape))

    return _make(data, (mu, sg), backward)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Per dimension: ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2.
    Returns a scalar for (d,) inputs, a (B,) vector for (B, d) inputs.
    """
    mq, sq, mp, sp = q.mean, q.stddev, p.mean, p.stddev
    if mq.data.shape[-1] != mp.data.shape[-1]:
        raise ValueError(
            f"KL dimension mismatch: q has {mq.data.shape[-1]}, p has {mp.data.shape[-1]}"
        )
    mqd, sqd, mpd, spd = mq.data, sq.data, mp.data, sp.data
    diff = mqd - mpd
    inv_vp = 1.0 / (spd * spd)
    cell = np.log(spd / sqd) + 0.5 * (sqd * sqd + diff * diff) * inv_vp - 0.5
    cell = np.broadcast_to(cell, np.broadcast_shapes(mqd.shape, sqd.shape, mpd.shape, spd.shape))
    data = cell.sum(axis=-1)

    def backward(gout):
        go = np.expand_dims(gout, -1) if cell.ndim > 1 else gout
        if mq.requires_grad:
            _accumulate(mq, _unbroadcast(go * diff * inv_vp * np.ones_like(cell), mqd.shape))
        if mp.requires_grad:
            _accumulate(mp, _unbroadcast(-go * diff * inv_vp * np.ones_like(cell), mpd.shape))
        if sq.requires_grad:
            gsq = go * (-1.0 / sqd + sqd * inv_vp) * np.ones_like(cell)
            _accumulate(sq, _unbroadcast(gsq, sqd.shape))
        if sp.requires_grad:
            gsp = go * (1.0 / spd - (sqd * sqd + diff * diff) * inv_vp / spd) * np.ones_like(cell)
            _accumulate(sp, _unbroadcast(gsp, spd.shape))

    return _make(data, (mq, sq, mp, sp), backward)


def reparam_sample(g: DiagGaussian, eps: np.ndarray) -> Tensor:
    """mean + stddev * eps with gradients flowing through both heads."""
    eps = np.asarray(eps, dtype=np.float64)
    target = np.broadcast_shapes(g.mean.data.shape, g.stddev.data.shape)
    if eps.shape != target:
        raise ValueError(f"eps shape {eps.shape} does not match distribution shape {target}")
    return add(g.mean, mul(g.stddev, Tensor(eps)))


# ---------------------------------------------------------------------------
# Gradient extraction
# ---------------------------------------------------------------------------


def reverse_gradients(root: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Exact gradient of a scalar expression w.r.t. each requested tensor.

    Returns a map tensor -> gradient array (zeros for parameters the
    expression does not touch). Raises GradError for a non-scalar root and
    NumericError if the forward value is not finite.
    """
    wrt = list(wrt)
    for p in wrt:  # clear stale grads of parameters outside the current graph
        p.grad = None
    root.backward()
    return {p: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in wrt}
