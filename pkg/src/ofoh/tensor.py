"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every operation allocates a fresh output node holding
its value, its parent nodes, and a closure that maps the output gradient to
per-parent gradients. Nothing that participates in a graph is mutated in
place. All arithmetic runs in float64, so reductions meet the
double-precision accumulation requirement without extra machinery.

Broadcasting is supported only to the extent the model code needs it
(bias vectors against matrices / feature maps, scalars against anything);
gradients of broadcast operands are summed back to the operand shape.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense array node in the computation graph.

    ``requires_grad`` on a leaf marks it as a trainable parameter; on an
    interior node it is derived from the parents. After ``backward`` every
    reachable node with ``requires_grad`` has ``grad`` populated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def backward(self, params: Sequence["Tensor"] = ()) -> None:
        """Populate ``grad`` on every reachable ``requires_grad`` tensor.

        ``params`` may list extra parameters; any of them not reached by the
        graph get an explicit zero gradient so optimizers see a full set.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor) -> list:
    """Reverse topological order (root first), iterative to spare the stack."""
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _node(data: Array, parents: tuple, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents,
                  _backward=backward if req else None)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    # subgradient at the kink taken from the active side
    mask = a.data >= 0.0

    def bwd(g):
        return (g * mask,)

    return _node(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)

    def bwd(g):
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ContractError("log requires strictly positive input")
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _node(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise ContractError("sqrt requires non-negative input")
    out = np.sqrt(a.data)
    denom = np.maximum(out, 1e-12)

    def bwd(g):
        return (g * 0.5 / denom,)

    return _node(out, (a,), bwd)


def arccos(a: Tensor) -> Tensor:
    """arccos with inputs clipped to [-1, 1].

    Inputs within one rounding step of +-1 (e.g. the cosine of two
    coincident unit vectors computed in floating point) snap to exactly
    0 or pi. The gradient is zeroed within 1e-7 of the endpoints, so the
    snapped region has a finite, zero gradient.
    """
    clipped = np.clip(a.data, -1.0, 1.0)
    out = np.arccos(clipped)
    out = np.where(a.data >= 1.0 - 1e-12, 0.0, out)
    out = np.where(a.data <= -1.0 + 1e-12, np.pi, out)
    interior = np.abs(a.data) < 1.0 - 1e-7
    denom = np.sqrt(np.maximum(1.0 - clipped * clipped, 1e-14))

    def bwd(g):
        return (np.where(interior, -g / denom, 0.0),)

    return _node(out, (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.data, floor)
    mask = a.data >= floor

    def bwd(g):
        return (g * mask,)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _node(out, tuple(parts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _node(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def bwd(g):
        return (np.full_like(a.data, float(g) / n),)

    return _node(out, (a,), bwd)


def reduce_min_rows(a: Tensor) -> Tensor:
    """Row-wise minimum of a matrix; gradient routes to the first argmin."""
    if a.ndim != 2:
        raise ShapeError(f"reduce_min_rows expects a matrix, got {a.shape}")
    idx = np.argmin(a.data, axis=1)
    out = a.data[np.arange(a.data.shape[0]), idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[np.arange(a.data.shape[0]), idx] = g
        return (full,)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bwd)


def softmax_rows(s: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if s.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {s.shape}")
    if np.isnan(s.data).any():
        raise ContractError("softmax_rows received NaN input")
    shifted = s.data - s.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return _node(p, (s,), bwd)


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor,
                    eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learnable affine."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects a matrix, got {x.shape}")
    d = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / d
        )
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), bwd)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale every row to unit Euclidean norm (norms floored at 1e-12)."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norms = np.maximum(np.linalg.norm(x.data, axis=1, keepdims=True), 1e-12)
    out = x.data / norms

    def bwd(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return (g / norms - x.data * (dot / norms**3),)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial ops (feature maps are H x W x C, row-major)
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions of an H x W x C map -> C vector."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects H x W x C, got {x.shape}")
    h, w, _ = x.data.shape
    out = x.data.mean(axis=(0, 1))

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    return _node(out, (x,), bwd)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an H x W x Cin map with k x k x Cin x Cout kernels."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(
            f"conv2d expects HxWxCin input and kxkxCinxCout kernels, "
            f"got {x.shape} and {kernels.shape}"
        )
    h, w, cin = x.data.shape
    k, k2, kcin, cout = kernels.data.shape
    if k != k2 or kcin != cin:
        raise ShapeError(f"kernel shape {kernels.shape} does not fit input {x.shape}")
    if k < 1 or stride < 1:
        raise ContractError("conv2d requires k >= 1 and stride >= 1")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(
            f"kernel {k}x{k} larger than padded input "
            f"{h + 2 * pad}x{w + 2 * pad}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # windows: (ho, wo, k, k, cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]            # (ho, wo, cin, k, k)
    win = np.moveaxis(win, 2, -1)            # (ho, wo, k, k, cin)
    cols = np.ascontiguousarray(win).reshape(ho * wo, k * k * cin)
    wmat = kernels.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(ho * wo, cout)
        dk = (cols.T @ g2).reshape(kernels.data.shape)
        dcols = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
        dxp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
        for i in range(k):
            for j in range(k):
                dxp[i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    dcols[:, :, i, j, :]
        dx = dxp[pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dk

    return _node(out, (x, kernels), bwd)


def masked_part_means(fmap: Tensor, part_mask: Array, n_parts: int) -> Tensor:
    """Average-pool a feature map over each labeled part region.

    ``part_mask`` is an integer H' x W' label map aligned with ``fmap``
    (0 = background). Returns an (n_parts, C) matrix; rows for absent parts
    are zero and receive no gradient.
    """
    if fmap.ndim != 3:
        raise ShapeError(f"masked_part_means expects H x W x C, got {fmap.shape}")
    if part_mask.shape != fmap.data.shape[:2]:
        raise ShapeError(
            f"part mask {part_mask.shape} does not match map {fmap.data.shape[:2]}"
        )
    c = fmap.data.shape[2]
    flat = fmap.data.reshape(-1, c)
    labels = part_mask.reshape(-1)
    out = np.zeros((n_parts, c))
    counts = np.zeros(n_parts, dtype=np.int64)
    for p in range(1, n_parts + 1):
        sel = labels == p
        counts[p - 1] = sel.sum()
        if counts[p - 1]:
            out[p - 1] = flat[sel].mean(axis=0)

    def bwd(g):
        dflat = np.zeros_like(flat)
        for p in range(1, n_parts + 1):
            if counts[p - 1]:
                dflat[labels == p] += g[p - 1] / counts[p - 1]
        return (dflat.reshape(fmap.data.shape),)

    return _node(out, (fmap,), bwd)
