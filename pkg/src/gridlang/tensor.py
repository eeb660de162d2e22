"""Minimal dense tensor engine with reverse-mode autodiff.

Tensors wrap numpy arrays and record a tape of parent links plus backward
closures; calling ``backward()`` on a scalar walks the graph in reverse
topological order. Default precision is float32 for training; gradient
checks run in float64 (finite differences are meaningless at 32-bit).
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32

# Additive constant for disallowed attention pairs. Large enough that masked
# weights vanish (< 1e-30 post-softmax) without producing inf - inf NaNs.
MASK_NEG = -1e9

_FINITE_CHECKS = False


class ShapeMismatch(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf assertions (slow; meant for tests)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        raise TypeError("expected raw array, got Tensor")
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(dtype or DEFAULT_DTYPE)
    elif dtype is not None:
        a = a.astype(dtype)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"non-finite values in tensor {name or '<anon>'}")

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = ""
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        if _FINITE_CHECKS and not np.all(np.isfinite(data)):
            raise NonFiniteValue("non-finite values produced by an op")
        return out

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- basic info --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        t = self

        def bwd(g):
            t._accum(g.astype(t.data.dtype))

        return Tensor._result(self.data.astype(dtype), (self,), bwd)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        a, b = self, self._coerce(other)
        out_data = a.data + b.data

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._result(out_data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accum(-g)

        return Tensor._result(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        a, b = self, self._coerce(other)
        out_data = a.data * b.data

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(out_data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = self._coerce(other)
        return self * b ** -1.0

    def __rtruediv__(self, other):
        return self._coerce(other) * self ** -1.0

    def __pow__(self, exponent: float):
        a = self
        out_data = a.data ** exponent

        def bwd(g):
            a._accum(g * exponent * a.data ** (exponent - 1))

        return Tensor._result(out_data, (a,), bwd)

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, self._coerce(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeMismatch("matmul requires rank >= 2 operands")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeMismatch(
                f"matmul inner dims disagree: {a.data.shape} vs {b.data.shape}"
            )
        out_data = np.matmul(a.data, b.data)

        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.data.shape))

        return Tensor._result(out_data, (a, b), bwd)

    __matmul__ = matmul

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def bwd(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._result(out_data, (a,), bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        out_data = a.data.transpose(axes)
        inv = np.argsort(axes)

        def bwd(g):
            a._accum(g.transpose(inv))

        return Tensor._result(out_data, (a,), bwd)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self
        out_data = np.swapaxes(a.data, ax1, ax2)

        def bwd(g):
            a._accum(np.swapaxes(g, ax1, ax2))

        return Tensor._result(out_data, (a,), bwd)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        out_data = a.data[idx]
        if not out_data.flags.owndata:
            out_data = out_data.copy()

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._result(out_data, (a,), bwd)

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """Gather rows along axis 0 (embedding lookup)."""
        a = self
        idx = np.asarray(indices)
        out_data = a.data[idx]

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, a.data.shape[-1]))
            a._accum(full)

        return Tensor._result(out_data, (a,), bwd)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gk, a.data.shape).copy())

        return Tensor._result(out_data, (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise -------------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accum(g * out_data)

        return Tensor._result(out_data, (a,), bwd)

    def log(self) -> "Tensor":
        a = self
        out_data = np.log(a.data)

        def bwd(g):
            a._accum(g / a.data)

        return Tensor._result(out_data, (a,), bwd)

    def sqrt(self) -> "Tensor":
        return self ** 0.5

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = _sigmoid(a.data)

        def bwd(g):
            a._accum(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (a,), bwd)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._accum(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (a,), bwd)

    def gelu(self) -> "Tensor":
        """tanh-approximated GELU."""
        a = self
        c = math.sqrt(2.0 / math.pi)
        x = a.data
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def bwd(g):
            dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
            dgelu = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accum(g * dgelu)

        return Tensor._result(out_data, (a,), bwd)

    def relu(self) -> "Tensor":
        a = self
        out_data = np.maximum(a.data, 0.0)

        def bwd(g):
            a._accum(g * (a.data > 0))

        return Tensor._result(out_data, (a,), bwd)

    def softplus(self) -> "Tensor":
        """log(1 + exp(x)), numerically stable."""
        a = self
        out_data = np.logaddexp(0.0, a.data)

        def bwd(g):
            a._accum(g * _sigmoid(a.data))

        return Tensor._result(out_data, (a,), bwd)

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum(out_data * (g - dot))

        return Tensor._result(out_data, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def scatter_rows(src: Tensor, index, shape) -> Tensor:
    """Place rows of ``src`` into a zero tensor of ``shape`` at ``index``.

    ``index`` is a tuple of integer arrays addressing the leading axes
    (duplicates accumulate); the last axis is copied whole.
    """
    out_data = np.zeros(shape, dtype=src.data.dtype)
    np.add.at(out_data, index, src.data)

    def bwd(g):
        src._accum(g[index])

    return Tensor._result(out_data, (src,), bwd)


def concat(tensors: list, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._result(out_data, tuple(tensors), bwd)


def stack(tensors: list, axis: int = 0) -> Tensor:
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._result(out_data, tuple(tensors), bwd)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """softmax(q k^T / sqrt(d_h) + mask) v with an additive attention mask.

    q, k, v have shape (..., T_q, d_h) / (..., T_k, d_h); mask is an additive
    array broadcastable to (..., T_q, T_k), typically 0 for allowed pairs and
    MASK_NEG for disallowed ones.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise ShapeMismatch("q/k/v head dims disagree")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch("k/v lengths disagree")
    d_h = q.shape[-1]
    scores = q @ k.swapaxes(-1, -2) * (1.0 / math.sqrt(d_h))
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=scores.dtype)
    if mask_arr.ndim > scores.ndim or mask_arr.shape[-1] != k.shape[-2]:
        raise ShapeMismatch("attention mask does not cover (query_len, key_len)")
    weights = (scores + Tensor(mask_arr.astype(scores.dtype))).softmax(axis=-1)
    return weights @ v


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows; targets of -1 are ignored.

    logits: (P, V); targets: (P,) int ids.
    """
    targets = np.asarray(targets)
    keep = targets >= 0
    if not keep.any():
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    a = logits
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    rows = np.arange(x.shape[0])
    nll = lse[:, 0] - x[rows, np.clip(targets, 0, None)]
    n = int(keep.sum())
    out_data = np.asarray((nll * keep).sum() / n, dtype=x.dtype)

    def bwd(g):
        probs = np.exp(x - lse)
        probs[rows[keep], targets[keep]] -= 1.0
        probs[~keep] = 0.0
        a._accum(g * probs / n)

    return Tensor._result(out_data, (a,), bwd)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=None) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (weight init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype or DEFAULT_DTYPE)


def grad_check(f, x: Tensor, n_coords: int | None = None, h: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` maps a Tensor to a scalar Tensor. Checked coordinates are sampled
    without replacement when ``n_coords`` is given. Run in float64.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    out.backward()
    if x64.grad is None:
        raise MissingGradient("f did not propagate gradients to x")
    analytic = x64.grad.reshape(-1)

    size = x64.data.size
    if n_coords is None or n_coords >= size:
        coords = np.arange(size)
    else:
        coords = np.random.default_rng(seed).choice(size, size=n_coords, replace=False)

    flat = x64.data.reshape(-1)
    max_rel = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = float(f(Tensor(x64.data.copy())).data)
        flat[c] = orig - h
        fm = float(f(Tensor(x64.data.copy())).data)
        flat[c] = orig
        numeric = (fp - fm) / (2 * h)
        denom = max(abs(numeric) + abs(analytic[c]), 1e-8)
        max_rel = max(max_rel, abs(numeric - analytic[c]) / denom)
    return max_rel
