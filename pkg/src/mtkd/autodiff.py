"""Minimal reverse-mode automatic differentiation on top of numpy.

Every primitive records its inputs and a backward rule on the output tensor.
Calling :meth:`Tensor.backward` on a scalar orders the recorded graph into a
:class:`Tape` and walks it in reverse, accumulating gradients into every leaf
that has ``requires_grad`` set.

All values are stored as 64-bit floats.
"""

from __future__ import annotations

from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "affine",
    "matmul",
    "swish",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log_clamped",
    "sqrt",
    "softmax_with_temperature",
    "batchnorm",
    "dropout",
    "concat",
    "grl",
    "batch_moments",
    "gradcheck",
]

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- differentiation -------------------------------------------------
    def backward(self) -> None:
        Tape(self).backward()

    # -- operators -------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, fn: BackwardFn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Ops reachable from ``output``, in an order where inputs precede users."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self) -> None:
        out = self.output
        if out.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {out.shape}")
        pending: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    g = np.array(g, dtype=np.float64)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def backward(loss: Tensor) -> Tape:
    """Backpropagate from a scalar ``loss``; returns the tape that was walked."""
    tape = Tape(loss)
    tape.backward()
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def fn(g):
        if p == 2.0:
            return (g * 2.0 * a.data,)
        return (g * p * a.data ** (p - 1.0),)

    data = a.data * a.data if p == 2.0 else a.data**p
    return _make(data, (a,), fn, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """``log(max(a, floor))``; the gradient is zero where the clamp is active."""
    a = _as_tensor(a)
    active = a.data > floor
    safe = np.where(active, a.data, floor)

    def fn(g):
        return (np.where(active, g / safe, 0.0),)

    return _make(np.log(safe), (a,), fn, "log_clamped")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), fn, "sqrt")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def swish(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)

    def fn(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(a.data * s, (a,), fn, "swish")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / n,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), fn, "mean")


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)

    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), fn, "getitem")


def concat(a, b) -> Tensor:
    """Join two ``N x D`` tensors column-wise."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat needs equal leading dimension, got {a.shape} and {b.shape}")
    d1 = a.shape[1]

    def fn(g):
        return g[:, :d1], g[:, d1:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), fn, "concat")


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), fn, "matmul")


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x: N x D_in``, ``W: D_in x D_out``, ``b: D_out``."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine dimension mismatch: x {x.shape} vs W {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"affine bias {b.shape} does not match W {W.shape}")

    def fn(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ W.data + b.data, (x, W, b), fn, "affine")


def softmax_with_temperature(logits, t: float = 1.0) -> Tensor:
    logits = _as_tensor(logits)
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    z = logits.data / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return ((s * (g - (g * s).sum(axis=-1, keepdims=True))) / t,)

    return _make(s, (logits,), fn, "softmax")


def batchnorm(
    x,
    gamma,
    beta,
    training: bool,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.1,
    eps: float = 1e-8,
) -> Tensor:
    """Batch normalisation over the leading axis of an ``N x D`` tensor.

    In training mode the batch's population mean and variance are used and the
    running statistics are updated in place by an exponential moving average.
    Evaluation mode reads the running statistics only.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm shapes x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    if training:
        if n < 2:
            raise ContractError(f"batchnorm in train mode needs N >= 2, got {n}")
        mu = x.data.mean(axis=0)
        var = ((x.data - mu) ** 2).mean(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def fn(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), fn, "batchnorm")


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval is identity."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def grl(x, lam: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, ``-lam`` times the gradient backward."""
    x = _as_tensor(x)
    if lam == 1.0:
        fn = lambda g: (-g,)  # noqa: E731
    else:
        fn = lambda g: (-lam * g,)  # noqa: E731
    return _make(x.data.copy(), (x,), fn, "grl")


def batch_moments(x) -> tuple[Tensor, Tensor]:
    """Population mean and standard deviation (divisor N) of a 1-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ContractError(f"batch_moments needs a vector with N >= 2, got shape {x.shape}")
    mu = tmean(x)
    centered = x - mu
    var = tmean(centered * centered)
    return mu, sqrt(var)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    numeric_scale: float = 1.0,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``f`` receives one :class:`Tensor` per entry of ``inputs`` and returns a
    scalar. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    ``numeric_scale`` multiplies the finite-difference estimate before the
    comparison; ``-1`` checks a path that runs through a gradient reversal.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.data.size != 1:
        raise ContractError("gradcheck needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("gradcheck: function value is not finite at the base point")
    out.backward()

    def value(args) -> float:
        v = f(*[Tensor(a) for a in args]).data
        if not np.isfinite(v).all():
            raise NumericError("gradcheck: function value became non-finite under perturbation")
        return float(v.reshape(-1)[0])

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        if not np.isfinite(analytic).all():
            raise NumericError(f"gradcheck: analytic gradient of input {i} is not finite")
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + eps
            hi = value(arrays)
            base[idx] = orig - eps
            lo = value(arrays)
            base[idx] = orig
            numeric = numeric_scale * (hi - lo) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
