"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` when at least one input
requires a gradient.  Outside a tape every operation is a plain numpy
evaluation, which is what inference uses.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True, name="x")
    >>> with Tape():
    ...     loss = total(mul(x, x))
    >>> backward(loss)["x"].data
    array([2., 4., 6.])

Broadcasting is deliberately narrow: the second operand of an elementwise
operation may have the shape of a trailing suffix of the first (bias and
position-embedding adds).  Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, detached loss, ...)."""


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "pitvqa_active_tape", default=None
)


@dataclass
class Node:
    kind: str
    inputs: tuple["Tensor", ...]
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations on grad-enabled tensors inside the
    block are appended in execution order, which is a topological order.
    A tape has a single writer.
    """

    _counter = 0

    def __init__(self) -> None:
        Tape._counter += 1
        self.id = Tape._counter
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Immutable float64 array, optionally participating in a tape."""

    __slots__ = ("data", "grad_enabled", "name", "tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.grad_enabled = bool(requires_grad)
        self.name = name
        self.tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self.tape is None else self.tape.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{kind}: produced non-finite values")
    tape = _active_tape.get()
    out = Tensor(data)
    if tape is not None and any(t.grad_enabled for t in inputs):
        for t in inputs:
            if t.tape is not None and t.tape is not tape:
                raise TapeError(f"{kind}: input was recorded on a different tape")
        out.grad_enabled = True
        out.tape = tape
        out._node = len(tape.nodes)
        tape.nodes.append(Node(kind, inputs, out, backward_fn))
    return out


def _suffix_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    """Leading axes of ``a`` that ``b`` is broadcast over."""
    if a.shape == b.shape:
        return ()
    k = b.ndim
    if k <= a.ndim and a.shape[a.ndim - k:] == b.shape:
        return tuple(range(a.ndim - k))
    raise ShapeError(f"{kind}: cannot broadcast {b.shape} onto {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_broadcast("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes) if axes else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_broadcast("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -(g.sum(axis=axes) if axes else g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    axes = _suffix_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=axes) if axes else gb)

    return _result("mul", ad * bd, (a, b), back)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Dispatch ``add``/``sub``/``mul`` by name."""
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch axes must agree or one side is 2-D."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *ad.shape).sum(axis=0)
        if bd.ndim == 2:
            # fold batch axes into rows: one GEMM instead of a batched one
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    src = x.shape
    return _result("total", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src),))


def reduce_mean(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    src = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src),)

    return _result("reduce_mean", x.data.mean(axis=axis), (x,), back)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_A * xd * xd * xd))
    y = 0.5 * xd * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result("gelu", y, (x,), back)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), back)


class DegenerateBatchError(ValueError):
    """Train-mode batch normalization on a single row."""


def batch_norm_1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-10,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalization over axis 0 of a ``[batch, feat]`` tensor.

    Returns the output together with the (possibly updated) running mean
    and variance.  Train mode normalizes with the biased batch variance and
    folds the unbiased variance into the running estimate; eval mode uses
    the running statistics only and leaves them untouched.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batch_norm_1d: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd, gd = x.data, gamma.data
    n = xd.shape[0]
    if training:
        if n < 2:
            raise DegenerateBatchError("batch_norm_1d: train mode needs at least 2 rows")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).mean(axis=0)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var * (n / (n - 1))

        def back(g):
            dxhat = g * gd
            dx = rstd * (
                dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        rstd = 1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps)
        xhat = (xd - running_mean) * rstd
        new_mean, new_var = running_mean, running_var

        def back(g):
            return g * gd * rstd, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = _result("batch_norm_1d", xhat * gd + beta.data, (x, gamma, beta), back)
    return out, new_mean, new_var


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` may be any integer array shape."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab, d = table.shape
    bad = idx[(idx < 0) | (idx >= vocab)]
    if bad.size:
        raise IndexError(f"embedding_lookup: id {int(bad[0])} outside [0, {vocab})")

    def back(g):
        gt = np.zeros((vocab, d))
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _result("embedding", table.data[idx].reshape(*idx.shape, d), (table,), back)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity (same object) when ``p == 0`` or not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def where_mask(x: Tensor, allowed: np.ndarray, fill: float = -1e30) -> Tensor:
    """Replace entries where ``allowed`` is False by ``fill``.

    ``allowed`` broadcasts against ``x`` with numpy rules; it is a constant
    and receives no gradient.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    return _result(
        "where_mask", np.where(allowed, x.data, fill), (x,), lambda g: (np.where(allowed, g, 0.0),)
    )


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [batch, C], got {logits.shape}")
    b, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape != (b,):
        raise ShapeError(f"cross_entropy: {t.size} targets for batch {b}")
    bad = t[(t < 0) | (t >= c)]
    if bad.size:
        raise IndexError(f"cross_entropy: target {int(bad[0])} outside [0, {c})")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(b)
    loss = np.mean(lse - ld[rows, t])

    def back(g):
        p = e / s
        p[rows, t] -= 1.0
        return (p * (g / b),)

    return _result("cross_entropy", np.asarray(loss), (logits,), back)


def _backprop(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None or loss._node is None:
        raise TapeError("loss is not connected to a tape")
    nodes = loss.tape.nodes
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(nodes[: loss._node + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.grad_enabled:
                continue
            key = id(t)
            if t._node is None:
                prev = leaves.get(key)
                leaves[key] = (t, gi if prev is None else prev[1] + gi)
            else:
                prev_g = grads.get(key)
                grads[key] = gi if prev_g is None else prev_g + gi
    return leaves


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` for every named grad-enabled leaf.

    Leaves that the loss does not depend on are absent from the result.
    """
    out: dict[str, Tensor] = {}
    for t, g in _backprop(loss).values():
        if t.name is not None:
            out[t.name] = Tensor(np.array(g, dtype=np.float64).reshape(t.shape))
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray | None]:
    """Gradients of ``loss`` with respect to specific leaf tensors."""
    leaves = _backprop(loss)
    res = []
    for t in wrt:
        hit = leaves.get(id(t))
        res.append(None if hit is None else np.asarray(hit[1]).reshape(t.shape))
    return res


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape))
