"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import Tape, Tensor, grad


def relative_error(a, b) -> np.ndarray:
    """``|a - b| / max(1e-8, |a| + |b|)``, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def numeric_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    The step for coordinate i is ``h * max(1, |x_i|)``.  When ``coords`` is
    given only those flat indices are perturbed; the rest of the result is
    left as NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape():
        y = f(leaf)
    (g,) = grad(y, [leaf])
    return np.zeros(leaf.shape) if g is None else g


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backward and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and is evaluated both on a tape
    (analytic path) and on plain values (numeric path).
    """
    x = np.array(x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numeric_grad(lambda v: f(Tensor(v)).item(), x, h)
    return float(relative_error(a, n).max()) if x.size else 0.0
