"""Cox-de Boor B-spline bases on uniform extended grids."""
from __future__ import annotations

import numba
import numpy as np

from .errors import DomainError
from .tensor import Tensor, apply_op


def uniform_knots(num_knots: int, order: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """``num_knots`` equal intervals on [lo, hi], padded by ``order`` intervals per side.

    Returns ``num_knots + 2 * order + 1`` knot values.
    """
    if num_knots < 1 or order < 1:
        raise DomainError("num_knots and order must both be >= 1")
    if not lo < hi:
        raise DomainError(f"grid range must satisfy lo < hi, got [{lo}, {hi}]")
    h = (hi - lo) / num_knots
    return lo + h * np.arange(-order, num_knots + order + 1, dtype=np.float64)


def _check_knots(knots: np.ndarray, order: int) -> None:
    if order < 1:
        raise DomainError(f"spline order must be >= 1, got {order}")
    if knots.ndim != 1 or knots.size < order + 2:
        raise DomainError(f"need at least order + 2 = {order + 2} knots, got shape {knots.shape}")
    if np.any(np.diff(knots) <= 0):
        raise DomainError("knots must be strictly increasing")


def _recurse(x: np.ndarray, t: np.ndarray, order: int) -> list[np.ndarray]:
    """Basis tables for degrees 0..order; entry k has shape x.shape + (len(t) - k - 1,)."""
    x = x[..., None]
    levels = [((x >= t[:-1]) & (x < t[1:])).astype(x.dtype)]
    for k in range(1, order + 1):
        prev = levels[-1]
        left = (x - t[: -k - 1]) / (t[k:-1] - t[: -k - 1])
        right = (t[k + 1:] - x) / (t[k + 1:] - t[1:-k])
        levels.append(left * prev[..., :-1] + right * prev[..., 1:])
    return levels


def basis_values(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """B_k(x) for every basis function; inputs outside the knot span give zeros."""
    knots = np.asarray(knots)
    _check_knots(knots, order)
    x = np.asarray(x)
    return _recurse(x, knots.astype(x.dtype), order)[-1]


def _derivative_from(lower: np.ndarray, x_dtype, t: np.ndarray, order: int) -> np.ndarray:
    # d/dx B_{i,p} = p/(t[i+p]-t[i]) B_{i,p-1} - p/(t[i+p+1]-t[i+1]) B_{i+1,p-1}
    a = order / (t[order:-1] - t[: -order - 1])
    b = order / (t[order + 1:] - t[1:-order])
    return (a * lower[..., :-1] - b * lower[..., 1:]).astype(x_dtype)


def basis_derivatives(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    knots = np.asarray(knots)
    _check_knots(knots, order)
    x = np.asarray(x)
    t = knots.astype(x.dtype)
    lower = _recurse(x, t, order - 1)[-1]
    return _derivative_from(lower, x.dtype, t, order)


@numba.njit(cache=True)
def _basis_tables(x, t, order):
    """Top-degree and next-lower basis values for a flat x, using compiled loops."""
    n = x.size
    nt = t.size
    top = np.zeros((n, nt - order - 1), dtype=x.dtype)
    low = np.zeros((n, nt - order), dtype=x.dtype)
    work = np.empty(nt - 1, dtype=x.dtype)
    for j in range(n):
        xj = x[j]
        for i in range(nt - 1):
            work[i] = 1.0 if (xj >= t[i] and xj < t[i + 1]) else 0.0
        for k in range(1, order + 1):
            if k == order:
                for i in range(nt - k):
                    low[j, i] = work[i]
            for i in range(nt - k - 1):
                left = (xj - t[i]) / (t[i + k] - t[i]) * work[i]
                right = (t[i + k + 1] - xj) / (t[i + k + 1] - t[i + 1]) * work[i + 1]
                work[i] = left + right
        for i in range(nt - order - 1):
            top[j, i] = work[i]
    return top, low


@numba.njit(cache=True)
def _contract_derivative(g, low, t, order):
    """sum_i g[j, i] * dB_i(x_j), accumulated in float64."""
    n, nb = g.shape
    out = np.empty(n, dtype=g.dtype)
    for j in range(n):
        acc = 0.0
        for i in range(nb):
            d = order / (t[i + order] - t[i]) * low[j, i] - order / (t[i + order + 1] - t[i + 1]) * low[j, i + 1]
            acc += np.float64(g[j, i]) * np.float64(d)
        out[j] = acc
    return out


def bspline_basis(x: Tensor, knots: np.ndarray, order: int) -> Tensor:
    """Differentiable basis evaluation: output shape is ``x.shape + (n_basis,)``."""
    knots = np.asarray(knots)
    _check_knots(knots, order)
    xd = x.data
    t = knots.astype(xd.dtype)
    top, low = _basis_tables(np.ascontiguousarray(xd).reshape(-1), t, order)
    nb = top.shape[1]

    def bw(g):
        flat = np.ascontiguousarray(g).reshape(-1, nb)
        return (_contract_derivative(flat, low, t, order).reshape(xd.shape),)

    return apply_op(top.reshape(xd.shape + (nb,)), (x,), bw)
