"""Tensor-product Legendre basis and per-day least-squares surface fits.

Basis functions are products L_i(x) * L_j(y) of orthonormal Legendre
polynomials on [-1, 1], with x the transformed maturity and y the
transformed delta, capped by total degree i + j <= order_cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, IllPosedError

_COND_LIMIT = 1e12


def legendre_eval(m: int, x):
    """Orthonormal Legendre polynomial sqrt((2m+1)/2) * P_m(x) on [-1, 1].

    P_m is evaluated with the three-term recurrence
    (k+1) P_{k+1} = (2k+1) x P_k - k P_{k-1}, which is stable on [-1, 1].
    Accepts scalars or arrays.
    """
    if m < 0:
        raise DomainError(f"polynomial order must be nonnegative, got {m}")
    x = np.asarray(x, dtype=float)
    if np.any(x < -1.0) or np.any(x > 1.0):
        raise DomainError("legendre_eval requires x in [-1, 1]")
    p_prev = np.ones_like(x)
    if m == 0:
        return np.sqrt(0.5) * p_prev
    p = x.copy()
    for k in range(1, m):
        p, p_prev = ((2 * k + 1) * x * p - k * p_prev) / (k + 1), p
    return np.sqrt((2 * m + 1) / 2.0) * p


def _legendre_table(max_order: int, x: np.ndarray) -> np.ndarray:
    """All orthonormal Legendre values L_0..L_max at x, shape (len(x), max_order+1)."""
    x = np.asarray(x, dtype=float)
    table = np.empty(x.shape + (max_order + 1,))
    table[..., 0] = 1.0
    if max_order >= 1:
        table[..., 1] = x
    for k in range(1, max_order):
        table[..., k + 1] = ((2 * k + 1) * x * table[..., k] - k * table[..., k - 1]) / (k + 1)
    norms = np.sqrt((2 * np.arange(max_order + 1) + 1) / 2.0)
    return table * norms


@dataclass(frozen=True)
class BasisSet:
    """Graded-lexicographic enumeration of exponent pairs with i + j <= order_cap."""

    order_cap: int
    members: tuple = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.members)

    def design_matrix(self, x, y) -> np.ndarray:
        """Rows phi_k(x_n, y_n) for all members k; x is maturity, y is delta."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.any(np.abs(x) > 1.0) or np.any(np.abs(y) > 1.0):
            raise DomainError("basis evaluation requires coordinates in [-1, 1]^2")
        lx = _legendre_table(self.order_cap, x)
        ly = _legendre_table(self.order_cap, y)
        cols = [lx[:, i] * ly[:, j] for i, j in self.members]
        return np.column_stack(cols)


def enumerate_basis(n_o: int) -> BasisSet:
    """Basis members ordered by total degree, then by the maturity exponent."""
    if n_o < 0:
        raise DomainError(f"order cap must be nonnegative, got {n_o}")
    members = tuple((i, g - i) for g in range(n_o + 1) for i in range(g + 1))
    assert len(members) == (n_o + 1) * (n_o + 2) // 2
    return BasisSet(order_cap=n_o, members=members)


@dataclass(frozen=True)
class SurfaceCoefficients:
    """Least-squares coefficients of one day's surface on a BasisSet."""

    date: object
    equity: str
    a: np.ndarray
    rmse: float


def project_surface(basis: BasisSet, tau, delta, iv, *, date=None, equity="") -> SurfaceCoefficients:
    """Fit iv ~ sum_k a_k phi_k(tau, delta) by least squares.

    Inputs are in transformed coordinates. Solved through an orthogonal
    decomposition (SVD-backed lstsq), never the normal equations. Requires
    more quotes than basis functions and a well-conditioned design.
    """
    tau = np.asarray(tau, dtype=float)
    delta = np.asarray(delta, dtype=float)
    iv = np.asarray(iv, dtype=float)
    if not (tau.shape == delta.shape == iv.shape):
        raise DomainError("tau, delta, iv must have matching shapes")
    if tau.size < basis.size:
        raise DomainError(
            f"underdetermined fit: {tau.size} quotes for {basis.size} basis functions"
        )
    design = basis.design_matrix(tau, delta)
    cond = np.linalg.cond(design)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IllPosedError(
            f"design matrix condition number {cond:.3g} exceeds {_COND_LIMIT:.0e}"
            + (f" on {date}" if date is not None else "")
        )
    a, _, _, _ = np.linalg.lstsq(design, iv, rcond=None)
    resid = iv - design @ a
    rmse = float(np.sqrt(np.mean(resid**2)))
    return SurfaceCoefficients(date=date, equity=equity, a=a, rmse=rmse)


def eval_surface(a, basis: BasisSet, x, y):
    """Evaluate sum_k a_k phi_k(x, y); scalar in, scalar out."""
    a = np.asarray(a, dtype=float)
    if a.shape != (basis.size,):
        raise DomainError(f"coefficient vector has shape {a.shape}, expected ({basis.size},)")
    scalar = np.isscalar(x) and np.isscalar(y)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x, y = np.broadcast_arrays(x, y)
    values = basis.design_matrix(x.ravel(), y.ravel()) @ a
    values = values.reshape(x.shape)
    return float(values[0]) if scalar else values


def gauss_legendre_gram(basis: BasisSet, nodes_per_axis: int = 12) -> np.ndarray:
    """Gram matrix of the basis under Gauss-Legendre quadrature on [-1,1]^2."""
    nodes, weights = np.polynomial.legendre.leggauss(nodes_per_axis)
    xg, yg = np.meshgrid(nodes, nodes, indexing="ij")
    wg = np.outer(weights, weights).ravel()
    design = basis.design_matrix(xg.ravel(), yg.ravel())
    return design.T @ (design * wg[:, None])
