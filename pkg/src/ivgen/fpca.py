"""Functional PCA on pooled basis coefficients and FPCC state assembly.

With an orthonormal basis the covariance-operator eigenproblem reduces to
PCA on the stacked coefficient matrix, so eigenfunctions are linear
combinations of the basis functions with orthonormal coefficient rows.
All equities share one mean surface and one set of eigenfunctions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSet, SurfaceCoefficients
from .errors import DataError, DomainError, IllPosedError, NumericalError


@dataclass(frozen=True)
class FpcaModel:
    """Retained eigenfunctions of the pooled surface covariance.

    Row m of C holds the basis coefficients of eigenfunction m, so
    psi_m(x, y) = sum_k C[m, k] * phi_k(x, y). `explained` is the running
    cumulative share of variance over all basis directions, not just the
    retained ones.
    """

    basis: BasisSet
    mean_coeffs: np.ndarray
    C: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray
    explained: np.ndarray
    M: int

    def __post_init__(self):
        B = self.basis.size
        if self.mean_coeffs.shape != (B,):
            raise DomainError("mean_coeffs length must match basis size")
        if self.C.shape != (self.M, B):
            raise DomainError("C must be M x B")
        if self.eigenvalues.shape != (self.M,):
            raise DomainError("eigenvalues length must equal M")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise NumericalError("eigenvalues must be nonincreasing")

    def mean_surface(self, x, y):
        from .basis import eval_surface

        return eval_surface(self.mean_coeffs, self.basis, x, y)

    def surface_matrix(self, x, y):
        """(mean values, psi matrix) on flattened grid nodes, for batch decode."""
        design = self.basis.design_matrix(np.ravel(x), np.ravel(y))
        return design @ self.mean_coeffs, design @ self.C.T


def fit_fpca(coeff_panels, threshold: float = 0.995) -> FpcaModel:
    """Eigendecompose the pooled, mean-centered coefficient matrix.

    coeff_panels is an iterable of SurfaceCoefficients across all equities
    and dates; rows are stacked into one matrix A. Components are retained
    until the cumulative explained variance reaches the threshold, and each
    eigenvector's sign is fixed so its largest-magnitude entry is positive.
    """
    if not 0.0 < threshold <= 1.0:
        raise DomainError(f"threshold must lie in (0, 1], got {threshold}")
    panels = list(coeff_panels)
    if not panels:
        raise DataError("no coefficient rows supplied")
    basis = None
    rows = []
    for p in panels:
        if not isinstance(p, SurfaceCoefficients):
            raise DomainError("coeff_panels must contain SurfaceCoefficients")
        rows.append(p.a)
    B = rows[0].shape[0]
    A = np.vstack(rows)
    if A.shape[0] <= B:
        raise DataError(f"need more than B={B} pooled rows, got {A.shape[0]}")

    mean = A.mean(axis=0)
    centered = A - mean
    cov = centered.T @ centered / A.shape[0]
    try:
        eigvals, eigvecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    total = eigvals.sum()
    if total <= 0.0:
        raise DataError("coefficient matrix has zero variance")
    explained = np.cumsum(eigvals) / total
    M = int(np.searchsorted(explained, threshold - 1e-12) + 1)
    M = min(M, B)

    C = eigvecs[:, :M].T.copy()
    for m in range(M):
        if C[m, np.argmax(np.abs(C[m]))] < 0:
            C[m] = -C[m]

    return FpcaModel(
        basis=_basis_of(panels[0], B),
        mean_coeffs=mean,
        C=C,
        eigenvalues=eigvals[:M].copy(),
        explained=explained,
        M=M,
    )


def _basis_of(panel: SurfaceCoefficients, B: int) -> BasisSet:
    from .basis import enumerate_basis

    # recover order cap from B = (n+1)(n+2)/2
    n_o = int(round((np.sqrt(8 * B + 1) - 3) / 2))
    basis = enumerate_basis(n_o)
    if basis.size != B:
        raise DomainError(f"coefficient length {B} is not a triangular basis size")
    return basis


def eval_fpc(model: FpcaModel, m: int, x, y):
    """Evaluate eigenfunction psi_m (1-based index) at transformed (x, y)."""
    if not 1 <= m <= model.M:
        raise IndexError(f"component index {m} outside 1..{model.M}")
    from .basis import eval_surface

    return eval_surface(model.C[m - 1], model.basis, x, y)


def project_to_fpcc(model: FpcaModel, tau, delta, iv) -> np.ndarray:
    """Least-squares FPCC vector of one day's transformed quotes.

    The common mean surface is subtracted from the quotes and the residual
    regressed on the retained eigenfunctions at the quote nodes.
    """
    tau = np.asarray(tau, dtype=float)
    delta = np.asarray(delta, dtype=float)
    iv = np.asarray(iv, dtype=float)
    if tau.size <= model.M:
        raise DomainError(f"need more than M={model.M} quotes, got {tau.size}")
    design = model.basis.design_matrix(tau, delta)
    psi = design @ model.C.T
    cond = np.linalg.cond(psi)
    if not np.isfinite(cond) or cond > 1e12:
        raise IllPosedError(f"eigenfunction design condition number {cond:.3g} too large")
    target = iv - design @ model.mean_coeffs
    b, _, _, _ = np.linalg.lstsq(psi, target, rcond=None)
    return b


def reconstruct_surface(model: FpcaModel, b, x, y):
    """mean surface + sum_m b_m psi_m at transformed (x, y)."""
    b = np.asarray(b, dtype=float)
    if b.shape != (model.M,):
        raise DomainError(f"b has shape {b.shape}, expected ({model.M},)")
    from .basis import eval_surface

    return eval_surface(model.mean_coeffs + model.C.T @ b, model.basis, x, y)


@dataclass(frozen=True)
class FpccSeries:
    """Per-date state vectors: M FPCCs per equity plus transformed prices.

    The state layout is fixed: for each equity in order its M FPCCs, then
    all E transformed prices, giving dimension M*E + E.
    """

    dates: tuple
    equities: tuple
    fpcc: np.ndarray  # (T, E, M)
    prices: np.ndarray  # (T, E)

    def __post_init__(self):
        T, E, M = self.fpcc.shape
        if len(self.dates) != T or len(self.equities) != E:
            raise DomainError("fpcc array shape inconsistent with dates/equities")
        if self.prices.shape != (T, E):
            raise DomainError("prices array shape inconsistent with fpcc")
        if np.any(~np.isfinite(self.fpcc)) or np.any(~np.isfinite(self.prices)):
            raise DataError("FPCC series contains non-finite entries")

    @property
    def M(self) -> int:
        return self.fpcc.shape[2]

    @property
    def n_equities(self) -> int:
        return self.fpcc.shape[1]

    @property
    def state_dim(self) -> int:
        E, M = self.fpcc.shape[1], self.fpcc.shape[2]
        return M * E + E

    def states(self) -> np.ndarray:
        """(T, state_dim) matrix in the fixed layout."""
        T, E, M = self.fpcc.shape
        return np.concatenate([self.fpcc.reshape(T, E * M), self.prices], axis=1)


def split_states(states: np.ndarray, n_equities: int, n_components: int):
    """Invert the state layout: returns (fpcc (..., E, M), prices (..., E))."""
    states = np.asarray(states, dtype=float)
    E, M = n_equities, n_components
    if states.shape[-1] != M * E + E:
        raise DomainError(
            f"state dimension {states.shape[-1]} does not match M*E+E = {M * E + E}"
        )
    fpcc = states[..., : E * M].reshape(states.shape[:-1] + (E, M))
    prices = states[..., E * M :]
    return fpcc, prices


def build_fpcc_series(model: FpcaModel, panel) -> FpccSeries:
    """Project every (date, equity) of a transformed panel onto the FPCs."""
    if not panel.transformed:
        raise DataError("FPCC series is built from a transformed panel")
    T, E = panel.n_dates, len(panel.equities)
    fpcc = np.empty((T, E, model.M))
    prices = np.empty((T, E))
    for ti, d in enumerate(panel.dates):
        for ei, e in enumerate(panel.equities):
            q = panel.quotes[(d, e)]
            fpcc[ti, ei] = project_to_fpcc(model, q[:, 1], q[:, 0], q[:, 2])
            prices[ti, ei] = panel.prices[(d, e)]
    return FpccSeries(
        dates=tuple(panel.dates), equities=tuple(panel.equities), fpcc=fpcc, prices=prices
    )
