"""Model-validation diagnostics: PIT ACF, pairwise-sum KS tests, rolling correlations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DataError, DomainError
from .training import PIT_CLAMP, PitSeries

KS_CRITICAL = {0.01: 1.628, 0.05: 1.358}


@dataclass(frozen=True)
class KsResult:
    """One-sample Kolmogorov-Smirnov test against Uniform(0,1)."""

    statistic: float
    n: int
    reject_1pct: bool
    reject_5pct: bool


def ks_uniform(samples) -> KsResult:
    """Sup-distance of the empirical CDF from the uniform CDF.

    Rejection uses the asymptotic critical values c(alpha)/sqrt(n) with
    c(0.01) = 1.628 and c(0.05) = 1.358.
    """
    u = np.sort(np.asarray(samples, dtype=float))
    n = u.size
    if n == 0:
        raise DataError("empty sample")
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise DomainError("KS-against-uniform requires samples in [0, 1]")
    grid = np.arange(1, n + 1) / n
    d_plus = np.max(grid - u)
    d_minus = np.max(u - (grid - 1.0 / n))
    stat = float(max(d_plus, d_minus))
    return KsResult(
        statistic=stat,
        n=n,
        reject_1pct=stat > KS_CRITICAL[0.01] / np.sqrt(n),
        reject_5pct=stat > KS_CRITICAL[0.05] / np.sqrt(n),
    )


def pit_acf(pits, max_lag: int) -> np.ndarray:
    """Sample autocorrelation of each PIT column, lags 1..max_lag.

    Zero-variance columns yield NaN rows with a warning rather than an
    error, mirroring how degenerate fits should surface in reports.
    """
    u = pits.U if isinstance(pits, PitSeries) else np.asarray(pits, dtype=float)
    n, d = u.shape
    if n <= max_lag:
        raise DataError(f"need more than max_lag={max_lag} observations, got {n}")
    out = np.empty((d, max_lag))
    centered = u - u.mean(axis=0)
    denom = (centered**2).sum(axis=0)
    for i in range(d):
        if denom[i] == 0.0:
            warnings.warn(f"constant PIT column {i}; autocorrelation undefined")
            out[i] = np.nan
            continue
        for lag in range(1, max_lag + 1):
            out[i, lag - 1] = (centered[:-lag, i] * centered[lag:, i]).sum() / denom[i]
    return out


def pairwise_sum_pit_ks(model, series) -> dict:
    """KS results for the PITs of every unordered feature-pair sum.

    The one-step conditional law of b^i + b^j is Gaussian with mean
    mu_i + mu_j and variance Sigma_ii + Sigma_jj + 2 Sigma_ij, so its PITs
    are uniform under correct specification.
    """
    from .nsde import cond_step_batched
    from .training import _states_of

    states = _states_of(series)
    t_len, d = states.shape
    if d < 2:
        raise DataError("pairwise diagnostics need at least two features")
    lag = model.lag
    if t_len <= lag + 1:
        raise DataError("series too short for the model lag")
    windows = np.lib.stride_tricks.sliding_window_view(states, (lag, d))[:-1, 0]
    mu, _, sigma = cond_step_batched(model, windows)
    target = model.normalize(states)[lag:]

    results = {}
    for i in range(d):
        for j in range(i + 1, d):
            mean = mu[:, i] + mu[:, j]
            var = sigma[:, i, i] + sigma[:, j, j] + 2.0 * sigma[:, i, j]
            obs = target[:, i] + target[:, j]
            u = ndtr((obs - mean) / np.sqrt(var))
            u = np.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP)
            results[(i, j)] = ks_uniform(u)
    return results


def rolling_correlations(a, b, window: int):
    """Pearson correlation over every length-`window` slide of two series.

    Returns (values, skipped) where skipped counts windows dropped for
    zero variance in either series.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("rolling correlation needs two equal-length 1-D series")
    n = a.size
    if n < window:
        raise DataError(f"series length {n} shorter than window {window}")
    values = []
    skipped = 0
    for start in range(n - window + 1):
        xa = a[start : start + window]
        xb = b[start : start + window]
        sa = xa.std()
        sb = xb.std()
        if sa == 0.0 or sb == 0.0:
            skipped += 1
            continue
        values.append(float(np.mean((xa - xa.mean()) * (xb - xb.mean())) / (sa * sb)))
    return np.array(values), skipped


def scenario_correlations(paths_a, paths_b):
    """One full-window correlation per scenario row; NaN rows are skipped."""
    a = np.asarray(paths_a, dtype=float)
    b = np.asarray(paths_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise DomainError("scenario correlation needs matching (S, T) arrays")
    am = a - a.mean(axis=1, keepdims=True)
    bm = b - b.mean(axis=1, keepdims=True)
    sa = am.std(axis=1)
    sb = bm.std(axis=1)
    ok = (sa > 0.0) & (sb > 0.0)
    vals = np.full(a.shape[0], np.nan)
    vals[ok] = (am[ok] * bm[ok]).mean(axis=1) / (sa[ok] * sb[ok])
    return vals[ok], int(np.sum(~ok))


def correlation_histogram(values, bins: int = 41):
    """Histogram of correlations on [-1, 1] for the JSON report."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=edges)
    return edges, counts
