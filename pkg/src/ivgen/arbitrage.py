"""Static-arbitrage metrics: calendar and butterfly spreads on total variance.

Surfaces quoted in delta are converted to log-moneyness m = log(K/S) under
zero rates, and the metrics act on total implied variance w = sigma^2 tau:
calendar spreads difference w across adjacent maturities at shared m
nodes, butterfly values are Gatheral's g(m) with derivatives estimated by
nonuniform three-point central differences at interior nodes. Negative
values flag arbitrage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import DataError, DomainError

POOLED_QUANTILES = (0.001, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 0.999)
COUNT_QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


def delta_to_logmoneyness(delta, sigma, tau):
    """m = -ndtri(delta) * sigma * sqrt(tau) + sigma^2 tau / 2, zero rates."""
    delta = np.asarray(delta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(delta <= 0.0) or np.any(delta >= 1.0):
        raise DomainError("delta at or beyond 0/1 maps to infinite log-moneyness")
    if np.any(sigma <= 0.0) or np.any(tau <= 0.0):
        raise DomainError("sigma and tau must be positive")
    return -ndtri(delta) * sigma * np.sqrt(tau) + 0.5 * sigma**2 * tau


@dataclass(frozen=True)
class SurfaceSlice:
    """One maturity's (log-moneyness, total variance) nodes, m ascending."""

    tau: float
    m: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        if self.m.shape != self.w.shape or self.m.ndim != 1:
            raise DomainError("m and w must be matching 1-D arrays")
        if np.any(np.diff(self.m) <= 0.0):
            raise DataError(f"log-moneyness nodes must be strictly increasing at tau={self.tau}")
        if np.any(self.w < 0.0):
            raise DomainError(f"negative total variance at tau={self.tau}")


def build_slices(delta, tau, iv) -> list:
    """Group quotes by maturity into SurfaceSlices sorted by tau.

    Inputs are flat parallel arrays in raw units. Each maturity needs at
    least three deltas; coincident log-moneyness nodes (within 1e-10) are
    rejected as collisions.
    """
    delta = np.asarray(delta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    iv = np.asarray(iv, dtype=float)
    if not (delta.shape == tau.shape == iv.shape) or delta.ndim != 1:
        raise DomainError("delta, tau, iv must be matching 1-D arrays")
    slices = []
    for t in np.unique(tau):
        mask = tau == t
        if mask.sum() < 3:
            raise DomainError(f"need at least 3 deltas per maturity, got {mask.sum()} at tau={t}")
        m = delta_to_logmoneyness(delta[mask], iv[mask], t)
        w = iv[mask] ** 2 * t
        order = np.argsort(m)
        m, w = m[order], w[order]
        if np.any(np.diff(m) < 1e-10):
            raise DataError(f"log-moneyness collision within 1e-10 at tau={t}")
        slices.append(SurfaceSlice(tau=float(t), m=m, w=w))
    return slices


def calendar_metrics(slices) -> np.ndarray:
    """(n_maturities-1, n_nodes) matrix of finite-difference d w / d tau.

    Each adjacent maturity pair shares the shorter slice's m nodes; the
    longer slice's w is interpolated piecewise-linearly in m with flat
    extrapolation beyond its range.
    """
    slices = sorted(slices, key=lambda s: s.tau)
    if len(slices) < 2:
        raise DomainError("calendar metrics need at least two maturities")
    n_nodes = {s.m.size for s in slices}
    if len(n_nodes) != 1:
        raise DataError("slices must share a common node count")
    out = np.empty((len(slices) - 1, n_nodes.pop()))
    for i in range(1, len(slices)):
        short, long_ = slices[i - 1], slices[i]
        w_long = np.interp(short.m, long_.m, long_.w)
        out[i - 1] = (w_long - short.w) / (long_.tau - short.tau)
    return out


def _central_derivatives(m, w):
    """First and second derivative at interior nodes, nonuniform 3-point."""
    h1 = m[1:-1] - m[:-2]
    h2 = m[2:] - m[1:-1]
    w0, w1, w2 = w[:-2], w[1:-1], w[2:]
    d1 = (-h2 / (h1 * (h1 + h2))) * w0 + ((h2 - h1) / (h1 * h2)) * w1 + (h1 / (h2 * (h1 + h2))) * w2
    d2 = 2.0 * (w0 / (h1 * (h1 + h2)) - w1 / (h1 * h2) + w2 / (h2 * (h1 + h2)))
    return d1, d2


def butterfly_metrics(slice_: SurfaceSlice) -> np.ndarray:
    """Gatheral's g(m) at the interior nodes of one maturity slice."""
    if slice_.m.size < 3:
        raise DomainError("butterfly metrics need at least 3 nodes")
    m = slice_.m[1:-1]
    w = slice_.w[1:-1]
    if np.any(w == 0.0):
        node = int(np.flatnonzero(w == 0.0)[0]) + 1
        raise DomainError(f"zero total variance at interior node {node} (tau={slice_.tau})")
    d1, d2 = _central_derivatives(slice_.m, slice_.w)
    return (1.0 - m * d1 / (2.0 * w)) ** 2 - (d1**2 / 4.0) * (1.0 / w + 0.25) + d2 / 2.0


@dataclass(frozen=True)
class DayMetrics:
    """Calendar and butterfly values of one surface observation."""

    equity: str
    day: object
    calendar: np.ndarray
    butterfly: np.ndarray
    scenario: int = None  # set for generated data, None for observed panels


def surface_day_metrics(delta, tau, iv, equity="", day=None, scenario=None) -> DayMetrics:
    slices = build_slices(delta, tau, iv)
    cs = calendar_metrics(slices).ravel()
    bs = np.concatenate([butterfly_metrics(s) for s in slices])
    return DayMetrics(equity=equity, day=day, calendar=cs, butterfly=bs, scenario=scenario)


def panel_day_metrics(panel) -> list:
    """Per-(date, equity) metrics of a raw panel."""
    if panel.transformed:
        raise DataError("arbitrage metrics are computed on raw panels")
    out = []
    for d in panel.dates:
        for e in panel.equities:
            q = panel.quotes[(d, e)]
            out.append(surface_day_metrics(q[:, 0], q[:, 1], q[:, 2], equity=e, day=d))
    return out


def scenario_day_metrics(decoded) -> list:
    """Per-(scenario, step, equity) metrics of decoded scenarios."""
    out = []
    n_scen, n_steps, n_eq, _ = decoded.ivs.shape
    for s in range(n_scen):
        for t in range(n_steps):
            for ei, e in enumerate(decoded.equities):
                out.append(
                    surface_day_metrics(
                        decoded.grid_delta,
                        decoded.grid_tau,
                        decoded.ivs[s, t, ei],
                        equity=e,
                        day=t + 1,
                        scenario=s,
                    )
                )
    return out


@dataclass(frozen=True)
class ArbReport:
    """Pooled quantiles and negative-day statistics per equity and metric."""

    equities: tuple
    pooled_levels: tuple
    count_levels: tuple
    quantiles: dict = field(repr=False)  # (equity, kind) -> array over pooled_levels
    negative_days: dict = field(repr=False)  # (equity, kind) -> int
    total_days: dict = field(repr=False)  # equity -> int
    negative_day_rate: dict = field(repr=False)  # (equity, kind) -> float
    scenario_count_quantiles: dict = field(repr=False)  # (equity, kind) -> array or None


def arbitrage_summary(day_metrics) -> ArbReport:
    """Aggregate per-day metrics into the report behind the quantile tables.

    Pooled metric quantiles use the standard levels; when the input is
    scenario-structured, per-scenario counts of days with any negative
    metric are summarized at the count levels.
    """
    day_metrics = list(day_metrics)
    if not day_metrics:
        raise DataError("no day metrics supplied")
    equities = tuple(sorted({dm.equity for dm in day_metrics}))
    kinds = ("calendar", "butterfly")
    quantiles = {}
    negative_days = {}
    total_days = {}
    rates = {}
    scen_quants = {}
    for e in equities:
        rows = [dm for dm in day_metrics if dm.equity == e]
        total_days[e] = len(rows)
        for kind in kinds:
            pooled = np.concatenate([getattr(dm, kind) for dm in rows])
            quantiles[(e, kind)] = np.quantile(pooled, POOLED_QUANTILES)
            neg = [bool(np.any(getattr(dm, kind) < 0.0)) for dm in rows]
            negative_days[(e, kind)] = int(np.sum(neg))
            rates[(e, kind)] = float(np.mean(neg))
            scen_ids = sorted({dm.scenario for dm in rows if dm.scenario is not None})
            if scen_ids:
                counts = np.array(
                    [
                        sum(
                            1
                            for dm in rows
                            if dm.scenario == s and np.any(getattr(dm, kind) < 0.0)
                        )
                        for s in scen_ids
                    ],
                    dtype=float,
                )
                scen_quants[(e, kind)] = np.quantile(counts, COUNT_QUANTILES)
            else:
                scen_quants[(e, kind)] = None
    return ArbReport(
        equities=equities,
        pooled_levels=POOLED_QUANTILES,
        count_levels=COUNT_QUANTILES,
        quantiles=quantiles,
        negative_days=negative_days,
        total_days=total_days,
        negative_day_rate=rates,
        scenario_count_quantiles=scen_quants,
    )


def write_quantile_table_csv(reports: dict, kind: str, path) -> None:
    """Quantile table CSV with one column per (equity, source) pair.

    reports maps a source label (e.g. 'obs', 'sim') to an ArbReport.
    """
    import csv

    labels = list(reports)
    equities = sorted({e for r in reports.values() for e in r.equities})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantile"] + [f"{e}_{lab}" for e in equities for lab in labels])
        for qi, q in enumerate(POOLED_QUANTILES):
            row = [f"{q:g}"]
            for e in equities:
                for lab in labels:
                    rep = reports[lab]
                    val = rep.quantiles.get((e, kind))
                    row.append(f"{val[qi]:.6g}" if val is not None else "")
            writer.writerow(row)


def write_negative_days_csv(reports: dict, kind: str, path) -> None:
    """Negative-day count table: scenario count quantiles plus observed totals."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["equity"] + [f"q{int(q * 100)}" for q in COUNT_QUANTILES] + [
            f"{lab}_days" for lab in reports
        ]
        writer.writerow(header)
        equities = sorted({e for r in reports.values() for e in r.equities})
        for e in equities:
            row = [e]
            scen_vals = None
            for rep in reports.values():
                sq = rep.scenario_count_quantiles.get((e, kind))
                if sq is not None:
                    scen_vals = sq
            if scen_vals is None:
                row += [""] * len(COUNT_QUANTILES)
            else:
                row += [f"{v:.6g}" for v in scen_vals]
            for rep in reports.values():
                nd = rep.negative_days.get((e, kind))
                row.append("" if nd is None else str(nd))
            writer.writerow(row)
