"""Delta-hedging backtest under zero rates with daily self-financing rebalance.

A short at-the-money call is hedged with the market delta, defined as the
fixed point delta = Phi(d1(sigma(delta, tau))) on the quoted surface. The
ledger tracks the asset position and bank balance exactly; terminal P&L
settles the option payoff and liquidates the position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import DataError, DomainError, NumericalError

DAYS_PER_YEAR = 365.0
_DELTA_LO, _DELTA_HI = 0.01, 0.99
_BISECT_TOL = 1e-10
_BISECT_MAX = 200
_FIXED_POINT_ITERS = 100
_FIXED_POINT_DAMPING = 0.5


def bs_price_delta(S, K, sigma, tau):
    """Zero-rate Black-Scholes call price and delta; tau=0 is intrinsic."""
    S = np.asarray(S, dtype=float)
    K = np.asarray(K, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(S <= 0) or np.any(K <= 0) or np.any(sigma <= 0) or np.any(tau < 0):
        raise DomainError("bs_price_delta requires S, K, sigma > 0 and tau >= 0")
    scalar = S.ndim == 0 and K.ndim == 0 and sigma.ndim == 0 and tau.ndim == 0
    S, K, sigma, tau = np.broadcast_arrays(S, K, sigma, tau)
    price = np.empty(S.shape)
    delta = np.empty(S.shape)
    expired = tau == 0.0
    if np.any(expired):
        price[expired] = np.maximum(S[expired] - K[expired], 0.0)
        delta[expired] = (S[expired] > K[expired]).astype(float)
    live = ~expired
    if np.any(live):
        srt = sigma[live] * np.sqrt(tau[live])
        d1 = (np.log(S[live] / K[live]) + 0.5 * srt * srt) / srt
        delta[live] = ndtr(d1)
        price[live] = S[live] * ndtr(d1) - K[live] * ndtr(d1 - srt)
    if scalar:
        return float(price), float(delta)
    return price, delta


def _bs_delta_of_sigma(S, K, sigma, tau):
    srt = sigma * np.sqrt(tau)
    return ndtr((np.log(S / K) + 0.5 * sigma**2 * tau) / srt)


def implicit_delta_vec(sigma_fn, S, K, tau):
    """Market delta per scenario: solve f(d) = d - Phi(d1(sigma(d, tau))) = 0.

    sigma_fn maps (delta array, tau scalar) to IVs per scenario. Bisection
    runs on [0.01, 0.99]; entries without a sign change fall back to damped
    fixed-point iteration from 0.5 and are flagged non-bracketed.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]

    def f(d):
        sig = np.asarray(sigma_fn(d, tau), dtype=float)
        if np.any(sig <= 0.0):
            raise NumericalError("surface returned nonpositive IV during delta solve")
        return d - _bs_delta_of_sigma(S, K, sigma=sig, tau=tau)

    lo = np.full(n, _DELTA_LO)
    hi = np.full(n, _DELTA_HI)
    f_lo = f(lo)
    f_hi = f(hi)
    bracketed = np.sign(f_lo) * np.sign(f_hi) <= 0.0

    delta = np.full(n, 0.5)
    if np.any(bracketed):
        blo = lo.copy()
        bhi = hi.copy()
        for _ in range(_BISECT_MAX):
            mid = 0.5 * (blo + bhi)
            fm = f(mid)
            go_low = np.sign(fm) * np.sign(f_lo) > 0.0
            blo = np.where(bracketed & go_low, mid, blo)
            f_lo = np.where(bracketed & go_low, fm, f_lo)
            bhi = np.where(bracketed & ~go_low, mid, bhi)
            if np.all(bhi[bracketed] - blo[bracketed] < _BISECT_TOL):
                break
        delta = np.where(bracketed, 0.5 * (blo + bhi), delta)
    if np.any(~bracketed):
        d = np.full(n, 0.5)
        for _ in range(_FIXED_POINT_ITERS):
            target = _bs_delta_of_sigma(S, K, np.asarray(sigma_fn(d, tau), float), tau)
            d = d + _FIXED_POINT_DAMPING * (target - d)
            d = np.clip(d, _DELTA_LO, _DELTA_HI)
        resid = np.abs(f(d))
        # a root beyond the delta bracket saturates at the boundary: the fixed
        # point pushes outward there (f < 0 at the top, f > 0 at the bottom)
        saturated = ((d >= _DELTA_HI) & (f_hi < 0.0)) | ((d <= _DELTA_LO) & (f_lo > 0.0))
        bad = (~bracketed) & (resid > 1e-6) & ~saturated
        if np.any(bad):
            idx = int(np.flatnonzero(bad)[0])
            raise NumericalError(
                f"implicit delta failed to converge (non-bracketed, residual "
                f"{resid[idx]:.3g} at scenario {idx}, S={S[idx]:.6g}, K={K}, tau={tau})"
            )
        delta = np.where(bracketed, delta, d)
    return delta, bracketed


def implicit_delta(surface, S, K, tau, *, full_output=False):
    """Scalar market delta on one surface callable sigma(delta, tau)."""
    if S <= 0 or K <= 0 or tau <= 0:
        raise DomainError("implicit_delta requires S, K, tau > 0")

    def vec_fn(d, t):
        return np.atleast_1d(np.asarray(surface(d, t), dtype=float))

    delta, bracketed = implicit_delta_vec(vec_fn, np.array([float(S)]), float(K), float(tau))
    if full_output:
        return float(delta[0]), bool(bracketed[0])
    return float(delta[0])


@dataclass(frozen=True)
class HedgeContract:
    """One short European call hedged with the underlying."""

    equity: str
    strike: float
    expiry_steps: int = 30

    def __post_init__(self):
        if self.strike <= 0.0:
            raise DomainError("strike must be positive")
        if self.expiry_steps < 1:
            raise DomainError("expiry_steps must be at least 1")


@dataclass(frozen=True)
class HedgeLedger:
    """Daily positions and bank balances of one hedged path."""

    deltas: np.ndarray = field(repr=False)  # position held over (t, t+1]
    bank: np.ndarray = field(repr=False)
    premium: float
    pnl: float


def run_hedge(surfaces, prices, contract: HedgeContract) -> HedgeLedger:
    """Hedge one path given per-day surface callables and spot prices.

    surfaces[t] must be callable as sigma(delta, tau) for rebalance days
    t = 0..expiry-1; prices needs expiry+1 points (day 0 through expiry).
    The premium is the Black-Scholes price at the day-0 implicit-delta IV.
    """
    tau0 = contract.expiry_steps
    prices = np.asarray(prices, dtype=float)
    if prices.size < tau0 + 1:
        raise DataError(
            f"path too short: need {tau0 + 1} price points for expiry {tau0}, got {prices.size}"
        )
    if len(surfaces) < tau0:
        raise DataError(f"need {tau0} surface days, got {len(surfaces)}")

    deltas = np.empty(tau0)
    bank = np.empty(tau0)
    k = contract.strike

    tau_years = tau0 / DAYS_PER_YEAR
    d0 = implicit_delta(surfaces[0], prices[0], k, tau_years)
    sigma0 = float(surfaces[0](d0, tau_years))
    premium, _ = bs_price_delta(prices[0], k, sigma0, tau_years)
    deltas[0] = d0
    bank[0] = premium - d0 * prices[0]
    for t in range(1, tau0):
        tau_t = (tau0 - t) / DAYS_PER_YEAR
        d_t = implicit_delta(surfaces[t], prices[t], k, tau_t)
        deltas[t] = d_t
        bank[t] = bank[t - 1] - (d_t - deltas[t - 1]) * prices[t]
    payoff = max(prices[tau0] - k, 0.0)
    pnl = bank[tau0 - 1] - payoff + deltas[tau0 - 1] * prices[tau0]
    return HedgeLedger(deltas=deltas, bank=bank, premium=float(premium), pnl=float(pnl))


def run_hedge_paths(surface_fns, prices, contract: HedgeContract, steps_per_day: int = 1):
    """Vectorized hedge across scenarios; returns the P&L array.

    surface_fns[j] is a vectorized sigma(delta array, tau scalar) for
    rebalance index j; prices has shape (n_scenarios, expiry*steps_per_day
    + 1). With steps_per_day > 1 the position is rebalanced several times
    per calendar day on the finer path.
    """
    prices = np.asarray(prices, dtype=float)
    tau0 = contract.expiry_steps
    n_rebal = tau0 * steps_per_day
    if prices.ndim != 2 or prices.shape[1] < n_rebal + 1:
        raise DataError(f"prices must be (n_scenarios, >= {n_rebal + 1})")
    if len(surface_fns) < n_rebal:
        raise DataError(f"need {n_rebal} surface functions, got {len(surface_fns)}")
    n = prices.shape[0]
    k = contract.strike

    tau_years = tau0 / DAYS_PER_YEAR
    d_prev, _ = implicit_delta_vec(surface_fns[0], prices[:, 0], k, tau_years)
    sigma0 = np.asarray(surface_fns[0](d_prev, tau_years), dtype=float)
    premium, _ = bs_price_delta(prices[:, 0], np.full(n, k), sigma0, np.full(n, tau_years))
    bank = premium - d_prev * prices[:, 0]
    for j in range(1, n_rebal):
        tau_j = (tau0 - j / steps_per_day) / DAYS_PER_YEAR
        d_j, _ = implicit_delta_vec(surface_fns[j], prices[:, j], k, tau_j)
        bank = bank - (d_j - d_prev) * prices[:, j]
        d_prev = d_j
    payoff = np.maximum(prices[:, n_rebal] - k, 0.0)
    return bank - payoff + d_prev * prices[:, n_rebal]


@dataclass(frozen=True)
class HedgeDistribution:
    """Per-equity P&L samples and their quantiles."""

    contracts: dict
    pnl: dict = field(repr=False)  # equity -> (n_scenarios,) array
    quantile_levels: tuple = (0.05, 0.25, 0.75, 0.95)
    quantiles: dict = field(default=None, repr=False)


def hedge_distribution(
    scen,
    model,
    fpca,
    transforms,
    contracts=None,
    quantile_levels=(0.05, 0.25, 0.75, 0.95),
) -> HedgeDistribution:
    """Hedge every scenario of a generated set, one contract per equity.

    Contracts default to at-the-money calls struck at the decoded day-0
    spot and expiring in min(30, n_steps) steps. Day 0 uses the origin
    window's last state; later days use the scenario states.
    """
    from .fpca import split_states

    equities = tuple(transforms.per_equity.keys())
    n_eq = len(equities)
    t0_index = len(transforms.dates) - 1

    origin_state = scen.origin_window[-1]
    fpcc0, prices_t0 = split_states(origin_state, n_eq, fpca.M)
    spot0 = {
        e: float(transforms.price_inverse(e, prices_t0[ei], t0_index))
        for ei, e in enumerate(equities)
    }
    if contracts is None:
        expiry = min(30, scen.n_steps)
        contracts = {
            e: HedgeContract(equity=e, strike=spot0[e], expiry_steps=expiry) for e in equities
        }
    for e, c in contracts.items():
        if c.expiry_steps > scen.n_steps:
            raise DataError(
                f"contract expiry {c.expiry_steps} exceeds scenario length {scen.n_steps}"
            )

    states = model.denormalize(scen.paths)  # (S, n_steps, D)
    fpcc, prices_t = split_states(states, n_eq, fpca.M)
    n_scen = scen.n_scenarios

    pnl = {}
    quants = {}
    for ei, e in enumerate(equities):
        c = contracts[e]
        tau0 = c.expiry_steps
        spot_path = np.empty((n_scen, tau0 + 1))
        spot_path[:, 0] = spot0[e]
        t_idx = t0_index + 1 + np.arange(tau0)
        spot_path[:, 1:] = transforms.price_inverse(e, prices_t[:, :tau0, ei], t_idx[None, :])

        surface_fns = [_surface_fn_const(fpca, transforms, e, fpcc0[ei], n_scen)]
        for t in range(1, tau0):
            surface_fns.append(_surface_fn_batch(fpca, transforms, e, fpcc[:, t - 1, ei, :]))
        pnl_e = run_hedge_paths(surface_fns, spot_path, c)
        pnl[e] = pnl_e
        quants[e] = np.quantile(pnl_e, quantile_levels)
    return HedgeDistribution(
        contracts=dict(contracts),
        pnl=pnl,
        quantile_levels=tuple(quantile_levels),
        quantiles=quants,
    )


def _surface_fn_batch(fpca, transforms, equity, fpcc_rows):
    """sigma(delta array, tau) with one coefficient row per scenario."""
    coeffs = fpca.mean_coeffs[None, :] + fpcc_rows @ fpca.C  # (S, B)

    def sigma(delta, tau):
        delta = np.asarray(delta, dtype=float)
        x = np.full(delta.shape, transforms.tau_forward(tau))
        y = transforms.delta_forward(delta)
        design = fpca.basis.design_matrix(x, y)
        return transforms.iv_inverse(equity, np.einsum("sb,sb->s", design, coeffs))

    return sigma


def _surface_fn_const(fpca, transforms, equity, fpcc_row, n_scen):
    """Day-0 surface shared by all scenarios."""
    coeffs = fpca.mean_coeffs + fpca.C.T @ fpcc_row

    def sigma(delta, tau):
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        x = np.full(delta.shape, transforms.tau_forward(tau))
        y = transforms.delta_forward(delta)
        design = fpca.basis.design_matrix(x, y)
        return transforms.iv_inverse(equity, design @ coeffs)

    return sigma


def write_pnl_csv(dist: HedgeDistribution, path) -> None:
    """P&L sample CSV: equity,scenario,pnl."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["equity", "scenario", "pnl"])
        for e, vals in dist.pnl.items():
            for s, v in enumerate(vals):
                writer.writerow([e, s, f"{v:.17g}"])


def write_pnl_quantiles_csv(dist: HedgeDistribution, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["equity"] + [f"q{int(q * 100)}" for q in dist.quantile_levels])
        for e, q in dist.quantiles.items():
            writer.writerow([e] + [f"{v:.17g}" for v in q])
