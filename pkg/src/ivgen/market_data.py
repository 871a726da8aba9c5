"""Gridded IV/price panels, invertible coordinate transforms, synthetic oracle.

Raw panels hold call-delta/maturity/IV grids plus spot prices per (date,
equity). The forward transform maps delta to [-1,1], maturity to [-1,1] via
a square-root stretch, IV through a shifted-scaled log(exp(iv)-1), and
prices through an affine map followed by linear detrending in the date
index. Every leg has an exact analytic inverse; the IV inverse is a
softplus, so decoded IVs are strictly positive.
"""

from __future__ import annotations

import csv
import datetime
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DegenerateSpecError, DomainError, ParseError

IV_HEADER = ["date", "equity", "delta", "tau", "iv"]
PRICE_HEADER = ["date", "equity", "close"]

TRANSFORM_SPEC_VERSION = 1

# quote array column layout
COL_DELTA, COL_TAU, COL_IV = 0, 1, 2


@dataclass(frozen=True)
class IvQuote:
    """One gridded IV observation."""

    date: datetime.date
    equity: str
    delta: float
    tau: float
    iv: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"delta must lie in (0,1), got {self.delta}")
        if self.tau <= 0.0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.iv <= 0.0:
            raise DomainError(f"iv must be positive, got {self.iv}")


@dataclass(frozen=True)
class PanelDataset:
    """Aligned per-(date, equity) quote grids and spot prices.

    quotes maps (date, equity) to an (n, 3) array with columns
    (delta, tau, iv); prices maps (date, equity) to a float. Immutable
    after construction and safe to share across threads.
    """

    dates: tuple
    equities: tuple
    quotes: dict = field(repr=False)
    prices: dict = field(repr=False)
    transformed: bool = False

    def __post_init__(self):
        if len(self.dates) == 0 or len(self.equities) == 0:
            raise DataError("panel must contain at least one date and one equity")
        if list(self.dates) != sorted(set(self.dates)):
            raise DataError("panel dates must be sorted and distinct")
        for d in self.dates:
            for e in self.equities:
                key = (d, e)
                if key not in self.quotes:
                    raise DataError(f"missing quotes for {e} on {d}")
                if key not in self.prices:
                    raise DataError(f"missing price for {e} on {d}")
                if not self.transformed:
                    q = self.quotes[key]
                    if np.any(q[:, COL_DELTA] <= 0.0) or np.any(q[:, COL_DELTA] >= 1.0):
                        raise DomainError(f"delta outside (0,1) for {e} on {d}")
                    if np.any(q[:, COL_TAU] <= 0.0):
                        raise DomainError(f"nonpositive tau for {e} on {d}")
                    if np.any(q[:, COL_IV] <= 0.0):
                        raise DomainError(f"nonpositive iv for {e} on {d}")
                    if self.prices[key] <= 0.0:
                        raise DomainError(f"nonpositive price for {e} on {d}")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    def date_index(self, d) -> int:
        return self.dates.index(d)

    def quote_count(self, d, e) -> int:
        return self.quotes[(d, e)].shape[0]


def _parse_date(text: str, line: int, path) -> datetime.date:
    try:
        return datetime.date.fromisoformat(text)
    except ValueError:
        raise ParseError(f"bad ISO-8601 date {text!r}", line=line, path=path) from None


def _parse_float(text: str, name: str, line: int, path) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"bad numeric value {text!r} for {name}", line=line, path=path) from None


def load_panel(iv_path, price_path) -> PanelDataset:
    """Read IV and price CSVs and align them on the common date set.

    A date is retained only when every equity has both quotes and a price
    on it. Rows end up sorted by (date, equity, tau, delta); duplicate
    quote coordinates or malformed rows raise with the offending line.
    """
    quotes = {}
    seen = set()
    with open(iv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != IV_HEADER:
            raise ParseError(f"expected header {','.join(IV_HEADER)}", line=1, path=iv_path)
        for row in reader:
            line = reader.line_num
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=line, path=iv_path)
            d = _parse_date(row[0], line, iv_path)
            e = row[1].strip()
            delta = _parse_float(row[2], "delta", line, iv_path)
            tau = _parse_float(row[3], "tau", line, iv_path)
            iv = _parse_float(row[4], "iv", line, iv_path)
            if not 0.0 < delta < 1.0:
                raise DomainError(f"{iv_path}: line {line}: delta must lie in (0,1), got {delta}")
            if tau <= 0.0:
                raise DomainError(f"{iv_path}: line {line}: tau must be positive, got {tau}")
            if iv <= 0.0:
                raise DomainError(f"{iv_path}: line {line}: iv must be positive, got {iv}")
            key = (d, e, round(tau, 12), round(delta, 12))
            if key in seen:
                raise ParseError(
                    f"duplicate quote for {e} at tau={tau}, delta={delta} on {d}",
                    line=line,
                    path=iv_path,
                )
            seen.add(key)
            quotes.setdefault((d, e), []).append((delta, tau, iv))

    prices = {}
    with open(price_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PRICE_HEADER:
            raise ParseError(f"expected header {','.join(PRICE_HEADER)}", line=1, path=price_path)
        for row in reader:
            line = reader.line_num
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=line, path=price_path)
            d = _parse_date(row[0], line, price_path)
            e = row[1].strip()
            close = _parse_float(row[2], "close", line, price_path)
            if close <= 0.0:
                raise DomainError(f"{price_path}: line {line}: close must be positive, got {close}")
            if (d, e) in prices:
                raise ParseError(f"duplicate price for {e} on {d}", line=line, path=price_path)
            prices[(d, e)] = close

    equities = tuple(sorted({e for _, e in quotes}))
    if not equities:
        raise DataError("no quotes found in IV file")
    common = None
    for e in equities:
        dates_e = {d for d, ee in quotes if ee == e} & {d for d, ee in prices if ee == e}
        common = dates_e if common is None else common & dates_e
    if not common:
        raise DataError("empty intersection of dates across equities")
    dates = tuple(sorted(common))

    panel_quotes = {}
    panel_prices = {}
    for d in dates:
        for e in equities:
            arr = np.array(sorted(quotes[(d, e)], key=lambda q: (q[1], q[0])), dtype=float)
            panel_quotes[(d, e)] = arr
            panel_prices[(d, e)] = prices[(d, e)]
    return PanelDataset(dates=dates, equities=equities, quotes=panel_quotes, prices=panel_prices)


@dataclass(frozen=True)
class EquityTransform:
    """Affine constants for one equity's IV and price transforms."""

    iv_c0: float
    iv_c1: float
    price_c0: float
    price_c1: float
    detrend_beta0: float
    detrend_beta1: float


@dataclass(frozen=True)
class TransformSpec:
    """Fitted coordinate transforms, keyed by equity, plus the fit window.

    The fit dates anchor the detrend time index: index 0 is the first fit
    date, and future steps continue the count past the last one.
    """

    per_equity: dict
    tau_max: float
    dates: tuple
    version: int = TRANSFORM_SPEC_VERSION

    def __post_init__(self):
        if self.tau_max <= 0.0:
            raise DomainError("tau_max must be positive")
        for e, t in self.per_equity.items():
            if t.iv_c1 <= 0.0:
                raise DomainError(f"iv_c1 must be positive for {e}")
            if t.price_c1 == 0.0:
                raise DomainError(f"price_c1 must be nonzero for {e}")

    # -- coordinate maps ----------------------------------------------------

    @staticmethod
    def delta_forward(delta):
        return 2.0 * np.asarray(delta, dtype=float) - 1.0

    @staticmethod
    def delta_inverse(x):
        return (np.asarray(x, dtype=float) + 1.0) / 2.0

    def tau_forward(self, tau):
        return 2.0 * np.sqrt(np.asarray(tau, dtype=float) / self.tau_max) - 1.0

    def tau_inverse(self, x):
        return self.tau_max * ((np.asarray(x, dtype=float) + 1.0) / 2.0) ** 2

    def iv_forward(self, equity, sigma):
        t = self.per_equity[equity]
        sigma = np.asarray(sigma, dtype=float)
        return t.iv_c0 + t.iv_c1 * np.log(np.expm1(sigma))

    def iv_inverse(self, equity, x):
        t = self.per_equity[equity]
        z = (np.asarray(x, dtype=float) - t.iv_c0) / t.iv_c1
        # softplus: log(1 + e^z), overflow-safe, strictly positive
        return np.logaddexp(0.0, z)

    def price_forward(self, equity, price, t_index):
        t = self.per_equity[equity]
        p = t.price_c0 + t.price_c1 * np.asarray(price, dtype=float)
        return p - (t.detrend_beta0 + t.detrend_beta1 * np.asarray(t_index, dtype=float))

    def price_inverse(self, equity, x, t_index):
        t = self.per_equity[equity]
        p = np.asarray(x, dtype=float) + t.detrend_beta0 + t.detrend_beta1 * np.asarray(
            t_index, dtype=float
        )
        return (p - t.price_c0) / t.price_c1

    def date_to_index(self, d) -> int:
        """Detrend index of a fit-window date; see apply_transforms for others."""
        try:
            return self.dates.index(d)
        except ValueError:
            raise DataError(
                f"date {d} outside the transform fit window (extrapolation disabled)"
            ) from None

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "tau_max": self.tau_max,
            "dates": [d.isoformat() for d in self.dates],
            "equities": {
                e: {
                    "iv_c0": t.iv_c0,
                    "iv_c1": t.iv_c1,
                    "price_c0": t.price_c0,
                    "price_c1": t.price_c1,
                    "detrend_beta0": t.detrend_beta0,
                    "detrend_beta1": t.detrend_beta1,
                }
                for e, t in self.per_equity.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TransformSpec":
        doc = json.loads(text)
        if doc.get("version") != TRANSFORM_SPEC_VERSION:
            raise DataError(f"unsupported transform spec version {doc.get('version')}")
        per_equity = {
            e: EquityTransform(**fields) for e, fields in doc["equities"].items()
        }
        dates = tuple(datetime.date.fromisoformat(d) for d in doc["dates"])
        return cls(per_equity=per_equity, tau_max=doc["tau_max"], dates=dates)


def fit_transforms(panel: PanelDataset, q_low: float = 0.1, q_high: float = 0.9) -> TransformSpec:
    """Fit per-equity transform constants on a raw panel.

    IV constants place the q_low/q_high empirical quantiles of
    log(exp(iv)-1), pooled over all dates and grid nodes of the equity, at
    -1 and +1; price constants do the same on the spot series. Quantiles
    interpolate linearly between order statistics. The affine-transformed
    price is then detrended by OLS on the 0-based date index.
    """
    if panel.transformed:
        raise DataError("fit_transforms expects a raw panel")
    if not 0.0 < q_low < q_high < 1.0:
        raise DomainError(f"need 0 < q_low < q_high < 1, got ({q_low}, {q_high})")

    def affine_constants(values, what, equity):
        lo, hi = np.quantile(values, [q_low, q_high])
        if hi <= lo:
            raise DegenerateSpecError(
                f"degenerate {what} quantiles for {equity}: Q_{q_high}={hi} equals Q_{q_low}={lo}"
            )
        return -(hi + lo) / (hi - lo), 2.0 / (hi - lo)

    per_equity = {}
    tau_max = 0.0
    t_idx = np.arange(panel.n_dates, dtype=float)
    for e in panel.equities:
        pooled = np.concatenate(
            [np.log(np.expm1(panel.quotes[(d, e)][:, COL_IV])) for d in panel.dates]
        )
        iv_c0, iv_c1 = affine_constants(pooled, "iv", e)
        spots = np.array([panel.prices[(d, e)] for d in panel.dates])
        price_c0, price_c1 = affine_constants(spots, "price", e)
        tilde = price_c0 + price_c1 * spots
        if panel.n_dates > 1:
            beta1, beta0 = np.polyfit(t_idx, tilde, 1)
        else:
            beta0, beta1 = float(tilde[0]), 0.0
        per_equity[e] = EquityTransform(
            iv_c0=iv_c0,
            iv_c1=iv_c1,
            price_c0=price_c0,
            price_c1=price_c1,
            detrend_beta0=float(beta0),
            detrend_beta1=float(beta1),
        )
        tau_max = max(
            tau_max, max(float(panel.quotes[(d, e)][:, COL_TAU].max()) for d in panel.dates)
        )
    return TransformSpec(per_equity=per_equity, tau_max=tau_max, dates=tuple(panel.dates))


def apply_transforms(
    panel: PanelDataset,
    spec: TransformSpec,
    direction: str = "forward",
    *,
    extrapolate: bool = False,
) -> PanelDataset:
    """Apply the coordinate maps to every quote and price of a panel.

    Forward expects raw coordinates, inverse expects transformed ones; the
    two compose to the identity. Dates outside the fit window are allowed
    only when extrapolate=True and only past its end, where the detrend
    index keeps counting.
    """
    if direction not in ("forward", "inverse"):
        raise DomainError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    forward = direction == "forward"
    if forward and panel.transformed:
        raise DataError("forward transform expects a raw panel")
    if not forward and not panel.transformed:
        raise DataError("inverse transform expects a transformed panel")

    index_of = {}
    next_index = len(spec.dates)
    known = {d: i for i, d in enumerate(spec.dates)}
    for d in panel.dates:
        if d in known:
            index_of[d] = known[d]
        elif extrapolate and d > spec.dates[-1]:
            index_of[d] = next_index
            next_index += 1
        else:
            raise DataError(
                f"date {d} outside the transform fit window (extrapolation disabled)"
            )

    quotes = {}
    prices = {}
    for d in panel.dates:
        t = index_of[d]
        for e in panel.equities:
            q = panel.quotes[(d, e)]
            out = np.empty_like(q)
            if forward:
                out[:, COL_DELTA] = spec.delta_forward(q[:, COL_DELTA])
                out[:, COL_TAU] = spec.tau_forward(q[:, COL_TAU])
                out[:, COL_IV] = spec.iv_forward(e, q[:, COL_IV])
                prices[(d, e)] = float(spec.price_forward(e, panel.prices[(d, e)], t))
            else:
                out[:, COL_DELTA] = spec.delta_inverse(q[:, COL_DELTA])
                out[:, COL_TAU] = spec.tau_inverse(q[:, COL_TAU])
                out[:, COL_IV] = spec.iv_inverse(e, q[:, COL_IV])
                prices[(d, e)] = float(spec.price_inverse(e, panel.prices[(d, e)], t))
            quotes[(d, e)] = out
    return replace(panel, quotes=quotes, prices=prices, transformed=forward)


# -- synthetic market oracle -------------------------------------------------

PAPER_DELTAS = tuple(np.round(np.arange(0.10, 0.901, 0.05), 2))
PAPER_TAUS = (
    10 / 365,
    21 / 365,
    42 / 365,
    63 / 365,
    0.25,
    0.5,
    0.75,
    1.0,
    1.25,
    1.5,
    2.0,
)


@dataclass(frozen=True)
class SyntheticConfig:
    """Generating law for the synthetic test market.

    Prices follow geometric Brownian dynamics with a cross-equity common
    factor; the smile is quadratic in delta with a power decay in maturity,
    driven by mean-reverting level/skew/convexity states clipped to ranges
    that keep every slice free of static arbitrage. Level shocks correlate
    negatively with price shocks by default.
    """

    equities: tuple = ("AAA", "BBB")
    n_dates: int = 300
    start_date: datetime.date = datetime.date(2020, 1, 2)
    deltas: tuple = PAPER_DELTAS
    taus: tuple = PAPER_TAUS
    mode: str = "smile"  # "smile" or "flat"
    flat_vol: float = 0.2
    s0: float = 100.0
    price_drift: float = 0.05
    price_vol: float = 0.2
    dt_years: float = 1.0 / 252.0
    base_level: float = 0.25
    level_kappa: float = 0.05
    level_sigma: float = 0.0025
    level_amp: float = 0.06
    term_slope: float = 0.03
    skew_mean: float = -0.012
    skew_kappa: float = 0.05
    skew_sigma: float = 0.004
    skew_amp: float = 0.035
    convex_mean: float = 0.02
    convex_kappa: float = 0.05
    convex_sigma: float = 0.005
    convex_amp: float = 0.035
    smile_decay: float = 0.25
    level_price_corr: float = -0.6
    price_cross_corr: float = 0.5

    def __post_init__(self):
        if self.mode not in ("smile", "flat"):
            raise DomainError(f"mode must be 'smile' or 'flat', got {self.mode!r}")
        if self.n_dates < 1 or len(self.equities) < 1:
            raise DomainError("need at least one date and one equity")
        if self.flat_vol <= 0 or self.s0 <= 0 or self.price_vol <= 0:
            raise DomainError("volatilities and s0 must be positive")
        if not -1.0 < self.level_price_corr < 1.0 or not 0.0 <= self.price_cross_corr < 1.0:
            raise DomainError("correlations must lie in (-1, 1)")


def _ou_step(x, mean, kappa, sigma, z, amp):
    x = x + kappa * (mean - x) + sigma * z
    return np.clip(x, mean - amp, mean + amp)


def synth_market(config: SyntheticConfig, seed: int) -> PanelDataset:
    """Deterministic synthetic panel with a known generating law."""
    rng = np.random.default_rng(seed)
    E = len(config.equities)
    deltas = np.asarray(config.deltas, dtype=float)
    taus = np.asarray(config.taus, dtype=float)
    # tau-major layout matches the (tau, delta) row sort used by load_panel
    tgrid, dgrid = np.meshgrid(taus, deltas, indexing="ij")
    flat_delta = dgrid.ravel()
    flat_tau = tgrid.ravel()

    dates = tuple(
        config.start_date + datetime.timedelta(days=int(i + 2 * (i // 5)))
        for i in range(config.n_dates)
    )

    level = np.zeros(E)
    skew = np.full(E, config.skew_mean)
    convex = np.full(E, config.convex_mean)
    spot = np.full(E, config.s0, dtype=float)

    rho_x = config.price_cross_corr
    rho_lp = config.level_price_corr

    quotes = {}
    prices = {}
    for d in dates:
        common = rng.standard_normal()
        z_price = np.sqrt(rho_x) * common + np.sqrt(1.0 - rho_x) * rng.standard_normal(E)
        z_level = rho_lp * z_price + np.sqrt(1.0 - rho_lp**2) * rng.standard_normal(E)
        z_skew = rng.standard_normal(E)
        z_convex = rng.standard_normal(E)

        level = _ou_step(level, 0.0, config.level_kappa, config.level_sigma, z_level, config.level_amp)
        skew = _ou_step(skew, config.skew_mean, config.skew_kappa, config.skew_sigma, z_skew, config.skew_amp)
        convex = _ou_step(
            convex, config.convex_mean, config.convex_kappa, config.convex_sigma, z_convex, config.convex_amp
        )
        growth = (config.price_drift - 0.5 * config.price_vol**2) * config.dt_years
        spot = spot * np.exp(growth + config.price_vol * np.sqrt(config.dt_years) * z_price)

        for k, e in enumerate(config.equities):
            if config.mode == "flat":
                iv = np.full_like(flat_delta, config.flat_vol)
            else:
                damp = flat_tau**-config.smile_decay
                iv = (
                    config.base_level
                    + level[k]
                    + config.term_slope * (np.sqrt(flat_tau) - 1.0)
                    + (skew[k] * (flat_delta - 0.5) + convex[k] * (flat_delta - 0.5) ** 2) * damp
                )
                iv = np.maximum(iv, 0.02)
            quotes[(d, e)] = np.column_stack([flat_delta, flat_tau, iv])
            prices[(d, e)] = float(spot[k])

    return PanelDataset(
        dates=dates, equities=tuple(config.equities), quotes=quotes, prices=prices
    )


def write_panel_csv(panel: PanelDataset, iv_path, price_path) -> None:
    """Emit a panel back to the two CSV schemas (raw panels only)."""
    if panel.transformed:
        raise DataError("CSV export is defined for raw panels")
    with open(iv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IV_HEADER)
        for d in panel.dates:
            for e in panel.equities:
                for delta, tau, iv in panel.quotes[(d, e)]:
                    writer.writerow([d.isoformat(), e, f"{delta:.17g}", f"{tau:.17g}", f"{iv:.17g}"])
    with open(price_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRICE_HEADER)
        for d in panel.dates:
            for e in panel.equities:
                writer.writerow([d.isoformat(), e, f"{panel.prices[(d, e)]:.17g}"])
