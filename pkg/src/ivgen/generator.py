"""Recursive multi-step scenario sampling and decoding to market space.

Each scenario slides an L-row window forward: the nets map the window to a
conditional Gaussian, a state is sampled from it, and the window shifts by
one. Scenarios own independent random streams derived from (base_seed,
scenario_id), so results do not depend on execution order, chunking, or
worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError
from .fpca import FpcaModel, split_states
from .market_data import TransformSpec
from .nsde import NsdeModel, cond_step_prenormalized

_CHUNK = 4096


@dataclass(frozen=True)
class ScenarioSet:
    """Generated normalized-state paths plus their conditioning window."""

    base_seed: int
    n_steps: int
    n_scenarios: int
    paths: np.ndarray = field(repr=False)  # (S, n_steps, D) normalized states
    origin_window: np.ndarray = field(repr=False)  # (L, D) raw states

    def __post_init__(self):
        if self.paths.shape[:2] != (self.n_scenarios, self.n_steps):
            raise DomainError("paths shape inconsistent with scenario counts")


def _scenario_rng(base_seed: int, scenario: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, scenario]))


def _generate_chunk(model, norm_origin, n_steps, base_seed, start, stop, out):
    size = stop - start
    d = model.state_dim
    rngs = [_scenario_rng(base_seed, s) for s in range(start, stop)]
    window = np.broadcast_to(norm_origin, (size,) + norm_origin.shape).copy()
    for step in range(n_steps):
        mu, _, sigma = cond_step_prenormalized(model, window)
        chol = np.linalg.cholesky(sigma)
        z = np.empty((size, d))
        for i, rng in enumerate(rngs):
            z[i] = rng.standard_normal(d)
        state = mu + np.einsum("sij,sj->si", chol, z)
        out[start:stop, step, :] = state
        window = np.concatenate([window[:, 1:, :], state[:, None, :]], axis=1)


def generate_paths(
    model: NsdeModel,
    origin_window: np.ndarray,
    n_steps: int,
    n_scenarios: int,
    base_seed: int,
    threads: int = 1,
) -> ScenarioSet:
    """Sample n_scenarios independent paths of n_steps normalized states.

    origin_window holds raw states; its last L rows condition every
    scenario. Scenarios are embarrassingly parallel and chunked so memory
    stays bounded at large scenario counts.
    """
    if n_steps <= 0 or n_scenarios <= 0:
        raise DomainError("n_steps and n_scenarios must be positive")
    if base_seed < 0:
        raise DomainError("base_seed must be nonnegative")
    origin = np.asarray(origin_window, dtype=float)
    if origin.ndim != 2 or origin.shape[1] != model.state_dim:
        raise DomainError(f"origin_window must be (L, {model.state_dim})")
    if origin.shape[0] < model.lag:
        raise DomainError(f"origin_window needs at least {model.lag} rows")
    origin = origin[-model.lag :]
    norm_origin = model.normalize(origin)

    paths = np.empty((n_scenarios, n_steps, model.state_dim))
    bounds = [(s, min(s + _CHUNK, n_scenarios)) for s in range(0, n_scenarios, _CHUNK)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _generate_chunk, model, norm_origin, n_steps, base_seed, a, b, paths
                )
                for a, b in bounds
            ]
            for f in futures:
                f.result()
    else:
        for a, b in bounds:
            _generate_chunk(model, norm_origin, n_steps, base_seed, a, b, paths)
    return ScenarioSet(
        base_seed=base_seed,
        n_steps=n_steps,
        n_scenarios=n_scenarios,
        paths=paths,
        origin_window=origin.copy(),
    )


@dataclass(frozen=True)
class DecodedScenarios:
    """Market-space surfaces and prices on a fixed (delta, tau) grid."""

    equities: tuple
    grid_delta: np.ndarray  # (n_grid,) raw call deltas, delta-major flattening
    grid_tau: np.ndarray  # (n_grid,) raw maturities in years
    ivs: np.ndarray = field(repr=False)  # (S, n_steps, E, n_grid)
    prices: np.ndarray = field(repr=False)  # (S, n_steps, E)


def decode_scenarios(
    scen: ScenarioSet,
    model: NsdeModel,
    fpca: FpcaModel,
    transforms: TransformSpec,
    grid_delta,
    grid_tau,
    t0_index: int = None,
) -> DecodedScenarios:
    """Invert normalization, FPC representation, and market transforms.

    The price trend is re-added at future time indices t0_index+1, ...,
    t0_index+n_steps, where t0_index defaults to the last index of the
    transform fit window.
    """
    grid_delta = np.asarray(grid_delta, dtype=float)
    grid_tau = np.asarray(grid_tau, dtype=float)
    if np.any(grid_delta < 0.0) or np.any(grid_delta > 1.0):
        raise DomainError("grid deltas must lie in [0, 1]")
    if np.any(grid_tau <= 0.0) or np.any(grid_tau > transforms.tau_max):
        raise DomainError(f"grid maturities must lie in (0, {transforms.tau_max}]")
    equities = tuple(transforms.per_equity.keys())
    n_eq = len(equities)
    states = model.denormalize(scen.paths)
    fpcc, prices_t = split_states(states, n_eq, fpca.M)

    dg, tg = np.meshgrid(grid_delta, grid_tau, indexing="ij")
    flat_delta, flat_tau = dg.ravel(), tg.ravel()
    x = transforms.tau_forward(flat_tau)
    y = transforms.delta_forward(flat_delta)
    mean_vals, psi = fpca.surface_matrix(x, y)

    if t0_index is None:
        t0_index = len(transforms.dates) - 1
    t_index = t0_index + 1 + np.arange(scen.n_steps)

    ivs = np.empty(scen.paths.shape[:2] + (n_eq, flat_delta.size))
    prices = np.empty(scen.paths.shape[:2] + (n_eq,))
    for ei, e in enumerate(equities):
        sig_t = mean_vals + fpcc[:, :, ei, :] @ psi.T
        ivs[:, :, ei, :] = transforms.iv_inverse(e, sig_t)
        prices[:, :, ei] = transforms.price_inverse(e, prices_t[:, :, ei], t_index[None, :])
    return DecodedScenarios(
        equities=equities,
        grid_delta=flat_delta,
        grid_tau=flat_tau,
        ivs=ivs,
        prices=prices,
    )


def surface_evaluators(
    states_step: np.ndarray,
    model: NsdeModel,
    fpca: FpcaModel,
    transforms: TransformSpec,
):
    """Per-equity callables sigma(delta, tau) from one normalized state row.

    Used by the hedging backtest, which needs to evaluate the decoded
    surface at solver-chosen deltas rather than on a fixed grid. Callables
    accept scalars or arrays and are vectorized in delta.
    """
    equities = tuple(transforms.per_equity.keys())
    state = model.denormalize(np.asarray(states_step, dtype=float))
    fpcc, _ = split_states(state, len(equities), fpca.M)

    def make(ei, e):
        coeffs = fpca.mean_coeffs + fpca.C.T @ fpcc[ei]

        def sigma(delta, tau):
            from .basis import eval_surface

            x = transforms.tau_forward(tau)
            y = transforms.delta_forward(delta)
            return transforms.iv_inverse(e, eval_surface(coeffs, fpca.basis, x, y))

        return sigma

    return {e: make(ei, e) for ei, e in enumerate(equities)}


# -- scenario persistence ------------------------------------------------------

_SCEN_MAGIC = b"IVSC"
_SCEN_VERSION = 1


def write_scenario_states(scen: ScenarioSet, path) -> None:
    """Compact little-endian dump: header, origin window, then paths."""
    with open(path, "wb") as fh:
        fh.write(_SCEN_MAGIC)
        header = np.array(
            [
                _SCEN_VERSION,
                scen.n_scenarios,
                scen.n_steps,
                scen.paths.shape[2],
                scen.origin_window.shape[0],
                scen.base_seed,
            ],
            dtype="<i8",
        )
        fh.write(header.tobytes())
        fh.write(scen.origin_window.astype("<f8").tobytes())
        fh.write(scen.paths.astype("<f8").tobytes())


def read_scenario_states(path) -> ScenarioSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SCEN_MAGIC:
            raise DataError(f"not a scenario dump: bad magic {magic!r}")
        header = np.frombuffer(fh.read(6 * 8), dtype="<i8")
        version, n_scen, n_steps, dim, lag, base_seed = (int(v) for v in header)
        if version != _SCEN_VERSION:
            raise DataError(f"unsupported scenario dump version {version}")
        origin = np.frombuffer(fh.read(lag * dim * 8), dtype="<f8").reshape(lag, dim)
        paths = np.frombuffer(fh.read(n_scen * n_steps * dim * 8), dtype="<f8")
        paths = paths.reshape(n_scen, n_steps, dim)
    return ScenarioSet(
        base_seed=base_seed,
        n_steps=n_steps,
        n_scenarios=n_scen,
        paths=paths.copy(),
        origin_window=origin.copy(),
    )


def write_scenarios_csv(decoded: DecodedScenarios, path) -> None:
    """Long-format CSV: scenario,step,equity,kind,key1,key2,value."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "step", "equity", "kind", "key1", "key2", "value"])
        n_scen, n_steps, n_eq, _ = decoded.ivs.shape
        for s in range(n_scen):
            for t in range(n_steps):
                for ei, e in enumerate(decoded.equities):
                    for gi in range(decoded.grid_delta.size):
                        writer.writerow(
                            [
                                s,
                                t + 1,
                                e,
                                "iv",
                                f"{decoded.grid_delta[gi]:.17g}",
                                f"{decoded.grid_tau[gi]:.17g}",
                                f"{decoded.ivs[s, t, ei, gi]:.17g}",
                            ]
                        )
                    writer.writerow(
                        [s, t + 1, e, "price", "", "", f"{decoded.prices[s, t, ei]:.17g}"]
                    )
