"""Losses, PIT machinery, and the three-stage training schedule.

Stage one fits the drift net by mean squared one-step error; stage two
fits the diffusion net by negative log-likelihood plus a PIT-uniformity
penalty with the drift frozen at its best snapshot; stage three fine-tunes
both nets on the same objective with a larger penalty weight. Each stage
retains its minimum-loss parameters. Optimization is full-sequence
decoupled-weight-decay Adam; every loss is deterministic given parameters,
so a run is reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .errors import DataError, DomainError, NumericalError
from .nsde import NsdeModel, recurrent_stack_forward

PIT_CLAMP = 1e-12
BANDWIDTH_FLOOR = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and penalty weights for the three training stages."""

    stage1_iters: int = 5000
    stage2_iters: int = 2000
    stage3_iters: int = 2000
    alpha: float = 1.0
    alpha_prime: float = 100.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    full_sequence: bool = True
    seed: int = 0
    quadrature_points: int = 1001

    def __post_init__(self):
        if min(self.stage1_iters, self.stage2_iters, self.stage3_iters) < 0:
            raise DomainError("iteration counts must be nonnegative")
        if self.alpha < 0 or self.alpha_prime < 0:
            raise DomainError("penalty weights must be nonnegative")
        if not self.full_sequence:
            raise DomainError("only full-sequence gradient steps are supported")
        if self.quadrature_points < 2:
            raise DomainError("quadrature_points must be at least 2")


@dataclass(frozen=True)
class PitSeries:
    """Probability integral transforms, clamped strictly inside (0, 1)."""

    U: np.ndarray

    def __post_init__(self):
        if self.U.ndim != 2:
            raise DomainError("U must be a (T-L, D) matrix")
        if np.any(self.U <= 0.0) or np.any(self.U >= 1.0):
            raise DomainError("PIT entries must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class LogRecord:
    stage: int
    iteration: int
    loss: float
    mse: float
    nll: float
    pit_penalty: float


class AdamW:
    """Adam with decoupled weight decay, updating tensor data in place."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


# -- graph construction --------------------------------------------------------


def _states_of(series) -> np.ndarray:
    states = series.states() if hasattr(series, "states") else np.asarray(series, dtype=float)
    if states.ndim != 2:
        raise DomainError("state series must be a (T, D) matrix")
    return states


def _tape_net(net, requires_grad: bool):
    layers = [
        {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in layer.items()}
        for layer in net.layers
    ]
    head = {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in net.head.items()}
    flat = [t for layer in layers for t in layer.values()] + list(head.values())
    return layers, head, flat


def _drift_output(model, x_steps, drift):
    layers, head, _ = drift
    return recurrent_stack_forward(layers, head, x_steps)


def _pit_tensor(target, prev, nu, tril, model):
    """Clamped PIT matrix tensor from the per-step conditional moments."""
    mu = prev + nu * model.dt
    var = (ad.tsum(tril * tril, axis=2) + model.eps) * model.dt
    z = (target - mu) / ad.sqrt(var)
    u = 0.5 * (1.0 + ad.erf(z * (1.0 / np.sqrt(2.0))))
    return ad.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP)


def _pit_penalty_graph(u, quad_points: int):
    """Sum over features of the squared L2 distance of the PIT KDE from 1.

    Bandwidth is a tenth of Silverman's rule, floored, and differentiated
    through like everything else so finite differences agree.
    """
    n = u.data.shape[0] if isinstance(u, ad.Tensor) else u.shape[0]
    n_features = u.data.shape[1] if isinstance(u, ad.Tensor) else u.shape[1]
    grid = np.linspace(0.0, 1.0, quad_points)
    dx = grid[1] - grid[0]
    weights = np.full(quad_points, dx)
    weights[0] = weights[-1] = 0.5 * dx
    u_t = ad.swap_last2(ad.as_tensor(u))
    total = ad.as_tensor(0.0)
    n_factor = float(n) ** -0.2
    for i in range(n_features):
        ui = ad.index0(u_t, i)
        mean = ad.tmean(ui)
        var = ad.clip(ad.tmean(ui * ui) - mean * mean, 0.0, np.inf)
        sd = ad.sqrt(var + 1e-24)
        iqr = ad.quantile_linear(ui, 0.75) - ad.quantile_linear(ui, 0.25)
        silverman = 0.9 * ad.minimum(sd, iqr * (1.0 / 1.34)) * n_factor
        h = ad.maximum(0.1 * silverman, BANDWIDTH_FLOOR)
        dens = ad.kde_reflected_density(ui, h, grid)
        dev = dens - 1.0
        total = total + ad.tsum(dev * dev * weights)
    return total


def _loss_graph(
    model: NsdeModel,
    states: np.ndarray,
    *,
    drift=None,
    diff=None,
    alpha: float = 0.0,
    quad_points: int = 1001,
    need_dist: bool = True,
    nu_const: np.ndarray = None,
):
    """Build the loss graph; returns a dict of scalar tensors.

    Parameters default to constant (no-gradient) wrappers of the model
    nets, so the same code path serves plain evaluation and training.
    """
    T, D = states.shape
    L = model.lag
    if T <= L + 1:
        raise DataError(f"series length {T} must exceed lag+1 = {L + 1}")
    if D != model.state_dim:
        raise DomainError(f"series dimension {D} does not match model state_dim {model.state_dim}")
    yn = model.normalize(states)
    x_steps = [yn[s : T - L + s] for s in range(L)]
    target = yn[L:]
    prev = yn[L - 1 : T - 1]

    if nu_const is not None:
        nu = ad.as_tensor(nu_const)
    else:
        drift = drift if drift is not None else _tape_net(model.drift_net, False)
        nu = _drift_output(model, x_steps, drift)

    resid = ad.as_tensor(target) - (prev + nu * model.dt)
    mse = ad.tsum(resid * resid) * (1.0 / (T - L))
    out = {"mse": mse, "nll": None, "pit": None, "loss": mse}
    if not need_dist:
        return out

    diff = diff if diff is not None else _tape_net(model.diff_net, False)
    flat = recurrent_stack_forward(diff[0], diff[1], x_steps)
    tril = ad.fill_lower_triangular(flat, D)
    eye = np.eye(D)
    sigma = (tril @ ad.swap_last2(tril) + model.eps * eye) * model.dt
    nll = ad.mvn_nll(sigma, resid)
    pit_u = _pit_tensor(ad.as_tensor(target), prev, nu, tril, model)
    pit = _pit_penalty_graph(pit_u, quad_points)
    out["nll"] = nll
    out["pit"] = pit
    out["pit_u"] = pit_u
    out["loss"] = nll + alpha * pit
    return out


# -- public losses --------------------------------------------------------------


def mse_loss(model: NsdeModel, series) -> float:
    """Mean squared one-step drift error in normalized units."""
    graph = _loss_graph(model, _states_of(series), need_dist=False)
    return graph["mse"].item()


def nll_pit_loss(model: NsdeModel, series, alpha: float, quadrature_points: int = 1001) -> float:
    """Negative log-likelihood plus alpha times the PIT penalty."""
    graph = _loss_graph(
        model, _states_of(series), alpha=alpha, quad_points=quadrature_points
    )
    return graph["loss"].item()


def pit_sequence(model: NsdeModel, series) -> PitSeries:
    """Per-feature PITs of the one-step conditional Gaussians.

    Standardization divides by the conditional standard deviation, the
    unique choice under which a correctly specified model yields
    Uniform(0,1) transforms.
    """
    from .nsde import cond_step_batched

    states = _states_of(series)
    T, D = states.shape
    L = model.lag
    if T <= L + 1:
        raise DataError(f"series length {T} must exceed lag+1 = {L + 1}")
    windows = np.lib.stride_tricks.sliding_window_view(states, (L, D))[:-1, 0]
    mu, _, sigma = cond_step_batched(model, windows)
    target = model.normalize(states)[L:]
    sd = np.sqrt(np.diagonal(sigma, axis1=1, axis2=2))
    u = ndtr((target - mu) / sd)
    return PitSeries(U=np.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP))


def pit_penalty(pits, quadrature_points: int = 1001) -> float:
    """KDE deviation-from-uniform penalty of a PIT matrix."""
    u = pits.U if isinstance(pits, PitSeries) else np.asarray(pits, dtype=float)
    if u.size == 0:
        raise DataError("empty PIT matrix")
    return _pit_penalty_graph(ad.as_tensor(u), quadrature_points).item()


# -- three-stage schedule -------------------------------------------------------


def _snapshot(net) -> list:
    return [arr.copy() for _, arr in net.named_arrays()]


def _restore(net, snap) -> None:
    for (_, arr), saved in zip(net.named_arrays(), snap):
        np.copyto(arr, saved)


def train_three_stage(model: NsdeModel, series, config: TrainConfig, *, refit_normalization=True):
    """Run the three-stage schedule; returns (trained model, log records).

    The input model is left untouched; the returned model carries the
    stage-three minimum-loss parameters (or the best parameters of the
    last stage that ran).
    """
    states = _states_of(series)
    model = NsdeModel(
        drift_net=model.drift_net.copy(),
        diff_net=model.diff_net.copy(),
        lag=model.lag,
        dt=model.dt,
        eps=model.eps,
        norm_center=model.norm_center.copy(),
        norm_scale=model.norm_scale.copy(),
    )
    if refit_normalization:
        from .nsde import fit_feature_normalization

        center, scale = fit_feature_normalization(states)
        model.norm_center, model.norm_scale = center, scale

    log: list[LogRecord] = []

    def run_stage(stage, iters, params, loss_fn):
        if iters == 0:
            return
        opt = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
        best = np.inf
        best_snap = None
        for it in range(iters):
            opt.zero_grad()
            graph = loss_fn()
            loss = graph["loss"].item()
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged in stage {stage} at iteration {it}")
            log.append(
                LogRecord(
                    stage=stage,
                    iteration=it,
                    loss=loss,
                    mse=graph["mse"].item(),
                    nll=graph["nll"].item() if graph["nll"] is not None else np.nan,
                    pit_penalty=graph["pit"].item() if graph["pit"] is not None else np.nan,
                )
            )
            if loss < best:
                best = loss
                best_snap = (_snapshot(model.drift_net), _snapshot(model.diff_net))
            ad.backward(graph["loss"])
            opt.step()
        if best_snap is not None:
            _restore(model.drift_net, best_snap[0])
            _restore(model.diff_net, best_snap[1])

    # stage 1: drift on MSE
    drift_tape = _tape_net(model.drift_net, True)
    run_stage(
        1,
        config.stage1_iters,
        drift_tape[2],
        lambda: _loss_graph(model, states, drift=drift_tape, need_dist=False),
    )

    # stage 2: diffusion on NLL + alpha * PIT, drift frozen at its best snapshot
    if config.stage2_iters > 0:
        yn = model.normalize(states)
        T = states.shape[0]
        x_steps = [yn[s : T - model.lag + s] for s in range(model.lag)]
        frozen = _tape_net(model.drift_net, False)
        nu_out = recurrent_stack_forward(frozen[0], frozen[1], x_steps)
        nu_const = nu_out.data if isinstance(nu_out, ad.Tensor) else nu_out
        diff_tape = _tape_net(model.diff_net, True)
        run_stage(
            2,
            config.stage2_iters,
            diff_tape[2],
            lambda: _loss_graph(
                model,
                states,
                diff=diff_tape,
                alpha=config.alpha,
                quad_points=config.quadrature_points,
                nu_const=nu_const,
            ),
        )

    # stage 3: both nets on NLL + alpha' * PIT
    if config.stage3_iters > 0:
        drift_tape3 = _tape_net(model.drift_net, True)
        diff_tape3 = _tape_net(model.diff_net, True)
        run_stage(
            3,
            config.stage3_iters,
            drift_tape3[2] + diff_tape3[2],
            lambda: _loss_graph(
                model,
                states,
                drift=drift_tape3,
                diff=diff_tape3,
                alpha=config.alpha_prime,
                quad_points=config.quadrature_points,
            ),
        )

    return model, log


def write_training_log(log, path) -> None:
    """Persist log records as stage,iteration,loss,mse,nll,pit_penalty CSV."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "iteration", "loss", "mse", "nll", "pit_penalty"])
        for rec in log:
            writer.writerow(
                [rec.stage, rec.iteration, f"{rec.loss:.17g}", f"{rec.mse:.17g}",
                 f"{rec.nll:.17g}", f"{rec.pit_penalty:.17g}"]
            )
