"""Non-Markovian neural SDE: stacked gated-recurrent drift/diffusion nets.

Both coefficient networks consume the last L states through three stacked
gated-recurrent layers and map the final hidden state through an affine
head. The drift head emits the D-vector nu; the diffusion head emits the
D(D+1)/2 entries of a lower-triangular matrix Lc, and one Euler step is
the conditional Gaussian N(b_t + nu*dt, (Lc Lc' + eps I)*dt) in
normalized state units.

The forward pass is written once and runs on plain float64 arrays for
inference or on autodiff Tensors for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from . import autodiff as ad
from .errors import DomainError, NumericalError

GATE_ORDER = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_c", "U_c", "b_c")
HEAD_ORDER = ("W_o", "b_o")


def _tanh(x):
    return ad.tanh(x) if isinstance(x, ad.Tensor) else np.tanh(x)


def _sigmoid(x):
    return ad.sigmoid(x) if isinstance(x, ad.Tensor) else expit(x)


def _stack0(xs):
    if any(isinstance(x, ad.Tensor) for x in xs):
        return ad.stack0(xs)
    return np.stack(xs, axis=0)


def _index0(x, idx):
    return ad.index0(x, idx) if isinstance(x, ad.Tensor) else x[idx]


def _reshape(x, shape):
    return ad.reshape(x, shape) if isinstance(x, ad.Tensor) else x.reshape(shape)


def _gate_pre(proj, h, u_mat, b):
    if any(isinstance(v, ad.Tensor) for v in (proj, h, u_mat, b)):
        return ad.gate_pre(proj, h, u_mat, b)
    return proj + h @ u_mat + b


def _gru_mix(z, h, cand):
    if any(isinstance(v, ad.Tensor) for v in (z, h, cand)):
        return ad.gru_mix(z, h, cand)
    return z * h + (1.0 - z) * cand


def tril_from_flat(flat: np.ndarray, dim: int) -> np.ndarray:
    """Fill the lower triangle row-major from the trailing axis."""
    rows, cols = np.tril_indices(dim)
    if flat.shape[-1] != rows.size:
        raise DomainError(f"expected {rows.size} entries for dim={dim}, got {flat.shape[-1]}")
    out = np.zeros(flat.shape[:-1] + (dim, dim))
    out[..., rows, cols] = flat
    return out


def flat_from_tril(tril: np.ndarray) -> np.ndarray:
    rows, cols = np.tril_indices(tril.shape[-1])
    return tril[..., rows, cols]


@dataclass
class RecurrentNet:
    """Three stacked gated-recurrent layers plus an affine output head."""

    input_dim: int
    hidden_dim: int
    output_dim: int
    layers: list = field(repr=False)
    head: dict = field(repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def create(cls, input_dim, hidden_dim, output_dim, n_layers=3, rng=None) -> "RecurrentNet":
        """Gates and head uniform in +-1/sqrt(fan_in); candidate recurrence orthogonal."""
        rng = np.random.default_rng(rng)
        layers = []
        for li in range(n_layers):
            d_in = input_dim if li == 0 else hidden_dim
            layer = {}
            for gate in ("z", "r", "c"):
                layer[f"W_{gate}"] = _uniform(rng, (d_in, hidden_dim), d_in)
                if gate == "c":
                    layer["U_c"] = _orthogonal(rng, hidden_dim)
                else:
                    layer[f"U_{gate}"] = _uniform(rng, (hidden_dim, hidden_dim), hidden_dim)
                layer[f"b_{gate}"] = _uniform(rng, (hidden_dim,), hidden_dim)
            layers.append(layer)
        head = {
            "W_o": _uniform(rng, (hidden_dim, output_dim), hidden_dim),
            "b_o": _uniform(rng, (output_dim,), hidden_dim),
        }
        return cls(
            input_dim=input_dim,
            hidden_dim=hidden_dim,
            output_dim=output_dim,
            layers=layers,
            head=head,
        )

    @classmethod
    def zeros(cls, input_dim, hidden_dim, output_dim, n_layers=3) -> "RecurrentNet":
        net = cls.create(input_dim, hidden_dim, output_dim, n_layers, rng=0)
        for name, arr in net.named_arrays():
            arr[...] = 0.0
        return net

    def named_arrays(self, prefix: str = ""):
        """Parameter arrays in the fixed serialization order."""
        out = []
        for li, layer in enumerate(self.layers):
            for key in GATE_ORDER:
                out.append((f"{prefix}l{li}.{key}", layer[key]))
        for key in HEAD_ORDER:
            out.append((f"{prefix}head.{key}", self.head[key]))
        return out

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())

    def copy(self) -> "RecurrentNet":
        return RecurrentNet(
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            output_dim=self.output_dim,
            layers=[{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            head={k: v.copy() for k, v in self.head.items()},
        )


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def recurrent_stack_forward(layers, head, x_steps):
    """Run the stacked recurrence over a step list of (N, d_in) inputs.

    layers/head hold arrays or Tensors; x_steps entries may be constants.
    Returns the head output at the final step, shape (N, output_dim).
    """
    n_batch = x_steps[0].shape[0]
    n_steps = len(x_steps)
    inputs = x_steps
    h = None
    for layer in layers:
        d_in = layer["W_z"].shape[0]
        stacked = _reshape(_stack0(inputs), (n_steps * n_batch, d_in))
        proj_z = stacked @ layer["W_z"]
        proj_r = stacked @ layer["W_r"]
        proj_c = stacked @ layer["W_c"]
        h = np.zeros((n_batch, layer["U_z"].shape[0]))
        outputs = []
        for s in range(n_steps):
            block = slice(s * n_batch, (s + 1) * n_batch)
            z = _sigmoid(_gate_pre(_index0(proj_z, block), h, layer["U_z"], layer["b_z"]))
            r = _sigmoid(_gate_pre(_index0(proj_r, block), h, layer["U_r"], layer["b_r"]))
            cand = _tanh(_gate_pre(_index0(proj_c, block), r * h, layer["U_c"], layer["b_c"]))
            h = _gru_mix(z, h, cand)
            outputs.append(h)
        inputs = outputs
    return h @ head["W_o"] + head["b_o"]


def recurrent_forward(net: RecurrentNet, window: np.ndarray) -> np.ndarray:
    """Output of the net for one window of shape (L, input_dim)."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[1] != net.input_dim:
        raise DomainError(
            f"window must be (L, {net.input_dim}), got {window.shape}"
        )
    x_steps = [window[s : s + 1, :] for s in range(window.shape[0])]
    out = recurrent_stack_forward(net.layers, net.head, x_steps)
    return out[0]


@dataclass(frozen=True)
class ConditionalGaussian:
    """One-step conditional law N(mu, sigma) with sigma = (Lc Lc' + eps I) dt."""

    mu: np.ndarray
    L_chol: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        d = self.mu.shape[0]
        if self.L_chol.shape != (d, d) or self.sigma.shape != (d, d):
            raise DomainError("inconsistent ConditionalGaussian shapes")
        if not np.allclose(self.sigma, self.sigma.T):
            raise NumericalError("sigma must be symmetric")


@dataclass
class NsdeModel:
    """Drift and diffusion networks plus discretization and normalization."""

    drift_net: RecurrentNet
    diff_net: RecurrentNet
    lag: int
    dt: float
    eps: float
    norm_center: np.ndarray
    norm_scale: np.ndarray

    def __post_init__(self):
        if self.eps <= 0.0:
            raise DomainError("eps must be positive")
        if self.dt <= 0.0:
            raise DomainError("dt must be positive")
        if self.lag < 1:
            raise DomainError("lag must be at least 1")
        if np.any(self.norm_scale <= 0.0):
            raise DomainError("norm_scale must be strictly positive")
        d = self.drift_net.input_dim
        if self.drift_net.output_dim != d:
            raise DomainError("drift net must map state_dim to state_dim")
        if self.diff_net.output_dim != d * (d + 1) // 2:
            raise DomainError("diffusion net must emit D(D+1)/2 outputs")

    @property
    def state_dim(self) -> int:
        return self.drift_net.input_dim

    @classmethod
    def create(
        cls,
        state_dim: int,
        hidden_dim: int = 64,
        lag: int = 10,
        dt: float = 1.0,
        eps: float = 1e-3,
        n_layers: int = 3,
        seed: int = 0,
        norm_center=None,
        norm_scale=None,
    ) -> "NsdeModel":
        ss = np.random.SeedSequence(seed)
        drift_rng, diff_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
        drift = RecurrentNet.create(state_dim, hidden_dim, state_dim, n_layers, drift_rng)
        diff = RecurrentNet.create(
            state_dim, hidden_dim, state_dim * (state_dim + 1) // 2, n_layers, diff_rng
        )
        center = np.zeros(state_dim) if norm_center is None else np.asarray(norm_center, float)
        scale = np.ones(state_dim) if norm_scale is None else np.asarray(norm_scale, float)
        return cls(
            drift_net=drift,
            diff_net=diff,
            lag=lag,
            dt=dt,
            eps=eps,
            norm_center=center,
            norm_scale=scale,
        )

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=float) - self.norm_center) / self.norm_scale

    def denormalize(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=float) * self.norm_scale + self.norm_center

    def _window_batch(self, windows: np.ndarray) -> np.ndarray:
        """Validate, keep the last `lag` rows, and normalize; (S, L, D) out."""
        w = np.asarray(windows, dtype=float)
        squeeze = w.ndim == 2
        if squeeze:
            w = w[None]
        if w.ndim != 3 or w.shape[2] != self.state_dim:
            raise DomainError(f"window batch must be (..., L, {self.state_dim})")
        if w.shape[1] < self.lag:
            raise DomainError(f"need at least {self.lag} window rows, got {w.shape[1]}")
        return self.normalize(w[:, -self.lag :, :]), squeeze


def fit_feature_normalization(states: np.ndarray):
    """Per-feature median and interquartile range of the training states."""
    states = np.asarray(states, dtype=float)
    center = np.median(states, axis=0)
    q75, q25 = np.quantile(states, [0.75, 0.25], axis=0)
    scale = q75 - q25
    if np.any(scale <= 0.0):
        raise DomainError("feature with zero interquartile range cannot be normalized")
    return center, scale


def _net_forward_batched(net: RecurrentNet, norm_windows: np.ndarray) -> np.ndarray:
    x_steps = [norm_windows[:, s, :] for s in range(norm_windows.shape[1])]
    return recurrent_stack_forward(net.layers, net.head, x_steps)


def drift(model: NsdeModel, window: np.ndarray) -> np.ndarray:
    """Drift vector nu for the last L rows of a raw-state window."""
    norm, squeeze = model._window_batch(window)
    out = _net_forward_batched(model.drift_net, norm)
    return out[0] if squeeze else out


def diffusion(model: NsdeModel, window: np.ndarray) -> np.ndarray:
    """Lower-triangular diffusion factor for the last L rows of a window."""
    norm, squeeze = model._window_batch(window)
    flat = _net_forward_batched(model.diff_net, norm)
    tril = tril_from_flat(flat, model.state_dim)
    return tril[0] if squeeze else tril


def cond_step_prenormalized(model: NsdeModel, norm_windows: np.ndarray):
    """(mu, L_chol, sigma) for windows already in normalized units."""
    nu = _net_forward_batched(model.drift_net, norm_windows)
    flat = _net_forward_batched(model.diff_net, norm_windows)
    tril = tril_from_flat(flat, model.state_dim)
    mu = norm_windows[:, -1, :] + nu * model.dt
    eye = np.eye(model.state_dim)
    sigma = (tril @ np.swapaxes(tril, -1, -2) + model.eps * eye) * model.dt
    return mu, tril, sigma


def cond_step_batched(model: NsdeModel, windows: np.ndarray):
    """(mu, L_chol, sigma) arrays for a batch of raw windows; normalized units."""
    norm, _ = model._window_batch(windows)
    return cond_step_prenormalized(model, norm)


def cond_step(model: NsdeModel, window: np.ndarray) -> ConditionalGaussian:
    """One Euler step's conditional Gaussian given a raw-state window."""
    mu, tril, sigma = cond_step_batched(model, np.asarray(window, float)[None])
    return ConditionalGaussian(mu=mu[0], L_chol=tril[0], sigma=sigma[0])


def log_density(dist: ConditionalGaussian, x: np.ndarray) -> float:
    """Multivariate normal log-density via the Cholesky factor of sigma."""
    x = np.asarray(x, dtype=float)
    d = dist.mu.shape[0]
    if x.shape != (d,):
        raise DomainError(f"x must have shape ({d},), got {x.shape}")
    try:
        chol = np.linalg.cholesky(dist.sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite: {exc}") from exc
    y = solve_triangular(chol, x - dist.mu, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (d * np.log(2.0 * np.pi) + logdet + y @ y))


def sample(dist: ConditionalGaussian, rng: np.random.Generator) -> np.ndarray:
    """Draw mu + chol(sigma) z with z standard normal from the given rng."""
    chol = np.linalg.cholesky(dist.sigma)
    z = rng.standard_normal(dist.mu.shape[0])
    return dist.mu + chol @ z
