import numpy as np
import pytest
from scipy.special import expit

from ivgen.errors import DomainError
from ivgen.nsde import (
    ConditionalGaussian,
    NsdeModel,
    RecurrentNet,
    cond_step,
    diffusion,
    drift,
    fit_feature_normalization,
    flat_from_tril,
    log_density,
    recurrent_forward,
    sample,
    tril_from_flat,
)


def _zero_model(d, hidden=6, lag=4, dt=1.0, eps=1e-3):
    model = NsdeModel.create(state_dim=d, hidden_dim=hidden, lag=lag, dt=dt, eps=eps, seed=0)
    for _, arr in model.drift_net.named_arrays():
        arr[...] = 0.0
    for _, arr in model.diff_net.named_arrays():
        arr[...] = 0.0
    return model


def _scalar_gru_oracle(net, window):
    h_layers = [np.zeros(net.hidden_dim) for _ in net.layers]
    for x in window:
        inp = x
        for li, layer in enumerate(net.layers):
            h = h_layers[li]
            z = expit(inp @ layer["W_z"] + h @ layer["U_z"] + layer["b_z"])
            r = expit(inp @ layer["W_r"] + h @ layer["U_r"] + layer["b_r"])
            c = np.tanh(inp @ layer["W_c"] + (r * h) @ layer["U_c"] + layer["b_c"])
            h_layers[li] = z * h + (1 - z) * c
            inp = h_layers[li]
    return h_layers[-1] @ net.head["W_o"] + net.head["b_o"]


def test_zero_network_outputs_head_bias():
    net = RecurrentNet.zeros(3, 6, 3)
    out = recurrent_forward(net, np.random.default_rng(0).standard_normal((5, 3)))
    assert np.array_equal(out, np.zeros(3))


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    net = RecurrentNet.create(2, 4, 5, rng=rng)
    window = rng.standard_normal((3, 2))
    got = recurrent_forward(net, window)
    expected = _scalar_gru_oracle(net, window)
    assert np.abs(got - expected).max() < 1e-12


def test_window_tail_is_what_matters():
    rng = np.random.default_rng(2)
    model = NsdeModel.create(state_dim=3, hidden_dim=5, lag=4, seed=1)
    window = rng.standard_normal((4, 3))
    longer = np.vstack([rng.standard_normal((3, 3)), window])
    assert np.array_equal(drift(model, window), drift(model, longer))
    assert np.array_equal(diffusion(model, window), diffusion(model, longer))
    dist_a = cond_step(model, window)
    dist_b = cond_step(model, longer)
    assert np.array_equal(dist_a.mu, dist_b.mu)
    assert np.array_equal(dist_a.sigma, dist_b.sigma)


def test_drift_zero_net_and_normalization_identity():
    model = _zero_model(3)
    window = np.random.default_rng(3).standard_normal((4, 3))
    assert np.array_equal(drift(model, window), np.zeros(3))
    # with identity stats, pre-normalized input gives the same answer
    model2 = NsdeModel.create(state_dim=3, hidden_dim=5, lag=4, seed=4)
    assert np.array_equal(drift(model2, window), drift(model2, model2.normalize(window)))


def test_diffusion_fill_order_and_roundtrip():
    model = _zero_model(3)
    # outputs enumerate the lower triangle row-major
    flat = np.arange(1.0, 7.0)
    tril = tril_from_flat(flat[None, :], 3)[0]
    assert np.array_equal(tril, np.array([[1, 0, 0], [2, 3, 0], [4, 5, 6.0]]))
    assert np.array_equal(flat_from_tril(tril[None])[0], flat)
    window = np.random.default_rng(5).standard_normal((4, 3))
    assert np.array_equal(diffusion(model, window), np.zeros((3, 3)))


def test_cond_step_zero_nets():
    model = _zero_model(3, dt=1.0, eps=1e-3)
    window = np.random.default_rng(6).standard_normal((4, 3))
    dist = cond_step(model, window)
    assert np.array_equal(dist.mu, window[-1])
    assert np.allclose(dist.sigma, 1e-3 * np.eye(3), atol=0)


def test_cond_step_sigma_floor_random_draws():
    rng = np.random.default_rng(7)
    for seed in range(20):
        model = NsdeModel.create(state_dim=3, hidden_dim=5, lag=4, eps=1e-3, seed=seed)
        window = rng.standard_normal((4, 3)) * 3.0
        dist = cond_step(model, window)
        eigs = np.linalg.eigvalsh(dist.sigma)
        assert eigs.min() >= 1e-3 * model.dt - 1e-12


def test_cond_step_mu_linear_in_dt():
    rng = np.random.default_rng(8)
    window = rng.standard_normal((4, 3))
    m1 = NsdeModel.create(state_dim=3, hidden_dim=5, lag=4, dt=1.0, seed=9)
    m2 = NsdeModel.create(state_dim=3, hidden_dim=5, lag=4, dt=2.0, seed=9)
    nu = drift(m1, window)
    d1 = cond_step(m1, window)
    d2 = cond_step(m2, window)
    assert np.allclose(d2.mu - d1.mu, nu * 1.0, atol=1e-14)


def test_log_density_values():
    d1 = ConditionalGaussian(mu=np.zeros(1), L_chol=np.zeros((1, 1)), sigma=np.eye(1))
    assert log_density(d1, np.zeros(1)) == pytest.approx(-0.9189385332046727, abs=1e-12)
    # diagonal bivariate = sum of univariates
    sig = np.diag([0.5, 2.0])
    d2 = ConditionalGaussian(mu=np.array([0.1, -0.2]), L_chol=np.zeros((2, 2)), sigma=sig)
    x = np.array([0.3, 0.4])
    parts = [
        log_density(
            ConditionalGaussian(np.array([d2.mu[i]]), np.zeros((1, 1)), np.array([[sig[i, i]]])),
            np.array([x[i]]),
        )
        for i in range(2)
    ]
    assert log_density(d2, x) == pytest.approx(sum(parts), rel=1e-12)


def test_log_density_matches_dense_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a = rng.standard_normal((4, 4))
        sigma = a @ a.T + 0.5 * np.eye(4)
        mu = rng.standard_normal(4)
        x = rng.standard_normal(4)
        dist = ConditionalGaussian(mu=mu, L_chol=np.linalg.cholesky(sigma), sigma=sigma)
        r = x - mu
        dense = -0.5 * (
            4 * np.log(2 * np.pi)
            + np.log(np.linalg.det(sigma))
            + r @ np.linalg.inv(sigma) @ r
        )
        assert log_density(dist, x) == pytest.approx(dense, abs=1e-10)


def test_sample_determinism_and_degenerate_sigma():
    sigma = 1e-30 * np.eye(3)
    dist = ConditionalGaussian(mu=np.array([1.0, 2.0, 3.0]), L_chol=np.zeros((3, 3)), sigma=sigma)
    s = sample(dist, np.random.default_rng(0))
    assert np.abs(s - dist.mu).max() < 1e-14
    d2 = ConditionalGaussian(mu=np.zeros(2), L_chol=np.eye(2), sigma=np.eye(2))
    assert np.array_equal(sample(d2, np.random.default_rng(5)), sample(d2, np.random.default_rng(5)))


def test_sample_covariance_monte_carlo():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((3, 3)) * 0.5
    sigma = a @ a.T + 0.1 * np.eye(3)
    dist = ConditionalGaussian(mu=np.zeros(3), L_chol=np.linalg.cholesky(sigma), sigma=sigma)
    draws = np.array([sample(dist, rng) for _ in range(20000)])
    cov = np.cov(draws.T)
    se = np.sqrt((np.outer(np.diag(sigma), np.diag(sigma)) + sigma**2) / draws.shape[0])
    assert np.all(np.abs(cov - sigma) <= 3.5 * se)


def test_empirical_lipschitz_bound():
    model = NsdeModel.create(state_dim=3, hidden_dim=6, lag=5, seed=11)
    rng = np.random.default_rng(12)
    ratios = []
    for _ in range(200):
        w1 = rng.standard_normal((5, 3))
        w2 = w1 + rng.standard_normal((5, 3)) * rng.uniform(1e-4, 1.0)
        dv = np.linalg.norm(drift(model, w1) - drift(model, w2))
        dw = np.linalg.norm(w1 - w2)
        ratios.append(dv / dw)
    assert np.isfinite(ratios).all()
    assert max(ratios) < 100.0


def test_param_counts_and_naming():
    net = RecurrentNet.create(3, 8, 6, rng=0)
    names = [n for n, _ in net.named_arrays("drift.")]
    assert names[0] == "drift.l0.W_z" and names[-1] == "drift.head.b_o"
    per_layer0 = 3 * (3 * 8 + 8 * 8 + 8)
    per_upper = 3 * (8 * 8 + 8 * 8 + 8)
    head = 8 * 6 + 6
    assert net.param_count() == per_layer0 + 2 * per_upper + head


def test_model_validation():
    with pytest.raises(DomainError):
        NsdeModel.create(state_dim=3, hidden_dim=4, lag=0)
    model = NsdeModel.create(state_dim=3, hidden_dim=4, lag=2)
    with pytest.raises(DomainError):
        drift(model, np.zeros((1, 3)))
    with pytest.raises(DomainError):
        drift(model, np.zeros((2, 5)))


def test_documented_defaults():
    # lag 10 (one window of observed surfaces), unit daily step, 1e-3 jitter,
    # hidden width 64, three stacked recurrent layers
    model = NsdeModel.create(state_dim=4)
    assert model.lag == 10
    assert model.dt == 1.0
    assert model.eps == 1e-3
    assert model.drift_net.hidden_dim == 64
    assert model.drift_net.n_layers == 3
    assert model.diff_net.output_dim == 4 * 5 // 2


def test_feature_normalization_median_iqr():
    rng = np.random.default_rng(13)
    states = rng.standard_normal((101, 3)) * np.array([1.0, 5.0, 0.2]) + np.array([0, 10, -3])
    center, scale = fit_feature_normalization(states)
    assert np.allclose(center, np.median(states, axis=0))
    q75, q25 = np.quantile(states, [0.75, 0.25], axis=0)
    assert np.allclose(scale, q75 - q25)
    with pytest.raises(DomainError):
        fit_feature_normalization(np.ones((50, 2)))
