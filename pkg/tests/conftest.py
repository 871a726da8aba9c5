import pytest

from ivgen.basis import enumerate_basis, project_surface
from ivgen.fpca import build_fpcc_series, fit_fpca
from ivgen.market_data import SyntheticConfig, apply_transforms, fit_transforms, synth_market


@pytest.fixture(scope="session")
def smile_panel():
    return synth_market(SyntheticConfig(equities=("AAA", "BBB"), n_dates=150), seed=11)


@pytest.fixture(scope="session")
def fitted(smile_panel):
    """Transforms, basis coefficients, FPCA model, and FPCC series for the smile panel."""
    spec = fit_transforms(smile_panel)
    transformed = apply_transforms(smile_panel, spec, "forward")
    basis = enumerate_basis(4)
    coeffs = [
        project_surface(basis, q[:, 1], q[:, 0], q[:, 2], date=d, equity=e)
        for d in transformed.dates
        for e in transformed.equities
        for q in [transformed.quotes[(d, e)]]
    ]
    fpca = fit_fpca(coeffs, threshold=0.995)
    series = build_fpcc_series(fpca, transformed)
    return {
        "panel": smile_panel,
        "spec": spec,
        "transformed": transformed,
        "basis": basis,
        "coeffs": coeffs,
        "fpca": fpca,
        "series": series,
    }


@pytest.fixture(scope="session")
def small_model(fitted):
    """A lightly trained small model over the fixture series (for PIT/diagnostic tests)."""
    from ivgen.nsde import NsdeModel
    from ivgen.training import TrainConfig, train_three_stage

    series = fitted["series"]
    model = NsdeModel.create(state_dim=series.state_dim, hidden_dim=8, lag=5, seed=2)
    config = TrainConfig(
        stage1_iters=80, stage2_iters=60, stage3_iters=40, quadrature_points=101, seed=0
    )
    trained, log = train_three_stage(model, series, config)
    return {"model": trained, "log": log}
