"""Joint IV-surface and price scenario generation.

Pipeline: panel ingestion and coordinate transforms (market_data), tensor
Legendre projection (basis), functional PCA (fpca), neural SDE dynamics
(nsde/training), scenario sampling and decoding (generator), and the
validation suites (arbitrage, hedging, diagnostics).
"""

from .basis import BasisSet, SurfaceCoefficients, enumerate_basis, eval_surface, legendre_eval, project_surface
from .errors import DataError, DomainError, IvgenError, NumericalError, ParseError
from .fpca import FpcaModel, FpccSeries, build_fpcc_series, eval_fpc, fit_fpca, project_to_fpcc, reconstruct_surface
from .generator import ScenarioSet, decode_scenarios, generate_paths
from .market_data import (
    IvQuote,
    PanelDataset,
    SyntheticConfig,
    TransformSpec,
    apply_transforms,
    fit_transforms,
    load_panel,
    synth_market,
)
from .nsde import ConditionalGaussian, NsdeModel, RecurrentNet, cond_step, diffusion, drift, log_density, recurrent_forward, sample
from .training import PitSeries, TrainConfig, mse_loss, nll_pit_loss, pit_penalty, pit_sequence, train_three_stage

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
