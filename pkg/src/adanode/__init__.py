"""Latent neural-ODE forecasting with source-free test-time adaptation.

The model is a variational encoder over a fixed-length resampling of the
context window, latent dynamics given by a small ODE network, and a
Gaussian decoder. At test time the network weights stay frozen and only a
scalar scale/shift pair (alpha, gamma) applied inside the latent dynamics
is fitted to each unlabeled batch. The package also carries the synthetic
distribution-shift benchmark used to exercise that adaptation.
"""

from .adaptation import (
    AdaptConfig,
    AdaptStepRecord,
    AdaptTrace,
    adapt,
    adapt_with_lr_search,
    init_adaptation,
    loss_landscape,
)
from .bench import (
    AdaptPlan,
    EvalResult,
    ExperimentGrid,
    ModelConfig,
    TrainPlan,
    aggregate,
    evaluate,
    grid_from_dict,
    grid_to_dict,
    load_grid,
    run_grid,
)
from .errors import (
    AdanodeError,
    AdaptationFailure,
    ConfigError,
    DivergenceError,
    DomainError,
    EmptyDatasetError,
    ParseError,
    ShapeError,
    StateError,
    StepLimitError,
    StiffnessError,
    UsageError,
    VersionError,
)
from .metrics import ccc, mse, pearson_cc
from .model import (
    AdaptationParams,
    Architecture,
    ForecastDistribution,
    LatentODEModel,
    LatentPosterior,
    TimeSeriesWindow,
    load_checkpoint,
    resample_matrix,
    save_checkpoint,
)
from .objectives import (
    TTALossBreakdown,
    elbo_loss,
    gaussian_kl,
    tta_kl,
    tta_loss,
    tta_nll,
)
from .shiftgen import (
    GlyphSequenceSpec,
    SeriesDataset,
    ShiftSpec,
    SignalSpec,
    apply_shift,
    gen_dataset,
    gen_glyph_dataset,
    gen_rotating_glyph,
    gen_signal,
    read_dataset,
    write_dataset,
)
from .solvers import SolveConfig, solve
from .train import TrainConfig, fit_source_model, train_source_model

__version__ = "0.1.0"
