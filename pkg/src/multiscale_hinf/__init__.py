"""Robust H-infinity estimation on multiscale tree models."""

__version__ = "0.1.0"

from .filters import (
    FilterReport,
    FilterState,
    covariance_pass,
    estimation_cost,
    max_gamma_current,
    run_current_hinf,
    run_filter,
    run_kalman,
    run_predictor_hinf,
)
from .metrics import (
    EvalSummary,
    attenuation_holds,
    confidence_bounds,
    covariance_trend,
    game_objective,
    metrics_csv,
    snr_db,
    summarize,
)
from .model import (
    GameWeights,
    MultiscaleModel,
    NodeParams,
    NoiseSpec,
    TreeSignal,
    adversarial_disturbance,
    experiment_model,
    simulate,
    uniform_model,
)
from .pyramid import (
    ImagePlane,
    PyramidStack,
    build_pyramid,
    estimates_to_image,
    level_values,
    pyramid_to_observations,
    step_signal,
)
from .riccati import InfeasibleGammaError, RiccatiState, bisect_gamma, gain, max_gamma, riccati_step, sweep
from .tree import ROOT, NodeId, TreeError, TreeTopology, children, level_order, parent
