"""Particle-based Bayesian deep learning on simulated devices."""

from .autodiff import (
    SGD,
    DimensionError,
    MlpArch,
    ParamSet,
    PriorSpec,
    TapeStateError,
    Tensor,
    backward,
    forward,
    mse_loss,
    prior_logdensity_grad,
    sgd_step,
    sq_exp_kernel,
    sq_exp_kernel_grad_arg1,
)
from .infer import (
    PredictiveSummary,
    SvgdConfig,
    SwagPosterior,
    ppush_predict,
    svgd_update,
    swag_sample,
    train_ensemble_centralized,
    train_ensemble_distributed,
    train_svgd,
    train_swag,
)
from .runtime import EventHandle, ParticleContext, ParticleNN

__version__ = "0.1.0"
