"""Diffusion-model distributionally robust training for forecasting models.

Subpackages at a glance: ``tensor`` (reverse-mode autodiff), ``diffusion``
(DDPM schedule, score model, sampler), ``inner`` (the constrained
inner maximisation), ``trainer`` (the outer loop), ``baselines``,
``data`` (series, windows, noise battery), ``metrics`` and ``cli``.
"""

from .baselines import kl_dro_robust_loss, train_baseline
from .config import ConfigError, ExperimentConfig, load_config
from .diffusion import ScoreModel, build_schedule, reverse_sample, traj_log_prob
from .inner import DualState, InnerConfig, dual_update, inner_max_run
from .metrics import mse_eval, wasserstein1
from .trainer import OuterConfig, ddro_train

__version__ = "0.1.0"
