"""Blind joint channel estimation and symbol detection for block-fading ISI channels."""

from .algorithm import EmbpResult, InitStrategy, initialize, run_embp
from .baselines import (
    PilotConfig,
    brute_force_posterior,
    exact_em_step,
    log_likelihood,
    pilot_ls_estimate,
    trellis_map_detect,
)
from .bp import bp_iteration, compute_factors, detect, run_bp
from .em import Schedule, em_step, make_schedule, update_sigma2, update_tap
from .estimators import CoherentBPDetector, EMBPDetector, MAPDetector, PilotMAPDetector, ScheduleLearner
from .harness import ExperimentConfig, load_config, run_ber_sweep, run_mse_over_iters
from .model import ChannelParams, Constellation, bpsk, generate_block, get_constellation, qpsk
from .training import TrainConfig, TrainingSet, train_schedule

__version__ = "0.1.0"
