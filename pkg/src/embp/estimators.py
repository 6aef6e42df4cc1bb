"""scikit-learn style wrappers around the detectors and the schedule trainer.

Observations are rows of ``Y`` with shape ``(blocks, N+L)``. Blind detectors
are transductive: ``fit`` estimates the channel of every block it is given,
``predict`` returns hard symbol indices, ``predict_proba`` the symbol
beliefs and ``transform`` the tap estimates.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .algorithm import InitStrategy, run_embp
from .baselines import pilot_log_prior, pilot_ls_estimate, trellis_map_detect
from .bp import detect, run_bp
from .em import make_schedule
from .model import ChannelParams, build_matched_stats
from .training import BELIEF_FLOOR, TrainConfig, TrainingSet, train_schedule
from .validation import check_channel, check_constellation, check_memory, check_observations, check_schedule


class EMBPDetector(BaseEstimator):
    """Blind joint channel estimation and detection.

    Parameters
    ----------
    L : channel memory.
    schedule : ``"serial"``, ``"parallel"``, a :class:`~embp.em.Schedule` or a schedule file.
    T : iterations for named schedules (default ``3 (L+2)``).
    init : ``impulse_power[:alpha]`` or an :class:`~embp.algorithm.InitStrategy` (e.g. ``external``).
    """

    def __init__(self, L=2, constellation="bpsk", schedule="serial", T=None, init="impulse_power:0.1"):
        self.L = L
        self.constellation = constellation
        self.schedule = schedule
        self.T = T
        self.init = init

    def _run(self, Y):
        L = check_memory(self.L)
        Y = check_observations(Y, L)
        c = check_constellation(self.constellation)
        sched = check_schedule(self.schedule, L, self.T)
        init = InitStrategy.parse(self.init) if isinstance(self.init, str) else self.init
        return run_embp(Y, c, L, sched, init), c

    def fit(self, Y, y=None):
        result, c = self._run(Y)
        self.channel_ = result.final_params
        self.log_beliefs_ = result.final_beliefs
        self.trajectory_ = result.h_trajectory()
        self.constellation_ = c
        return self

    def predict_proba(self, Y):
        result, _ = self._run(Y)
        return np.exp(result.final_beliefs)

    def predict(self, Y):
        result, _ = self._run(Y)
        return detect(result.final_beliefs)

    def fit_predict(self, Y, y=None):
        return detect(self.fit(Y).log_beliefs_)

    def transform(self, Y):
        """Tap estimates ``(blocks, L+1)``."""
        result, _ = self._run(Y)
        return result.final_params.h

    def fit_transform(self, Y, y=None):
        return self.fit(Y).channel_.h

    def symbols(self):
        check_is_fitted(self, "log_beliefs_")
        return self.constellation_.points[detect(self.log_beliefs_)]


class CoherentBPDetector(BaseEstimator):
    """BP detection with known channel parameters ``channel``."""

    def __init__(self, channel=None, constellation="bpsk", T=12, beta_bp=None):
        self.channel = channel
        self.constellation = constellation
        self.T = T
        self.beta_bp = beta_bp

    def fit(self, Y=None, y=None):
        if self.channel is None:
            raise ValueError("coherent detection needs the channel parameters")
        self.constellation_ = check_constellation(self.constellation)
        return self

    def predict_proba(self, Y):
        check_is_fitted(self, "constellation_")
        Y = check_observations(Y, self.channel.L)
        params = check_channel(self.channel, len(Y))
        return np.exp(run_bp(build_matched_stats(params, Y), self.constellation_, self.T, beta_bp=self.beta_bp))

    def predict(self, Y):
        return np.argmax(self.predict_proba(Y), axis=-1)


class MAPDetector(CoherentBPDetector):
    """Exact symbol-wise MAP detection by forward-backward with known channel."""

    def __init__(self, channel=None, constellation="bpsk"):
        self.channel = channel
        self.constellation = constellation

    def predict_proba(self, Y):
        check_is_fitted(self, "constellation_")
        Y = check_observations(Y, self.channel.L)
        return trellis_map_detect(Y, check_channel(self.channel, len(Y)), self.constellation_)


class PilotMAPDetector(BaseEstimator):
    """Least-squares channel estimate from a pilot preamble followed by MAP detection.

    ``pilots`` holds the constellation indices of the leading pilot symbols,
    shared by all blocks.
    """

    def __init__(self, pilots=None, L=2, constellation="bpsk"):
        self.pilots = pilots
        self.L = L
        self.constellation = constellation

    def fit(self, Y, y=None):
        L = check_memory(self.L)
        Y = check_observations(Y, L)
        c = check_constellation(self.constellation)
        if self.pilots is None:
            raise ValueError("pilot indices are required")
        pil = np.asarray(self.pilots)
        self.channel_ = pilot_ls_estimate(Y, np.broadcast_to(c.points[pil], (len(Y), len(pil))), L, c)
        self.constellation_ = c
        return self

    def transform(self, Y):
        return self.fit(Y).channel_.h

    def predict_proba(self, Y):
        self.fit(Y)
        Y = check_observations(Y, self.L)
        pil = np.asarray(self.pilots)
        N = Y.shape[1] - self.L
        prior = pilot_log_prior(np.broadcast_to(pil, (len(Y), len(pil))), N, self.constellation_.M, (len(Y),))
        return trellis_map_detect(Y, self.channel_, self.constellation_, log_prior=prior)

    def predict(self, Y):
        return np.argmax(self.predict_proba(Y), axis=-1)


class ScheduleLearner(BaseEstimator):
    """Learn momentum weights by unrolled gradient descent on synthetic blocks.

    ``fit`` draws its own training data; pass ``channels`` to train on a fixed
    channel set. The learned schedule is ``schedule_``.
    """

    def __init__(self, T=3, L=5, N=100, constellation="bpsk", objective="mse_h", k_em_target=None,
                 batches=250, batch_size=256, step_size=0.02, lambda_l1=0.1, snr_range=(0.0, 12.0),
                 init="impulse_power", start="parallel", train_beta_em=True, train_beta_bp=False,
                 gradient_mode="exact_unrolled", seed=0):
        self.T = T
        self.L = L
        self.N = N
        self.constellation = constellation
        self.objective = objective
        self.k_em_target = k_em_target
        self.batches = batches
        self.batch_size = batch_size
        self.step_size = step_size
        self.lambda_l1 = lambda_l1
        self.snr_range = snr_range
        self.init = init
        self.start = start
        self.train_beta_em = train_beta_em
        self.train_beta_bp = train_beta_bp
        self.gradient_mode = gradient_mode
        self.seed = seed

    def fit(self, channels=None, y=None):
        L = check_memory(self.L)
        c = check_constellation(self.constellation)
        if channels is not None:
            channels = np.asarray(channels, dtype=complex)
            if channels.ndim != 2 or channels.shape[1] != L + 1:
                raise ValueError(f"channels must have shape (count, {L + 1})")
        train = TrainingSet(self.N, L, tuple(self.snr_range), c, seed=self.seed, channels=channels)
        config = TrainConfig(
            objective=self.objective, batches=self.batches, batch_size=self.batch_size, step_size=self.step_size,
            k_em_target=self.k_em_target, lambda_l1=self.lambda_l1, gradient_mode=self.gradient_mode,
            train_beta_em=self.train_beta_em, train_beta_bp=self.train_beta_bp,
            init=InitStrategy.parse(self.init) if isinstance(self.init, str) else self.init, seed=self.seed,
        )
        if self.start == "frozen":
            initial = make_schedule("custom", self.T, L, beta_em=np.zeros((self.T, L + 2)))
        else:
            initial = check_schedule(self.start, L, self.T)
        self.history_ = []
        self.schedule_ = train_schedule(train, config, initial, log=self.history_)
        return self

    def transform(self, Y):
        """Tap estimates from running EMBP with the learned schedule."""
        check_is_fitted(self, "schedule_")
        det = EMBPDetector(L=self.L, constellation=self.constellation, schedule=self.schedule_,
                           init=self.init if self.init != "genie_perturbed" else "impulse_power")
        return det.transform(Y)


def log_beliefs(proba) -> np.ndarray:
    return np.log(np.maximum(proba, BELIEF_FLOOR))


__all__ = [
    "EMBPDetector",
    "CoherentBPDetector",
    "MAPDetector",
    "PilotMAPDetector",
    "ScheduleLearner",
    "ChannelParams",
]
