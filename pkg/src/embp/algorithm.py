"""EMBP: BP E-steps interleaved with momentum EM M-steps, and initializers."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .bp import bp_iteration, compute_factors, uniform_messages
from .em import Schedule, em_step
from .model import ChannelParams, Constellation, build_matched_stats, get_constellation


@dataclass(frozen=True)
class InitStrategy:
    """How the initial estimate is produced.

    ``impulse_power`` is blind: a single tap carrying ``(1 - alpha)`` of the
    received power, the rest attributed to noise. ``genie_perturbed`` adds
    ``scale * CN(0, 1)`` to every true tap and keeps the true noise variance
    (tests and controlled experiments only). ``external`` passes ``params``
    through.
    """

    kind: str = "impulse_power"
    alpha: float = 0.1
    scale: float = 0.0
    params: ChannelParams | None = None

    def __post_init__(self):
        if self.kind not in ("impulse_power", "genie_perturbed", "external"):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.kind == "impulse_power" and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.kind == "genie_perturbed" and self.scale < 0:
            raise ValueError("perturbation scale must be non-negative")
        if self.kind == "external" and self.params is None:
            raise ValueError("external init needs params")

    @classmethod
    def parse(cls, text: str) -> "InitStrategy":
        """Parse ``impulse_power[:alpha]`` or ``genie_perturbed[:scale]``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "impulse_power":
            return cls(kind, alpha=float(arg) if arg else 0.1)
        if kind == "genie_perturbed":
            return cls(kind, scale=float(arg) if arg else 0.0)
        raise ValueError(f"cannot parse init strategy {text!r}")

    def __str__(self):
        if self.kind == "impulse_power":
            return f"impulse_power:{self.alpha!r}"
        if self.kind == "genie_perturbed":
            return f"genie_perturbed:{self.scale!r}"
        return "external"


def initialize(strategy: InitStrategy, observation, L: int, constellation: Constellation,
               truth: ChannelParams | None = None, rng: np.random.Generator | None = None) -> ChannelParams:
    y = np.asarray(observation)
    if y.shape[-1] == 0:
        raise ValueError("empty observation")
    if strategy.kind == "impulse_power":
        p_y = np.sum(np.abs(y) ** 2, axis=-1) / y.shape[-1]
        h = np.zeros(y.shape[:-1] + (L + 1,), dtype=complex)
        h[..., 0] = np.sqrt((1.0 - strategy.alpha) * p_y / constellation.energy)
        return ChannelParams(h, strategy.alpha * p_y)
    if strategy.kind == "genie_perturbed":
        if truth is None:
            raise ValueError("genie_perturbed initialization needs the true parameters")
        if strategy.scale == 0.0:
            return ChannelParams(truth.h.copy(), truth.sigma2.copy())
        if rng is None:
            raise ValueError("genie_perturbed initialization needs an rng")
        shape = truth.h.shape
        noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
        return ChannelParams(truth.h + strategy.scale * noise, truth.sigma2.copy())
    return strategy.params


@dataclass
class EmbpResult:
    final_params: ChannelParams
    final_beliefs: np.ndarray
    trajectory: list[ChannelParams]
    belief_history: list[np.ndarray] | None = None
    counter: Counter = field(default_factory=Counter)

    @property
    def T(self) -> int:
        return len(self.trajectory) - 1

    def h_trajectory(self) -> np.ndarray:
        """Tap estimates stacked as ``(T+1, ..., L+1)``."""
        return np.stack([p.h for p in self.trajectory])


def run_embp(observation, constellation, L: int, schedule: Schedule, strategy: InitStrategy | ChannelParams,
             truth: ChannelParams | None = None, rng: np.random.Generator | None = None,
             counter: Counter | None = None, keep_beliefs: bool = False) -> EmbpResult:
    """Run ``schedule.T`` EMBP iterations on one block or a batch of blocks.

    Each iteration rebuilds the factors from the previous estimate, performs one
    damped BP iteration (messages persist across iterations) and one momentum
    M-step on the resulting beliefs.
    """
    constellation = get_constellation(constellation)
    y = np.asarray(observation)
    if L < 0:
        raise ValueError("L must be non-negative")
    if schedule.L != L:
        raise ValueError(f"schedule is for L={schedule.L}, got L={L}")
    if isinstance(strategy, ChannelParams):
        theta = strategy
    else:
        theta = initialize(strategy, y, L, constellation, truth=truth, rng=rng)
    counter = Counter() if counter is None else counter
    N = y.shape[-1] - L
    log_mu = uniform_messages(y.shape[:-1], N, L, constellation.M)
    trajectory = [theta]
    history = [] if keep_beliefs else None
    log_b = None
    for t in range(1, schedule.T + 1):
        factors = compute_factors(build_matched_stats(theta, y), constellation)
        log_mu, log_b = bp_iteration(log_mu, factors, schedule.beta_bp[t - 1])
        theta = em_step(t, schedule, np.exp(log_b), y, theta, constellation, counter=counter)
        if not (np.all(np.isfinite(theta.h)) and np.all(np.isfinite(theta.sigma2))):
            raise FloatingPointError(f"non-finite parameter estimate at EMBP iteration {t}")
        trajectory.append(theta)
        if keep_beliefs:
            history.append(log_b)
    return EmbpResult(theta, log_b, trajectory, history, counter)
