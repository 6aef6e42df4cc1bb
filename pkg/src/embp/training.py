"""Learning EMBP momentum schedules by unrolling, with L1-guided pruning to an update budget."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .algorithm import EmbpResult, InitStrategy, initialize, run_embp
from .em import Schedule
from .model import (
    ChannelParams,
    Constellation,
    TransmissionBlock,
    convolve,
    complex_noise,
    get_constellation,
    sample_channel,
    snr_to_sigma2,
)
from .unrolled import CTYPE, RTYPE, UnrolledEMBP

logger = logging.getLogger(__name__)

OBJECTIVES = ("mse_h", "neg_bmi")
BELIEF_FLOOR = 1e-30


# ---------------------------------------------------------------- losses


def sign_resolved_flip(h_hat, h_true) -> np.ndarray:
    """True where ``-h_hat`` is closer to the truth than ``h_hat``."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    return np.sum(np.abs(h_hat + h_true) ** 2, axis=-1) < np.sum(np.abs(h_hat - h_true) ** 2, axis=-1)


def squared_error(h_hat, h_true) -> np.ndarray:
    """Per-block ``min(||h_hat - h||^2, ||h_hat + h||^2)``."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    return np.minimum(np.sum(np.abs(h_hat - h_true) ** 2, axis=-1), np.sum(np.abs(h_hat + h_true) ** 2, axis=-1))


def loss_mse(result: EmbpResult | ChannelParams, truth: ChannelParams) -> float:
    params = result.final_params if isinstance(result, EmbpResult) else result
    if params.h.shape != truth.h.shape:
        raise ValueError("estimate and truth have different shapes")
    return float(np.mean(squared_error(params.h, truth.h)))


def bmi(beliefs, true_indices, constellation: Constellation, clip: bool = True) -> float:
    """``log2(M)`` minus the mean cross-entropy (bits) of the beliefs at the true symbols.

    ``beliefs`` are linear-domain probabilities ``(..., N, M)``.
    """
    beliefs = np.asarray(beliefs, dtype=float)
    true_indices = np.asarray(true_indices)
    p = np.take_along_axis(beliefs, true_indices[..., None], axis=-1)[..., 0]
    value = np.log2(constellation.M) + np.mean(np.log2(np.maximum(p, BELIEF_FLOOR)))
    return float(np.clip(value, 0.0, np.log2(constellation.M))) if clip else float(value)


def loss_bmi(beliefs, true_indices, constellation: Constellation) -> float:
    """Negative (unclipped) BMI, the quantity minimized during training."""
    return -bmi(beliefs, true_indices, constellation, clip=False)


def resolve_beliefs(beliefs, flip, constellation: Constellation):
    """Relabel beliefs of blocks whose estimate converged to ``-h``."""
    neg = constellation.negation_index()
    beliefs = np.asarray(beliefs)
    return np.where(np.asarray(flip)[..., None, None], beliefs[..., neg], beliefs)


def l1_penalty(beta_em, k_prime: int) -> float:
    """Sum of the ``k_prime`` smallest ``|beta|`` entries (ties in row-major order)."""
    flat = np.abs(np.asarray(beta_em, dtype=float)).reshape(-1)
    if not 0 <= k_prime <= flat.size:
        raise ValueError("k_prime out of range")
    order = np.argsort(flat, kind="stable")
    return float(np.sum(flat[order[:k_prime]]))


def _l1_penalty_torch(beta_em: torch.Tensor, k_prime: int) -> torch.Tensor:
    if k_prime == 0:
        return beta_em.sum() * 0.0
    flat = beta_em.abs().reshape(-1)
    order = np.argsort(flat.detach().numpy(), kind="stable")[:k_prime]
    return flat[torch.as_tensor(order)].sum()


def prune_schedule(schedule: Schedule, k_prime: int, min_weight: float = 1e-3) -> Schedule:
    """Zero the ``k_prime`` smallest weights; other zero weights are raised to ``min_weight``."""
    em = schedule.beta_em.copy()
    flat = em.reshape(-1)
    order = np.argsort(np.abs(flat), kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:k_prime]] = False
    flat[~keep] = 0.0
    flat[keep] = np.maximum(flat[keep], min_weight)
    return Schedule(em, schedule.beta_bp)


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class TrainingSet:
    """Deterministic source of training records ``(c, theta, y)``.

    Record batches are regenerated on demand from ``(seed, batch index)``, so a
    set of any size costs no memory and any batch can be reproduced.
    """

    N: int
    L: int
    snr_range: tuple[float, float]
    constellation: Constellation = field(default_factory=lambda: get_constellation("bpsk"))
    seed: int = 0
    channels: np.ndarray | None = None

    def batch(self, index: int, size: int) -> TransmissionBlock:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(index,)))
        if self.channels is None:
            h = sample_channel(self.L, rng, size)
        else:
            h = self.channels[rng.integers(0, len(self.channels), size)]
        lo, hi = self.snr_range
        snr = rng.uniform(lo, hi, size) if hi > lo else np.full(size, float(lo))
        sigma2 = snr_to_sigma2(snr, h, self.constellation, self.N)
        idx = self.constellation.sample_indices(rng, (size, self.N))
        symbols = self.constellation.points[idx]
        y = convolve(h, symbols)
        y = y + complex_noise(rng, sigma2, y.shape)
        return TransmissionBlock(idx, symbols, y, ChannelParams(h, sigma2))

    def init_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(index, 1)))


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mse_h"
    batches: int = 250
    batch_size: int = 256
    step_size: float = 0.01
    k_em_target: int | None = None
    lambda_l1: float = 0.1
    gradient_mode: str = "exact_unrolled"
    train_beta_em: bool = True
    train_beta_bp: bool = False
    init: InitStrategy = field(default_factory=InitStrategy)
    val_batches: int = 0
    log_every: int = 10
    spsa_step: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.gradient_mode not in ("exact_unrolled", "stochastic_perturbation"):
            raise ValueError("unknown gradient mode")
        if self.batch_size < 1 or self.batches < 0:
            raise ValueError("batch_size must be >= 1 and batches >= 0")

    def k_prime_target(self, schedule: Schedule) -> int:
        total = schedule.beta_em.size
        if self.k_em_target is None:
            return 0
        return max(0, total - self.k_em_target)

    def k_prime_at(self, batch: int, schedule: Schedule) -> int:
        """Linear staircase from 0 to the target over the run."""
        target = self.k_prime_target(schedule)
        if target == 0 or self.batches == 0:
            return 0
        step = math.ceil(self.batches / (target + 1))
        return min(batch // step, target)


# ---------------------------------------------------------------- objective


def _initial_params(config: TrainConfig, blocks: TransmissionBlock, L, constellation, rng):
    return initialize(config.init, blocks.observation, L, constellation, truth=blocks.truth, rng=rng)


def _torch_loss(model, blocks, theta0, beta_em, beta_bp, objective, constellation):
    y = torch.as_tensor(blocks.observation, dtype=CTYPE)
    h_true = torch.as_tensor(blocks.truth.h, dtype=CTYPE)
    h, _, log_b, _ = model(y, torch.as_tensor(theta0.h, dtype=CTYPE), torch.as_tensor(theta0.sigma2, dtype=RTYPE),
                           beta_em, beta_bp)
    err_pos = torch.sum(torch.abs(h - h_true) ** 2, dim=-1)
    err_neg = torch.sum(torch.abs(h + h_true) ** 2, dim=-1)
    if objective == "mse_h":
        return torch.mean(torch.minimum(err_pos, err_neg))
    flip = (err_neg < err_pos).detach()
    neg = torch.as_tensor(constellation.negation_index())
    log_b = torch.where(flip[:, None, None], log_b[..., neg], log_b)
    true_idx = torch.as_tensor(blocks.symbol_indices)
    lp = torch.gather(log_b, -1, true_idx[..., None])[..., 0]
    log2_floor = math.log(BELIEF_FLOOR)
    ce = -torch.mean(torch.clamp(lp, min=log2_floor)) / math.log(2.0)
    return ce - math.log2(constellation.M)


def batch_objective(schedule: Schedule, blocks: TransmissionBlock, objective: str, theta0: ChannelParams,
                    constellation: Constellation) -> float:
    """Mean batch loss evaluated with the reference (numpy) EMBP."""
    res = run_embp(blocks.observation, constellation, schedule.L, schedule, theta0)
    if objective == "mse_h":
        return loss_mse(res, blocks.truth)
    flip = sign_resolved_flip(res.final_params.h, blocks.truth.h)
    beliefs = resolve_beliefs(np.exp(res.final_beliefs), flip, constellation)
    return loss_bmi(beliefs, blocks.symbol_indices, constellation)


def gradient_estimate(schedule: Schedule, blocks: TransmissionBlock, objective: str, theta0: ChannelParams,
                      constellation: Constellation, mode: str = "exact_unrolled", rng=None, step: float = 0.05,
                      scale: float = 1.0):
    """Gradient of ``scale * mean batch loss`` with respect to ``(beta_em, beta_bp)``.

    ``exact_unrolled`` differentiates the unrolled computation;
    ``stochastic_perturbation`` returns a two-sided simultaneous-perturbation
    estimate using the reference EMBP (Rademacher directions from ``rng``).
    """
    constellation = get_constellation(constellation)
    if mode == "exact_unrolled":
        model = UnrolledEMBP(constellation.points, schedule.L)
        beta_em = torch.tensor(schedule.beta_em, dtype=RTYPE, requires_grad=True)
        beta_bp = torch.tensor(schedule.beta_bp, dtype=RTYPE, requires_grad=True)
        loss = scale * _torch_loss(model, blocks, theta0, beta_em, beta_bp, objective, constellation)
        loss.backward()
        g_em, g_bp = beta_em.grad.numpy().copy(), beta_bp.grad.numpy().copy()
    elif mode == "stochastic_perturbation":
        rng = np.random.default_rng(0) if rng is None else rng
        em, bp = schedule.beta_em, schedule.beta_bp
        d_em = rng.choice([-1.0, 1.0], size=em.shape)
        d_bp = rng.choice([-1.0, 1.0], size=bp.shape)

        def f(sign):
            # perturbations are clipped back into [0, 1]; the realized step is used below
            s = Schedule(np.clip(em + sign * step * d_em, 0, 1), np.clip(bp + sign * step * d_bp, 0, 1))
            return scale * batch_objective(s, blocks, objective, theta0, constellation), s

        f_plus, s_plus = f(1.0)
        f_minus, s_minus = f(-1.0)
        diff_em = s_plus.beta_em - s_minus.beta_em
        diff_bp = s_plus.beta_bp - s_minus.beta_bp
        with np.errstate(divide="ignore", invalid="ignore"):
            g_em = np.where(diff_em != 0, (f_plus - f_minus) / diff_em, 0.0)
            g_bp = np.where(diff_bp != 0, (f_plus - f_minus) / diff_bp, 0.0)
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    if not (np.all(np.isfinite(g_em)) and np.all(np.isfinite(g_bp))):
        raise FloatingPointError("non-finite gradient")
    return g_em, g_bp


# ---------------------------------------------------------------- training


@dataclass
class TrainLogRow:
    batch: int
    loss: float
    k_prime: int
    val_mse: float


def validation_mse(schedule: Schedule, train: TrainingSet, config: TrainConfig) -> float:
    errs = []
    for v in range(config.val_batches):
        index = 1_000_000 + v
        blocks = train.batch(index, config.batch_size)
        theta0 = _initial_params(config, blocks, train.L, train.constellation, train.init_rng(index))
        res = run_embp(blocks.observation, train.constellation, train.L, schedule, theta0)
        errs.append(squared_error(res.final_params.h, blocks.truth.h))
    return float(np.mean(np.concatenate(errs))) if errs else float("nan")


def train_schedule(train: TrainingSet, config: TrainConfig, initial: Schedule, log: list | None = None) -> Schedule:
    """Adam on the mean batch loss plus ``lambda * L1(K')``, then hard pruning.

    Weights are projected onto ``[0, 1]`` after every step. ``K'`` grows in a
    staircase to ``T (L+2) - k_em_target``; at the end the ``K'`` smallest
    ``beta_em`` entries are set to zero. ``log`` (if given) receives one
    :class:`TrainLogRow` every ``config.log_every`` batches.
    """
    if initial.L != train.L:
        raise ValueError("schedule and training set disagree on L")
    constellation = train.constellation
    target = config.k_prime_target(initial)
    if config.batches == 0:
        return prune_schedule(initial, target) if target else initial
    torch.manual_seed(config.seed)
    model = UnrolledEMBP(constellation.points, train.L)
    beta_em = torch.tensor(initial.beta_em, dtype=RTYPE, requires_grad=config.train_beta_em)
    beta_bp = torch.tensor(initial.beta_bp, dtype=RTYPE, requires_grad=config.train_beta_bp)
    params = [p for p in (beta_em, beta_bp) if p.requires_grad]
    if not params:
        raise ValueError("nothing to train: enable train_beta_em or train_beta_bp")
    opt = torch.optim.Adam(params, lr=config.step_size)
    spsa_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(7,)))
    for b in range(config.batches):
        blocks = train.batch(b, config.batch_size)
        theta0 = _initial_params(config, blocks, train.L, constellation, train.init_rng(b))
        k_prime = config.k_prime_at(b, initial) if config.train_beta_em else 0
        opt.zero_grad()
        if config.gradient_mode == "exact_unrolled":
            loss = _torch_loss(model, blocks, theta0, beta_em, beta_bp, config.objective, constellation)
            if config.train_beta_em and config.lambda_l1 > 0:
                loss = loss + config.lambda_l1 * _l1_penalty_torch(beta_em, k_prime)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at batch {b}: beta_em={beta_em.detach().numpy()}")
            loss.backward()
            loss_value = float(loss.detach())
        else:
            current = Schedule(beta_em.detach().numpy(), beta_bp.detach().numpy())
            g_em, g_bp = gradient_estimate(current, blocks, config.objective, theta0, constellation,
                                           mode="stochastic_perturbation", rng=spsa_rng, step=config.spsa_step)
            if config.train_beta_em and config.lambda_l1 > 0 and k_prime:
                flat = np.zeros(g_em.size)
                order = np.argsort(np.abs(current.beta_em).reshape(-1), kind="stable")[:k_prime]
                flat[order] = np.sign(current.beta_em.reshape(-1)[order])
                g_em = g_em + config.lambda_l1 * flat.reshape(g_em.shape)
            loss_value = batch_objective(current, blocks, config.objective, theta0, constellation)
            if config.train_beta_em:
                beta_em.grad = torch.as_tensor(g_em, dtype=RTYPE)
            if config.train_beta_bp:
                beta_bp.grad = torch.as_tensor(g_bp, dtype=RTYPE)
        opt.step()
        with torch.no_grad():
            beta_em.clamp_(0.0, 1.0)
            beta_bp.clamp_(0.0, 1.0)
        if log is not None and config.log_every and (b % config.log_every == 0 or b == config.batches - 1):
            current = Schedule(beta_em.detach().numpy().copy(), beta_bp.detach().numpy().copy())
            row = TrainLogRow(b, loss_value, k_prime, validation_mse(current, train, config))
            log.append(row)
            logger.info("batch %d loss %.6g K'=%d val_mse %.6g", b, loss_value, k_prime, row.val_mse)
    learned = Schedule(beta_em.detach().numpy().copy(), beta_bp.detach().numpy().copy())
    return prune_schedule(learned, target) if target else learned


def write_train_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "loss", "k_prime", "val_mse"])
        for r in rows:
            w.writerow([r.batch, f"{r.loss:.8g}", r.k_prime, f"{r.val_mse:.8g}"])


def config_with(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
