"""Closed-form EM parameter updates with per-parameter momentum, and update schedules."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ChannelParams, Constellation, build_matched_stats

SIGMA2_FLOOR_REL = 1e-8


def param_names(L: int) -> list[str]:
    return [f"h{l}" for l in range(L + 1)] + ["sigma2"]


@dataclass(frozen=True)
class Schedule:
    """Momentum weights of an EMBP run.

    ``beta_em[t, k]`` weights parameter ``k`` (ordered h_0..h_L, sigma2) in EM
    step ``t + 1``; an exact zero skips that update. ``beta_bp[t]`` damps the
    BP messages of iteration ``t + 1``.
    """

    beta_em: np.ndarray
    beta_bp: np.ndarray

    def __post_init__(self):
        beta_em = np.array(self.beta_em, dtype=float, ndmin=2)
        beta_bp = np.array(self.beta_bp, dtype=float, ndmin=1)
        if beta_em.shape[0] != beta_bp.shape[0]:
            raise ValueError("beta_em and beta_bp must have T rows")
        if beta_em.shape[0] < 1 or beta_em.shape[1] < 2:
            raise ValueError("schedule needs T >= 1 and at least L + 2 = 2 columns")
        for name, arr in (("beta_em", beta_em), ("beta_bp", beta_bp)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        object.__setattr__(self, "beta_em", beta_em)
        object.__setattr__(self, "beta_bp", beta_bp)

    @property
    def T(self) -> int:
        return self.beta_em.shape[0]

    @property
    def L(self) -> int:
        return self.beta_em.shape[1] - 2

    @property
    def n_updates(self) -> int:
        """Raw parameter update computations per block."""
        return int(np.count_nonzero(self.beta_em))

    def with_beta_bp(self, beta_bp) -> "Schedule":
        return Schedule(self.beta_em, np.broadcast_to(np.asarray(beta_bp, dtype=float), (self.T,)))

    def save(self, path) -> None:
        Path(path).write_text(dumps_schedule(self))

    @classmethod
    def load(cls, path) -> "Schedule":
        return loads_schedule(Path(path).read_text())

    def __eq__(self, other):
        return (
            isinstance(other, Schedule)
            and np.array_equal(self.beta_em, other.beta_em)
            and np.array_equal(self.beta_bp, other.beta_bp)
        )


def dumps_schedule(schedule: Schedule) -> str:
    """Text form: ``T``, then T rows of L+2 weights, then one row of T BP weights."""
    lines = [str(schedule.T)]
    lines += [" ".join(repr(float(v)) for v in row) for row in schedule.beta_em]
    lines.append(" ".join(repr(float(v)) for v in schedule.beta_bp))
    return "\n".join(lines) + "\n"


def loads_schedule(text: str) -> Schedule:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        T = int(rows[0][0])
        beta_em = np.array([[float(v) for v in r] for r in rows[1 : T + 1]])
        beta_bp = np.array([float(v) for v in rows[T + 1]])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed schedule file: {exc}") from None
    if len(rows) != T + 2 or beta_em.shape[0] != T or len({len(r) for r in rows[1 : T + 1]}) != 1:
        raise ValueError("malformed schedule file: row count or width mismatch")
    return Schedule(beta_em, beta_bp)


def make_schedule(kind: str, T: int, L: int, beta_em=None, beta_bp=1.0) -> Schedule:
    """Named schedules.

    ``serial`` updates one parameter per step, cycling h_0..h_L, sigma2;
    ``parallel`` updates every parameter at every step; ``custom`` validates a
    caller-supplied ``beta_em``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    P = L + 2
    if kind == "serial":
        em = np.zeros((T, P))
        em[np.arange(T), np.arange(T) % P] = 1.0
    elif kind == "parallel":
        em = np.ones((T, P))
    elif kind == "custom":
        if beta_em is None:
            raise ValueError("custom schedule needs beta_em")
        em = np.asarray(beta_em, dtype=float)
        if em.shape != (T, P):
            raise ValueError(f"beta_em must have shape {(T, P)}")
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return Schedule(em, np.broadcast_to(np.asarray(beta_bp, dtype=float), (T,)).copy())


def symbol_moments(beliefs: np.ndarray, constellation: Constellation):
    """Mean ``E[c_n]`` and power ``E|c_n|^2`` under per-symbol beliefs (linear domain)."""
    c = constellation.points
    return beliefs @ c, beliefs @ (np.abs(c) ** 2)


def lag_products(mean: np.ndarray, L: int) -> np.ndarray:
    """``S[..., L + d] = sum_n conj(m_n) m_{n+d}`` over in-block pairs, ``d = -L..L``."""
    N = mean.shape[-1]
    S = np.zeros(mean.shape[:-1] + (2 * L + 1,), dtype=complex)
    for d in range(-L, L + 1):
        if abs(d) >= N:
            continue
        if d >= 0:
            S[..., L + d] = np.sum(np.conj(mean[..., : N - d]) * mean[..., d:], axis=-1)
        else:
            S[..., L + d] = np.sum(np.conj(mean[..., -d:]) * mean[..., : N + d], axis=-1)
    return S


def sigma2_floor(observation) -> np.ndarray:
    return SIGMA2_FLOOR_REL * np.mean(np.abs(observation) ** 2, axis=-1)


def update_sigma2(beliefs, observation, current: ChannelParams, constellation: Constellation):
    """Noise variance maximizing the ELBO for fixed taps ``current.h``.

    Expected residual energy ``E_b ||y - H c||^2`` under product beliefs, divided
    by the number of observed samples ``N + L``.
    """
    y = np.asarray(observation)
    L = current.L
    stats = build_matched_stats(current, y)
    mean, power = symbol_moments(beliefs, constellation)
    N = mean.shape[-1]
    fit = np.sum(2.0 * np.real(stats.x * np.conj(mean)) - stats.r[..., :1].real * power, axis=-1)
    for d in range(1, min(L, N - 1) + 1):
        # pairs m = n - d < n contribute 2 Re{G_nm E[c_m] conj(E[c_n])}, G_nm = conj(r_d)
        fit = fit - 2.0 * np.real(np.conj(stats.r[..., d]) * np.sum(mean[..., : N - d] * np.conj(mean[..., d:]), axis=-1))
    residual = np.sum(np.abs(y) ** 2, axis=-1) - fit
    return np.maximum(residual / (N + L), sigma2_floor(y))


def update_tap(ell: int, beliefs, observation, current: ChannelParams, constellation: Constellation):
    """Tap ``h_ell`` maximizing the ELBO with the other taps held at ``current.h``."""
    L = current.L
    if not 0 <= ell <= L:
        raise ValueError("tap index out of range")
    y = np.asarray(observation)
    mean, power = symbol_moments(beliefs, constellation)
    return _tap_update(ell, mean, power, y, current.h, lag_products(mean, L))


def _tap_update(ell, mean, power, y, h, S):
    L = h.shape[-1] - 1
    N = mean.shape[-1]
    num = np.sum(y[..., ell : ell + N] * np.conj(mean), axis=-1)
    for k in range(L + 1):
        if k != ell:
            num = num - h[..., k] * S[..., L + ell - k]
    den = np.sum(power, axis=-1)
    if np.any(den <= 1e-12):
        raise FloatingPointError("degenerate tap update denominator")
    return num / den


def em_step(t: int, schedule: Schedule, beliefs, observation, current: ChannelParams,
            constellation: Constellation, counter: Counter | None = None) -> ChannelParams:
    """Momentum M-step ``t`` (1-based).

    Every raw update reads the previous estimate; parameters with zero weight
    are copied without computing their update. ``counter`` (if given) is
    incremented by the number of blocks for each raw update computed.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError("step index out of range")
    L = current.L
    if schedule.L != L:
        raise ValueError("schedule and channel memory disagree")
    beta = schedule.beta_em[t - 1]
    y = np.asarray(observation)
    n_blocks = int(np.prod(current.batch_shape, dtype=int))
    names = param_names(L)
    h = current.h.copy()
    sigma2 = current.sigma2.copy()
    if np.any(beta[: L + 1] > 0):
        mean, power = symbol_moments(beliefs, constellation)
        S = lag_products(mean, L)
    for ell in range(L + 1):
        if beta[ell] > 0:
            raw = _tap_update(ell, mean, power, y, current.h, S)
            h[..., ell] = raw if beta[ell] == 1.0 else beta[ell] * raw + (1.0 - beta[ell]) * current.h[..., ell]
            if counter is not None:
                counter[names[ell]] += n_blocks
    if beta[L + 1] > 0:
        raw = update_sigma2(beliefs, y, current, constellation)
        b = beta[L + 1]
        combined = raw if b == 1.0 else b * raw + (1.0 - b) * current.sigma2
        sigma2 = np.maximum(combined, sigma2_floor(y))
        if counter is not None:
            counter["sigma2"] += n_blocks
    return ChannelParams(h, sigma2)
