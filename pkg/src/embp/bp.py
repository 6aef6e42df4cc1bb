"""Log-domain belief propagation on the Ungerboeck factor graph with message momentum.

Messages are indexed by sender: ``log_mu[..., n, j, :]`` is the message from
symbol ``n`` to symbol ``n + offsets[j]`` as a log-distribution over the
receiver's alphabet. Offsets are ordered ``-L..-1, 1..L`` so that reversing the
offset axis maps each edge to its opposite direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Constellation, MatchedStats

LOG_FLOOR = -700.0


def offsets(L: int) -> np.ndarray:
    return np.concatenate([np.arange(-L, 0), np.arange(1, L + 1)])


def edge_mask(N: int, L: int) -> np.ndarray:
    """``mask[n, j]`` is True when ``n + offsets[j]`` lies inside the block."""
    m = np.arange(N)[:, None] + offsets(L)[None, :]
    return (m >= 0) & (m < N)


def _small_axis_lse(a: np.ndarray, axis: int) -> np.ndarray:
    # slice-wise max/sum: numpy reductions over short axes are slow
    a = np.moveaxis(a, axis, 0)
    m = np.array(a[0], dtype=float)
    for ai in a[1:]:
        np.maximum(m, ai, out=m)
    # all -inf slices (clamped priors) stay -inf instead of nan
    m[~np.isfinite(m)] = 0.0
    s = np.exp(a[0] - m)
    for ai in a[1:]:
        s += np.exp(ai - m)
    with np.errstate(divide="ignore"):
        return m + np.log(s)


def logsumexp(a: np.ndarray, axis=-1) -> np.ndarray:
    if a.shape[axis] <= 16:
        return _small_axis_lse(a, axis)
    amax = np.max(a, axis=axis, keepdims=True)
    amax[~np.isfinite(amax)] = 0.0
    with np.errstate(divide="ignore"):
        out = amax + np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_normalize(a: np.ndarray, axis=-1) -> np.ndarray:
    """Subtract the max-shifted logsumexp along ``axis``."""
    return a - np.expand_dims(logsumexp(a, axis=axis), axis)


@dataclass(frozen=True)
class FactorTables:
    """Log-factors of the detector graph.

    ``logF`` has shape ``(..., N, M)``. Because ``G`` is Toeplitz the pairwise
    factors depend only on the offset: ``logI[..., j, a, b]`` is
    ``log I_{n,n+d_j}(c_n = a, c_{n+d_j} = b)``.
    """

    logF: np.ndarray
    logI: np.ndarray

    @property
    def N(self) -> int:
        return self.logF.shape[-2]

    @property
    def M(self) -> int:
        return self.logF.shape[-1]

    @property
    def L(self) -> int:
        return self.logI.shape[-3] // 2


def compute_factors(stats: MatchedStats, constellation: Constellation) -> FactorTables:
    sigma2 = np.asarray(stats.sigma2, dtype=float)
    if np.any(~(sigma2 > 0)):
        raise ValueError("sigma2 must be positive")
    c = constellation.points
    inv = (1.0 / sigma2)[..., None, None]
    logF = inv * (
        2.0 * np.real(stats.x[..., :, None] * np.conj(c)) - stats.r[..., 0, None, None].real * np.abs(c) ** 2
    )
    cross = c[None, :] * np.conj(c)[:, None]  # [a, b] = c_b conj(c_a)
    G = np.stack([stats.band(int(d)) for d in offsets(stats.L)], axis=-1) if stats.L > 0 else (
        np.zeros(stats.r.shape[:-1] + (0,), dtype=complex)
    )
    logI = -2.0 * inv[..., None] * np.real(G[..., :, None, None] * cross)
    return FactorTables(logF=logF, logI=logI)


def uniform_messages(batch_shape, N: int, L: int, M: int) -> np.ndarray:
    return np.full(tuple(batch_shape) + (N, 2 * L, M), -np.log(M))


def _incoming(log_mu: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``inc[..., n, j]`` is the message sent to ``n`` by ``n - offsets[j]``; zero where absent."""
    N, D = mask.shape
    L = D // 2
    inc = np.zeros_like(log_mu)
    for j, d in enumerate(offsets(L)):
        if abs(d) >= N:
            continue
        if d > 0:
            inc[..., d:, j, :] = log_mu[..., : N - d, j, :]
        else:
            inc[..., : N + d, j, :] = log_mu[..., -d:, j, :]
    return inc


def _sum_offsets(incoming: np.ndarray) -> np.ndarray:
    total = np.zeros(incoming.shape[:-2] + incoming.shape[-1:])
    for j in range(incoming.shape[-2]):
        total += incoming[..., j, :]
    return total


def _beliefs(incoming: np.ndarray, factors: FactorTables) -> np.ndarray:
    return log_normalize(factors.logF + _sum_offsets(incoming))


def beliefs_from_messages(log_mu: np.ndarray, factors: FactorTables) -> np.ndarray:
    mask = edge_mask(factors.N, factors.L)
    return _beliefs(_incoming(log_mu, mask), factors)


def combine_messages(new: np.ndarray, old: np.ndarray, beta: float) -> np.ndarray:
    """Convex combination ``beta*new + (1-beta)*old`` of normalized linear-domain messages."""
    if beta == 1.0:
        return new
    if beta == 0.0:
        return old
    return log_normalize(np.logaddexp(np.log(beta) + new, np.log1p(-beta) + old))


def bp_iteration(log_mu: np.ndarray, factors: FactorTables, beta_bp: float = 1.0):
    """One flooding BP iteration followed by message momentum.

    Returns the new messages and the log-beliefs computed from them.
    """
    if not 0.0 <= beta_bp <= 1.0:
        raise ValueError("beta_bp must lie in [0, 1]")
    N, L, M = factors.N, factors.L, factors.M
    mask = edge_mask(N, L)
    inc = _incoming(log_mu, mask)
    total = factors.logF + _sum_offsets(inc)
    # reverse offset axis: inc[n, D-1-j] is the message from n+d_j back to n
    extrinsic = total[..., :, None, :] - inc[..., ::-1, :]
    new = logsumexp(factors.logI[..., None, :, :, :] + extrinsic[..., :, :, :, None], axis=-2)
    new = np.maximum(log_normalize(new), LOG_FLOOR)
    new = np.where(mask[:, :, None], new, -np.log(M))
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite BP message")
    out = np.maximum(combine_messages(new, log_mu, float(beta_bp)), LOG_FLOOR)
    return out, _beliefs(_incoming(out, mask), factors)


def run_bp(stats: MatchedStats, constellation: Constellation, T: int, beta_bp=None, return_history=False):
    """Coherent BP detector: ``T`` flooding iterations from uniform messages.

    Returns log-beliefs of shape ``(..., N, M)`` (and the per-iteration beliefs
    if ``return_history``).
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    beta_bp = np.ones(T) if beta_bp is None else np.asarray(beta_bp, dtype=float)
    if beta_bp.shape != (T,):
        raise ValueError("beta_bp must have length T")
    factors = compute_factors(stats, constellation)
    log_mu = uniform_messages(factors.logF.shape[:-2], factors.N, factors.L, factors.M)
    history = []
    for t in range(T):
        log_mu, log_b = bp_iteration(log_mu, factors, beta_bp[t])
        history.append(log_b)
    return (log_b, history) if return_history else log_b


def detect(log_beliefs: np.ndarray) -> np.ndarray:
    """Per-symbol argmax; ties resolve to the lowest constellation index."""
    return np.argmax(log_beliefs, axis=-1)
