"""Exact references and pilot-aided baselines.

Brute-force enumeration (small blocks only), a forward-backward trellis MAP
detector, the exact ELBO, pilot least-squares estimation and one exact EM
iteration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bp import log_normalize, logsumexp
from .em import sigma2_floor, symbol_moments, update_sigma2, update_tap
from .model import ChannelParams, Constellation, convolve

MAX_ENUMERATION = 2**20
MAX_TRELLIS_STATES = 4096


def _enumerate(N: int, constellation: Constellation):
    if constellation.M**N > MAX_ENUMERATION:
        raise ValueError(f"M^N = {constellation.M}^{N} exceeds the enumeration guard")
    idx = np.array(list(itertools.product(range(constellation.M), repeat=N)), dtype=int).reshape(-1, N)
    return idx, constellation.points[idx]


def _log_joint(observation, params: ChannelParams, constellation: Constellation):
    """``log p(c, y | theta)`` for every sequence, with the uniform prior."""
    y = np.asarray(observation)
    L = params.L
    N = y.shape[-1] - L
    idx, seqs = _enumerate(N, constellation)
    resid = y[..., None, :] - convolve(params.h[..., None, :], seqs)
    sigma2 = np.asarray(params.sigma2)[..., None]
    log_p = (
        -np.sum(np.abs(resid) ** 2, axis=-1) / sigma2
        - (N + L) * np.log(np.pi * sigma2)
        - N * np.log(constellation.M)
    )
    return idx, log_p


def brute_force_posterior(observation, params: ChannelParams, constellation: Constellation):
    """Exact posterior by enumeration.

    Returns ``(marginals, joint, sequences)`` where ``marginals`` has shape
    ``(..., N, M)``, ``joint`` the posterior over all ``M^N`` sequences and
    ``sequences`` their index table.
    """
    idx, log_p = _log_joint(observation, params, constellation)
    joint = np.exp(log_normalize(log_p))
    onehot = np.eye(constellation.M)[idx]  # (S, N, M)
    marginals = np.einsum("...s,snm->...nm", joint, onehot)
    return marginals, joint, idx


def log_likelihood(observation, params: ChannelParams, constellation: Constellation):
    """Exact ``log p(y | theta)`` including all Gaussian normalization constants."""
    _, log_p = _log_joint(observation, params, constellation)
    return logsumexp(log_p, axis=-1)


def elbo(beliefs, observation, params: ChannelParams, constellation: Constellation):
    """``sum_c Q(c) log(p(c, y | theta) / Q(c))`` for the product distribution ``Q``."""
    q = np.asarray(beliefs, dtype=float)
    if np.any(q <= 0):
        raise ValueError("Q entries must be positive")
    idx, log_p = _log_joint(observation, params, constellation)
    N = idx.shape[1]
    log_q = np.sum(np.log(q)[..., np.arange(N), idx], axis=-1)
    return np.sum(np.exp(log_q) * (log_p - log_q), axis=-1)


def _branch_tables(L: int, M: int):
    """Symbol index tables for state ``s`` (newest digit first) and input ``a``.

    ``win[s, a, k]`` is the index of ``c_{n-k}`` in the window ending at the input.
    """
    S = M**L
    digits = np.array(list(itertools.product(range(M), repeat=L)), dtype=int).reshape(S, L)[:, ::-1] if L else (
        np.zeros((1, 0), dtype=int))
    # digits[s, i] is the index of c_{n-1-i}; s = sum_i digits[s, i] * M**i
    win = np.empty((S, M, L + 1), dtype=int)
    win[:, :, 0] = np.arange(M)[None, :]
    win[:, :, 1:] = digits[:, None, :]
    return win


def trellis_map_detect(observation, params: ChannelParams, constellation: Constellation,
                       log_prior=None, return_pairwise: bool = False):
    """Symbol-wise MAP posteriors by forward-backward over the ``M^L``-state trellis.

    ``log_prior`` (shape ``(..., N, M)``) lets known symbols be clamped. With
    ``return_pairwise`` also returns ``corr[..., n, k] = E[c_n conj(c_{n-k})]``
    for ``k = 1..L`` under the exact joint posterior (zero where ``n-k < 0``).
    """
    y = np.asarray(observation)
    c = constellation.points
    M = constellation.M
    L = params.L
    N = y.shape[-1] - L
    S = M**L
    if S > MAX_TRELLIS_STATES:
        raise ValueError(f"trellis with {S} states exceeds the guard")
    h = params.h
    sigma2 = np.asarray(params.sigma2)[..., None, None]
    batch = np.broadcast_shapes(y.shape[:-1], h.shape[:-1])
    if log_prior is None:
        log_prior = np.zeros(batch + (N, M))
    win = _branch_tables(L, M)
    syms = c[win]  # (S, M, L+1)
    R = S // M if L else 1

    def gamma(n):
        valid = np.array([0 <= n - k < N for k in range(L + 1)], dtype=float)
        mean = np.einsum("...k,sak->...sa", h * valid, syms)
        g = -np.abs(y[..., n, None, None] - mean) ** 2 / sigma2
        if n < N:
            g = g + log_prior[..., n, None, :]
        return g

    # forward: alpha[n] is over states before input n
    alphas = []
    alpha = np.full(batch + (S,), -np.log(S))
    for n in range(N + L):
        alphas.append(alpha)
        if L == 0:
            continue
        g = gamma(n).reshape(batch + (M, R, M))  # (oldest, rest, input)
        nxt = logsumexp(alpha.reshape(batch + (M, R, 1)) + g, axis=-3)
        alpha = log_normalize(nxt.reshape(batch + (S,)))
    marg = np.empty(batch + (N, M))
    corr = np.zeros(batch + (N, L), dtype=complex)
    beta = np.zeros(batch + (S,))
    for n in range(N + L - 1, -1, -1):
        g = gamma(n)
        if L == 0:
            xi = log_normalize(g.reshape(batch + (M,)))
            if n < N:
                marg[..., n, :] = np.exp(xi)
            continue
        b_next = beta.reshape(batch + (1, R, M))
        joint = alphas[n].reshape(batch + (M, R, 1)) + g.reshape(batch + (M, R, M)) + b_next
        if n < N:
            xi = np.exp(log_normalize(joint.reshape(batch + (S * M,)))).reshape(batch + (S, M))
            marg[..., n, :] = xi.sum(axis=-2)
            if return_pairwise:
                for k in range(1, L + 1):
                    if n - k >= 0:
                        corr[..., n, k - 1] = np.einsum("...sa,sa->...", xi, syms[:, :, 0] * np.conj(syms[:, :, k]))
        beta = _backward(g, beta, batch, M, R, S)
    return (marg, corr) if return_pairwise else marg


def _backward(g, beta, batch, M, R, S):
    # beta_n[s] = logsumexp_a (gamma[s, a] + beta_{n+1}[s'(s, a)]), s' = (rest, a)
    b_next = beta.reshape(batch + (1, R, M))
    return log_normalize(logsumexp(g.reshape(batch + (M, R, M)) + b_next, axis=-1).reshape(batch + (S,)))


@dataclass(frozen=True)
class PilotConfig:
    """Contiguous pilot preamble occupying ``round(fraction * N)`` leading symbols."""

    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("pilot fraction must lie in (0, 1)")

    def count(self, N: int, L: int) -> int:
        P = int(round(self.fraction * N))
        if P < L + 1:
            raise ValueError(f"{P} pilots cannot identify L + 1 = {L + 1} taps")
        return P

    def pilot_indices(self, N: int, L: int, constellation: Constellation, rng=None) -> np.ndarray:
        rng = np.random.default_rng(self.seed) if rng is None else rng
        return constellation.sample_indices(rng, self.count(N, L))


def pilot_ls_estimate(observation, pilot_symbols, L: int, constellation: Constellation | None = None) -> ChannelParams:
    """Least-squares taps from the outputs driven only by the pilot preamble.

    Outputs ``0..P-1`` see only pilots and the known zero symbols before the
    block. The noise variance is the residual power corrected for ``L + 1``
    fitted taps; with no spare degrees of freedom it falls back to the block's
    power balance.
    """
    y = np.asarray(observation)
    p = np.asarray(pilot_symbols, dtype=complex)
    P = p.shape[-1]
    if P < L + 1:
        raise ValueError("need at least L + 1 pilots")
    C = np.zeros(p.shape[:-1] + (P, L + 1), dtype=complex)
    for k in range(L + 1):
        C[..., k:, k] = p[..., : P - k]
    if np.any(np.linalg.matrix_rank(C) < L + 1):
        raise np.linalg.LinAlgError("rank-deficient pilot matrix")
    yp = y[..., :P]
    h = np.linalg.lstsq(C, yp, rcond=None)[0] if C.ndim == 2 else np.stack(
        [np.linalg.lstsq(Ci, yi, rcond=None)[0] for Ci, yi in zip(C.reshape(-1, P, L + 1), yp.reshape(-1, P))]
    ).reshape(p.shape[:-1] + (L + 1,))
    resid = yp - np.einsum("...pk,...k->...p", C, h)
    dof = P - (L + 1)
    if dof > 0:
        sigma2 = np.sum(np.abs(resid) ** 2, axis=-1) / dof
    else:
        energy = 1.0 if constellation is None else constellation.energy
        N = y.shape[-1] - L
        sigma2 = (np.sum(np.abs(y) ** 2, axis=-1) - N * energy * np.sum(np.abs(h) ** 2, axis=-1)) / (N + L)
    return ChannelParams(h, np.maximum(sigma2, sigma2_floor(y)))


def pilot_log_prior(pilot_indices, N: int, M: int, batch_shape=()) -> np.ndarray:
    """Log-prior clamping the first ``P`` symbols to the known pilots."""
    pilot_indices = np.asarray(pilot_indices)
    P = pilot_indices.shape[-1]
    prior = np.zeros(tuple(batch_shape) + (N, M))
    clamp = np.full(pilot_indices.shape + (M,), -np.inf)
    np.put_along_axis(clamp, pilot_indices[..., None], 0.0, axis=-1)
    prior[..., :P, :] = clamp
    return prior


def exact_em_step(observation, params: ChannelParams, constellation: Constellation, factorized: bool = False):
    """One EM iteration with the exact posterior as E-step.

    The default M-step maximizes the ELBO jointly over taps and noise variance
    using the exact pairwise posterior moments, which guarantees a
    non-decreasing likelihood. ``factorized=True`` instead feeds the exact
    symbol marginals to the per-parameter closed-form updates (all taps and
    the noise variance updated in parallel from ``params``).
    """
    y = np.asarray(observation)
    L = params.L
    if factorized:
        marg = trellis_map_detect(y, params, constellation)
        h = np.stack([update_tap(l, marg, y, params, constellation) for l in range(L + 1)], axis=-1)
        return ChannelParams(h, update_sigma2(marg, y, params, constellation))
    marg, corr = trellis_map_detect(y, params, constellation, return_pairwise=True)
    mean, power = symbol_moments(marg, constellation)
    N = mean.shape[-1]
    # A[d] = sum_n E[conj(c_n) c_{n+d}]
    A = np.zeros(mean.shape[:-1] + (L + 1,), dtype=complex)
    A[..., 0] = np.sum(power, axis=-1)
    for d in range(1, L + 1):
        A[..., d] = np.sum(corr[..., :, d - 1], axis=-1)
    R = np.zeros(mean.shape[:-1] + (L + 1, L + 1), dtype=complex)
    for k in range(L + 1):
        for l in range(L + 1):
            R[..., k, l] = A[..., k - l] if k >= l else np.conj(A[..., l - k])
    p = np.stack([np.sum(np.conj(mean) * y[..., k : k + N], axis=-1) for k in range(L + 1)], axis=-1)
    h = np.linalg.solve(R, p[..., None])[..., 0]
    energy = (
        np.sum(np.abs(y) ** 2, axis=-1)
        - 2.0 * np.real(np.sum(np.conj(h) * p, axis=-1))
        + np.real(np.einsum("...k,...kl,...l->...", np.conj(h), R, h))
    )
    return ChannelParams(h, np.maximum(energy / (N + L), sigma2_floor(y)))
