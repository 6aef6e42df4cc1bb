"""Differentiable (torch) unrolling of EMBP for learning momentum schedules.

Mirrors :func:`embp.algorithm.run_embp` operation by operation, except that
every raw parameter update is computed (so weights sitting at zero still
receive gradients) and message momentum is combined in the linear domain.
"""

from __future__ import annotations

import numpy as np
import torch

from .bp import LOG_FLOOR
from .em import SIGMA2_FLOOR_REL

CTYPE = torch.complex128
RTYPE = torch.float64


def _shift(t: torch.Tensor, d: int, dim: int) -> torch.Tensor:
    """``out[n] = t[n - d]`` along ``dim`` with zero fill."""
    if d == 0:
        return t
    n = t.shape[dim]
    if abs(d) >= n:
        return torch.zeros_like(t)
    zeros = torch.zeros_like(t.narrow(dim, 0, abs(d)))
    if d > 0:
        return torch.cat([zeros, t.narrow(dim, 0, n - d)], dim=dim)
    return torch.cat([t.narrow(dim, -d, n + d), zeros], dim=dim)


class UnrolledEMBP:
    """Batched EMBP forward pass on torch tensors.

    ``y`` is ``(B, N+L)`` complex, ``h0`` ``(B, L+1)`` complex, ``s0`` ``(B,)``.
    """

    def __init__(self, points: np.ndarray, L: int):
        self.c = torch.as_tensor(np.asarray(points, dtype=complex), dtype=CTYPE)
        self.M = self.c.numel()
        self.L = L
        self.offsets = list(range(-L, 0)) + list(range(1, L + 1))

    def matched(self, h, y, N):
        L = self.L
        x = sum(torch.conj(h[:, j : j + 1]) * y[:, j : j + N] for j in range(L + 1))
        r = torch.stack([torch.sum(torch.conj(h[:, d:]) * h[:, : L + 1 - d], dim=-1) for d in range(L + 1)], dim=-1)
        return x, r

    def factors(self, x, r, s2):
        c = self.c
        inv = (1.0 / s2)[:, None, None]
        logF = inv * (2.0 * torch.real(x[:, :, None] * torch.conj(c)) - torch.real(r[:, 0])[:, None, None] * torch.abs(c) ** 2)
        cross = c[None, :] * torch.conj(c)[:, None]
        if self.L == 0:
            return logF, None
        G = torch.stack([r[:, d] if d > 0 else torch.conj(r[:, -d]) for d in self.offsets], dim=-1)
        logI = -2.0 * inv[..., None] * torch.real(G[:, :, None, None] * cross)
        return logF, logI

    def incoming(self, mu):
        # mu: (B, N, D, M); message at [n, j] travels to n + offsets[j]
        return torch.stack([_shift(mu[:, :, j, :], d, 1) for j, d in enumerate(self.offsets)], dim=2)

    def bp_iteration(self, mu, logF, logI, mask, beta):
        if self.L == 0:
            return mu, torch.log_softmax(logF, dim=-1)
        inc = self.incoming(mu)
        total = logF + inc.sum(dim=2)
        extrinsic = total[:, :, None, :] - torch.flip(inc, dims=[2])
        new = torch.logsumexp(logI[:, None] + extrinsic[..., None], dim=-2)
        new = torch.clamp(torch.log_softmax(new, dim=-1), min=LOG_FLOOR)
        new = torch.where(mask[None, :, :, None], new, torch.full_like(new, -np.log(self.M)))
        mixed = beta * torch.exp(new) + (1.0 - beta) * torch.exp(mu)
        out = torch.clamp(torch.log_softmax(torch.log(mixed), dim=-1), min=LOG_FLOOR)
        inc = self.incoming(out)
        return out, torch.log_softmax(logF + inc.sum(dim=2), dim=-1)

    def em_updates(self, b, y, h, s2, x, r, N):
        """Raw updates of all taps and the noise variance from ``(h, s2)``."""
        L = self.L
        c = self.c
        mean = b.to(CTYPE) @ c
        power = b @ (torch.abs(c) ** 2)
        S = {}
        for d in range(-L, L + 1):
            if abs(d) >= N:
                S[d] = torch.zeros_like(mean[:, 0])
            elif d >= 0:
                S[d] = torch.sum(torch.conj(mean[:, : N - d]) * mean[:, d:], dim=-1)
            else:
                S[d] = torch.sum(torch.conj(mean[:, -d:]) * mean[:, : N + d], dim=-1)
        den = power.sum(dim=-1)
        taps = []
        for ell in range(L + 1):
            num = torch.sum(y[:, ell : ell + N] * torch.conj(mean), dim=-1)
            for k in range(L + 1):
                if k != ell:
                    num = num - h[:, k] * S[ell - k]
            taps.append(num / den)
        fit = torch.sum(2.0 * torch.real(x * torch.conj(mean)) - torch.real(r[:, :1]) * power, dim=-1)
        for d in range(1, min(L, N - 1) + 1):
            fit = fit - 2.0 * torch.real(torch.conj(r[:, d]) * torch.sum(mean[:, : N - d] * torch.conj(mean[:, d:]), dim=-1))
        floor = SIGMA2_FLOOR_REL * torch.mean(torch.abs(y) ** 2, dim=-1)
        sig = torch.maximum((torch.sum(torch.abs(y) ** 2, dim=-1) - fit) / (N + L), floor)
        return torch.stack(taps, dim=-1), sig, floor

    def __call__(self, y, h0, s0, beta_em, beta_bp, keep_history=False):
        L, M = self.L, self.M
        B, NL = y.shape
        N = NL - L
        T = beta_em.shape[0]
        n_idx = torch.arange(N)[:, None] + torch.tensor(self.offsets, dtype=torch.long)[None, :]
        mask = (n_idx >= 0) & (n_idx < N)
        mu = torch.full((B, N, 2 * L, M), -float(np.log(M)), dtype=RTYPE)
        h, s2 = h0, s0
        history = [h]
        log_b = None
        for t in range(T):
            x, r = self.matched(h, y, N)
            logF, logI = self.factors(x, r, s2)
            mu, log_b = self.bp_iteration(mu, logF, logI, mask, beta_bp[t])
            raw_h, raw_s, floor = self.em_updates(torch.exp(log_b), y, h, s2, x, r, N)
            w = beta_em[t]
            h = w[: L + 1].to(CTYPE) * raw_h + (1.0 - w[: L + 1]).to(CTYPE) * h
            s2 = torch.maximum(w[L + 1] * raw_s + (1.0 - w[L + 1]) * s2, floor)
            if keep_history:
                history.append(h)
        return h, s2, log_b, history
