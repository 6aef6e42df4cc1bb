"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .em import Schedule, make_schedule
from .model import ChannelParams, Constellation, get_constellation


def check_observations(Y, L: int | None = None) -> np.ndarray:
    """Return ``Y`` as a finite complex ``(blocks, N+L)`` array."""
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2:
        raise ValueError(f"observations must be 1-D or 2-D, got shape {Y.shape}")
    if not np.issubdtype(Y.dtype, np.number):
        raise TypeError("observations must be numeric")
    Y = Y.astype(complex)
    if not np.all(np.isfinite(Y)):
        raise ValueError("observations contain NaN or inf")
    if L is not None and Y.shape[1] <= L:
        raise ValueError(f"block of length {Y.shape[1]} leaves no symbols for L={L}")
    return Y


def check_constellation(constellation) -> Constellation:
    return get_constellation(constellation)


def check_memory(L) -> int:
    if isinstance(L, bool) or not isinstance(L, (int, np.integer)) or L < 0:
        raise ValueError(f"channel memory must be a non-negative integer, got {L!r}")
    return int(L)


def check_schedule(schedule, L: int, T: int | None = None) -> Schedule:
    """Accept a :class:`Schedule`, a schedule file path or ``serial``/``parallel``."""
    if isinstance(schedule, Schedule):
        sched = schedule
    elif schedule in ("serial", "parallel"):
        sched = make_schedule(schedule, T if T is not None else 3 * (L + 2), L)
    else:
        sched = Schedule.load(schedule)
    if sched.L != L:
        raise ValueError(f"schedule is for L={sched.L}, estimator has L={L}")
    return sched


def check_channel(channel, n_blocks: int) -> ChannelParams:
    """Broadcast known channel parameters to ``n_blocks`` blocks."""
    if not isinstance(channel, ChannelParams):
        raise TypeError("channel must be ChannelParams")
    h = np.broadcast_to(channel.h, (n_blocks, channel.L + 1))
    return ChannelParams(h.copy(), np.broadcast_to(channel.sigma2, (n_blocks,)).copy())
