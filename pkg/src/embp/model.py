"""Channel model: constellations, block-fading ISI channels and matched-filter statistics.

All array-valued quantities may carry arbitrary leading batch dimensions, so a
stack of ``B`` blocks is processed with the same calls as a single block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Constellation:
    """Finite symbol alphabet with ``M`` complex points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex).reshape(-1)
        if pts.size < 2:
            raise ValueError("a constellation needs at least two points")
        object.__setattr__(self, "points", pts)

    @property
    def M(self) -> int:
        return self.points.size

    @property
    def label_bits(self) -> float:
        return float(np.log2(self.M))

    @property
    def energy(self) -> float:
        """Mean symbol energy E|c|^2 under a uniform prior."""
        return float(np.mean(np.abs(self.points) ** 2))

    @property
    def is_real(self) -> bool:
        return bool(np.all(self.points.imag == 0))

    def negation_index(self) -> np.ndarray:
        """Index permutation mapping point ``i`` to the point ``-c_i``."""
        dist = np.abs(-self.points[:, None] - self.points[None, :])
        idx = dist.argmin(axis=1)
        if not np.allclose(dist[np.arange(self.M), idx], 0.0):
            raise ValueError("constellation is not symmetric under negation")
        return idx

    def sample_indices(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.integers(0, self.M, size=size)

    def __eq__(self, other):
        return isinstance(other, Constellation) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


def bpsk() -> Constellation:
    return Constellation(np.array([1.0, -1.0]))


def qpsk() -> Constellation:
    return Constellation(np.exp(1j * np.pi / 4 * np.array([1, 3, 5, 7])))


CONSTELLATIONS = {"bpsk": bpsk, "qpsk": qpsk}


def get_constellation(name) -> Constellation:
    if isinstance(name, Constellation):
        return name
    try:
        return CONSTELLATIONS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown constellation {name!r}") from None


@dataclass(frozen=True)
class ChannelParams:
    """Parameter vector ``(h_0, ..., h_L, sigma2)`` of one block (or a batch).

    ``h`` has shape ``(..., L+1)`` and ``sigma2`` shape ``(...)``.
    """

    h: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.ndim == 0:
            h = h.reshape(1)
        sigma2 = np.asarray(self.sigma2, dtype=float)
        if h.shape[:-1] != sigma2.shape:
            sigma2 = np.broadcast_to(sigma2, h.shape[:-1]).copy()
        if np.any(~(sigma2 > 0)):
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def L(self) -> int:
        return self.h.shape[-1] - 1

    @property
    def batch_shape(self) -> tuple:
        return self.h.shape[:-1]

    def as_vector(self) -> np.ndarray:
        """Stack into ``(..., L+2)`` complex array ordered (h_0..h_L, sigma2)."""
        return np.concatenate([self.h, self.sigma2[..., None].astype(complex)], axis=-1)

    @classmethod
    def from_vector(cls, theta) -> "ChannelParams":
        theta = np.asarray(theta)
        return cls(theta[..., :-1], theta[..., -1].real)

    def __getitem__(self, idx) -> "ChannelParams":
        return ChannelParams(self.h[idx], self.sigma2[idx])


@dataclass(frozen=True)
class TransmissionBlock:
    """Transmitted symbol indices, the observation ``y`` and the true parameters."""

    symbol_indices: np.ndarray
    symbols: np.ndarray
    observation: np.ndarray
    truth: ChannelParams

    def __post_init__(self):
        if self.observation.shape[-1] != self.symbols.shape[-1] + self.truth.L:
            raise ValueError("observation length must equal N + L")


@dataclass(frozen=True)
class MatchedStats:
    """Matched-filter output ``x = H^H y`` and Gram matrix ``G = H^H H``.

    ``G`` is Toeplitz for the zero-padded block model and is stored through its
    first row ``r[..., d] = G[n, n+d]`` for ``d = 0..L``.
    """

    x: np.ndarray
    r: np.ndarray
    sigma2: np.ndarray

    @property
    def N(self) -> int:
        return self.x.shape[-1]

    @property
    def L(self) -> int:
        return self.r.shape[-1] - 1

    def band(self, d: int) -> np.ndarray:
        """``G[n, n+d]`` for a signed offset ``d``."""
        if abs(d) > self.L:
            return np.zeros(self.r.shape[:-1], dtype=complex)
        return self.r[..., d] if d >= 0 else np.conj(self.r[..., -d])

    def dense(self) -> np.ndarray:
        N = self.N
        G = np.zeros(self.r.shape[:-1] + (N, N), dtype=complex)
        for d in range(-min(self.L, N - 1), min(self.L, N - 1) + 1):
            rows = np.arange(max(0, -d), min(N, N - d))
            G[..., rows, rows + d] = self.band(d)[..., None]
        return G


def sample_channel(L: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw i.i.d. CN(0, 1) taps and normalize each response to unit energy."""
    if L < 0:
        raise ValueError("channel memory L must be non-negative")
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (L + 1,)
    h = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def snr_to_sigma2(snr_db, h, constellation: Constellation, N: int):
    """Noise variance giving ``snr = ||h||^2 N E|c|^2 / ((N+L) sigma2)``."""
    if N <= 0:
        raise ValueError("block length N must be positive")
    h = np.asarray(h)
    L = h.shape[-1] - 1
    energy_h = np.sum(np.abs(h) ** 2, axis=-1)
    return energy_h * N * constellation.energy / ((N + L) * 10.0 ** (np.asarray(snr_db) / 10.0))


def snr_of(h, sigma2, constellation: Constellation, N: int):
    """Inverse of :func:`snr_to_sigma2`, in dB."""
    h = np.asarray(h)
    L = h.shape[-1] - 1
    energy_h = np.sum(np.abs(h) ** 2, axis=-1)
    return 10.0 * np.log10(energy_h * N * constellation.energy / ((N + L) * np.asarray(sigma2)))


def convolve(h, symbols) -> np.ndarray:
    """Noiseless output ``H c`` of length ``N + L`` (zero symbols outside the block)."""
    h = np.asarray(h)
    symbols = np.asarray(symbols)
    L = h.shape[-1] - 1
    N = symbols.shape[-1]
    shape = np.broadcast_shapes(h.shape[:-1], symbols.shape[:-1]) + (N + L,)
    out = np.zeros(shape, dtype=complex)
    for k in range(L + 1):
        out[..., k : k + N] += h[..., k : k + 1] * symbols
    return out


def complex_noise(rng: np.random.Generator, sigma2, shape) -> np.ndarray:
    scale = np.sqrt(np.asarray(sigma2, dtype=float) / 2.0)[..., None]
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def transmit(params: ChannelParams, symbols, rng: np.random.Generator) -> np.ndarray:
    """Observation ``y = H c + w`` with ``w ~ CN(0, sigma2)``."""
    symbols = np.asarray(symbols)
    if symbols.shape[-1] == 0:
        raise ValueError("cannot transmit an empty block")
    clean = convolve(params.h, symbols)
    return clean + complex_noise(rng, params.sigma2, clean.shape)


def build_matched_stats(params: ChannelParams, observation) -> MatchedStats:
    """Compute ``x = H^H y`` and the first row of ``G = H^H H``."""
    y = np.asarray(observation)
    h = params.h
    L = params.L
    N = y.shape[-1] - L
    if N <= 0:
        raise ValueError("observation shorter than the channel memory")
    hc = np.conj(h)
    x = np.zeros(np.broadcast_shapes(h.shape[:-1], y.shape[:-1]) + (N,), dtype=complex)
    for j in range(L + 1):
        x += hc[..., j : j + 1] * y[..., j : j + N]
    r = np.zeros(h.shape, dtype=complex)
    for d in range(L + 1):
        r[..., d] = np.sum(hc[..., d:] * h[..., : L + 1 - d], axis=-1)
    r[..., 0] = r[..., 0].real
    return MatchedStats(x=x, r=r, sigma2=params.sigma2)


def generate_block(
    rng: np.random.Generator,
    N: int,
    L: int,
    snr_db: float,
    constellation: Constellation,
) -> TransmissionBlock:
    """Sample channel, symbols and noise for one block, in that order."""
    h = sample_channel(L, rng)
    sigma2 = snr_to_sigma2(snr_db, h, constellation, N)
    idx = constellation.sample_indices(rng, N)
    symbols = constellation.points[idx]
    truth = ChannelParams(h, sigma2)
    y = transmit(truth, symbols, rng)
    return TransmissionBlock(idx, symbols, y, truth)


def stack_blocks(blocks) -> TransmissionBlock:
    blocks = list(blocks)
    return TransmissionBlock(
        np.stack([b.symbol_indices for b in blocks]),
        np.stack([b.symbols for b in blocks]),
        np.stack([b.observation for b in blocks]),
        ChannelParams(np.stack([b.truth.h for b in blocks]), np.stack([b.truth.sigma2 for b in blocks])),
    )
