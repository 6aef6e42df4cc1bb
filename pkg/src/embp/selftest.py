"""Small-instance oracle battery run by ``embp selftest``.

Each check compares a production routine against an independent reference
(enumeration, literal loops, analytic formulas, finite differences) and
returns ``(passed, detail)``.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .algorithm import InitStrategy, run_embp
from .baselines import brute_force_posterior, elbo, exact_em_step, log_likelihood, trellis_map_detect
from .bp import bp_iteration, compute_factors, detect, run_bp, uniform_messages
from .em import (
    Schedule,
    dumps_schedule,
    em_step,
    loads_schedule,
    make_schedule,
    update_sigma2,
    update_tap,
)
from .model import (
    ChannelParams,
    build_matched_stats,
    bpsk,
    complex_noise,
    convolve,
    generate_block,
    qpsk,
    sample_channel,
    snr_to_sigma2,
)


def random_instance(rng, N: int, L: int, constellation, snr_db: float = 5.0):
    """Random block plus random (strictly positive) product beliefs."""
    blk = generate_block(rng, N, L, snr_db, constellation)
    q = rng.random((N, constellation.M)) + 0.05
    return blk, q / q.sum(axis=-1, keepdims=True)


def gram(h: np.ndarray, N: int) -> np.ndarray:
    L = h.shape[-1] - 1
    H = np.zeros((N + L, N), dtype=complex)
    for n in range(N):
        H[n : n + L + 1, n] = h
    return H.conj().T @ H


def literal_sigma2(beliefs, y, h, points) -> float:
    """Term-by-term noise-variance update with explicit sums over symbols and pairs."""
    N, M = beliefs.shape
    L = h.shape[-1] - 1
    G = gram(h, N)
    x = np.array([sum(np.conj(h[j]) * y[n + j] for j in range(L + 1)) for n in range(N)])
    total = 0.0
    for n in range(N):
        for a in range(M):
            cn = points[a]
            inner = 2 * np.real(x[n] * np.conj(cn)) - np.real(G[n, n]) * abs(cn) ** 2
            for m in range(n):
                for b in range(M):
                    inner -= beliefs[m, b] * 2 * np.real(G[m, n] * points[b] * np.conj(cn))
            total += beliefs[n, a] * inner
    return float((np.sum(np.abs(y) ** 2) - total) / (N + L))


def literal_tap(ell: int, beliefs, y, h, points) -> complex:
    """Term-by-term tap update with the sign-dependent cross term."""
    N, M = beliefs.shape
    L = h.shape[-1] - 1
    num = 0.0 + 0.0j
    den = 0.0
    for n in range(N):
        for a in range(M):
            num += beliefs[n, a] * y[n + ell] * np.conj(points[a])
            den += beliefs[n, a] * abs(points[a]) ** 2
        for k in range(L + 1):
            m = n - abs(ell - k)
            if k == ell or m < 0:
                continue
            for a in range(M):
                for b in range(M):
                    prod = points[b] * np.conj(points[a])
                    term = np.real(prod) - 1j * np.imag(prod) * np.sign(ell - k)
                    num -= beliefs[n, a] * beliefs[m, b] * h[k] * term
    return num / den


def expected_residual(beliefs, y, h, constellation) -> float:
    """``E_Q ||y - H c||^2 / (N + L)`` by enumerating every sequence."""
    N = beliefs.shape[0]
    L = h.shape[-1] - 1
    marg, _, idx = brute_force_posterior(y, ChannelParams(h, 1.0), constellation)
    q = np.prod(beliefs[np.arange(N), idx], axis=-1)
    resid = np.sum(np.abs(y - convolve(h, constellation.points[idx])) ** 2, axis=-1)
    return float(np.sum(q * resid) / (N + L))


# ---------------------------------------------------------------- checks


def check_trellis_vs_enumeration(instances: int = 20, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        c = (bpsk(), qpsk())[i % 2]
        N, L = int(rng.integers(1, 7)), int(rng.integers(0, 3))
        blk = generate_block(rng, N, L, float(rng.uniform(-3, 10)), c)
        exact = brute_force_posterior(blk.observation, blk.truth, c)[0]
        worst = max(worst, float(np.max(np.abs(trellis_map_detect(blk.observation, blk.truth, c) - exact))))
    return worst < 1e-9, f"max |trellis - enumeration| = {worst:.2e}"


def check_bp_tree(instances: int = 20, seed: int = 2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        c = (bpsk(), qpsk())[i % 2]
        blk = generate_block(rng, 2, 1, float(rng.uniform(-3, 10)), c)
        exact = brute_force_posterior(blk.observation, blk.truth, c)[0]
        b = np.exp(run_bp(build_matched_stats(blk.truth, blk.observation), c, 3))
        worst = max(worst, float(np.max(np.abs(b - exact))))
    return worst < 1e-6, f"max |BP - exact| on N=2, L=1 = {worst:.2e}"


def check_literal_updates(instances: int = 10, seed: int = 3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        c = (bpsk(), qpsk())[i % 2]
        N, L = int(rng.integers(2, 6)), int(rng.integers(1, 3))
        blk, q = random_instance(rng, N, L, c)
        y, p = blk.observation, blk.truth
        for ell in range(L + 1):
            worst = max(worst, abs(update_tap(ell, q, y, p, c) - literal_tap(ell, q, y, p.h, c.points)))
        worst = max(worst, abs(update_sigma2(q, y, p, c) - expected_residual(q, y, p.h, c)))
        if c.is_real:
            worst = max(worst, abs(update_sigma2(q, y, p, c) - literal_sigma2(q, y, p.h, c.points)))
    return worst < 1e-9, f"max deviation from literal updates = {worst:.2e}"


def check_elbo_stationary(instances: int = 5, seed: int = 4, eps: float = 1e-5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        c = (bpsk(), qpsk())[i % 2]
        blk, q = random_instance(rng, 4, 1, c)
        y, p = blk.observation, blk.truth
        for ell in range(2):
            h = p.h.copy()
            h[ell] = update_tap(ell, q, y, p, c)
            for direction in (1.0, 1.0j):
                hp, hm = h.copy(), h.copy()
                hp[ell] += eps * direction
                hm[ell] -= eps * direction
                g = (elbo(q, y, ChannelParams(hp, p.sigma2), c) - elbo(q, y, ChannelParams(hm, p.sigma2), c)) / (2 * eps)
                worst = max(worst, abs(g) / max(1.0, abs(h[ell])))
        s = float(update_sigma2(q, y, p, c))
        g = (elbo(q, y, ChannelParams(p.h, s * (1 + eps)), c) - elbo(q, y, ChannelParams(p.h, s * (1 - eps)), c)) / (2 * eps)
        worst = max(worst, abs(g))
    return worst < 1e-5, f"max scaled |dELBO/dtheta| at raw updates = {worst:.2e}"


def check_exact_em_monotone(instances: int = 5, iterations: int = 10, seed: int = 5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    c = bpsk()
    for _ in range(instances):
        blk = generate_block(rng, 8, 2, 5.0, c)
        p = ChannelParams(sample_channel(2, rng), 0.5)
        ll = float(log_likelihood(blk.observation, p, c))
        for _ in range(iterations):
            p = exact_em_step(blk.observation, p, c)
            nxt = float(log_likelihood(blk.observation, p, c))
            worst = max(worst, ll - nxt)
            ll = nxt
    return worst <= 1e-9, f"largest log-likelihood decrease = {worst:.2e}"


def check_momentum_degeneracy(seed: int = 6):
    rng = np.random.default_rng(seed)
    c = qpsk()
    blk = generate_block(rng, 12, 2, 6.0, c)
    factors = compute_factors(build_matched_stats(blk.truth, blk.observation), c)
    mu0 = uniform_messages((), 12, 2, c.M)
    mu1, _ = bp_iteration(mu0, factors, 1.0)
    mu2, _ = bp_iteration(mu1, factors, 1.0)
    frozen, _ = bp_iteration(mu1, factors, 0.0)
    ok = np.array_equal(frozen, mu1) and not np.array_equal(mu2, mu1)
    sched = make_schedule("custom", 4, 2, beta_em=np.zeros((4, 4)))
    res = run_embp(blk.observation, c, 2, sched, blk.truth)
    ok &= all(np.array_equal(p.h, blk.truth.h) and np.array_equal(p.sigma2, blk.truth.sigma2) for p in res.trajectory)
    coherent = run_bp(build_matched_stats(blk.truth, blk.observation), c, 4)
    ok &= np.array_equal(res.final_beliefs, coherent)
    q = np.exp(coherent)
    full = em_step(1, make_schedule("parallel", 1, 2), q, blk.observation, blk.truth, c)
    raw = [update_tap(l, q, blk.observation, blk.truth, c) for l in range(3)]
    ok &= np.array_equal(full.h, np.array(raw)) and full.sigma2 == update_sigma2(q, blk.observation, blk.truth, c)
    return bool(ok), "beta=0 freezes state, beta=1 equals the momentum-free update"


def check_awgn_ber(snr_db: float = 4.0, bits: int = 1_000_000, seed: int = 7):
    rng = np.random.default_rng(seed)
    c = bpsk()
    N = 100
    blocks = bits // N
    idx = c.sample_indices(rng, (blocks, N))
    h = np.ones((blocks, 1), dtype=complex)
    sigma2 = snr_to_sigma2(snr_db, h, c, N)
    y = convolve(h, c.points[idx]) + complex_noise(rng, sigma2, (blocks, N))
    ber = float(np.mean(detect(np.log(trellis_map_detect(y, ChannelParams(h, sigma2), c))) != idx))
    snr = 10 ** (snr_db / 10)
    p = 0.5 * math.erfc(math.sqrt(snr))
    sd = math.sqrt(p * (1 - p) / bits)
    return abs(ber - p) <= 3 * sd, f"BER {ber:.5f} vs Q(sqrt(2 snr)) = {p:.5f} (3 sigma = {3 * sd:.5f})"


def check_schedule_roundtrip(seed: int = 8):
    rng = np.random.default_rng(seed)
    s = Schedule(rng.random((5, 4)), rng.random(5))
    return loads_schedule(dumps_schedule(s)) == s, "schedule text round trip is exact"


def check_update_counter():
    c = bpsk()
    rng = np.random.default_rng(9)
    blk = generate_block(rng, 20, 2, 8.0, c)
    sched = make_schedule("serial", 8, 2)
    counter = Counter()
    run_embp(blk.observation, c, 2, sched, InitStrategy(), counter=counter)
    return sum(counter.values()) == sched.n_updates == 8, f"{sum(counter.values())} raw updates for 8 nonzero weights"


def check_sweep_determinism():
    from .harness import load_config, run_ber_sweep, sweep_csv, with_overrides

    cfg = load_config(None, {"N": "20", "L": "1", "blocks": "30", "chunk_size": "7", "snr_db": "4",
                             "detectors": "embp,bp_coherent,map_coherent", "seed": "11"})
    a = sweep_csv(run_ber_sweep(cfg), cfg.detectors)
    b = sweep_csv(run_ber_sweep(with_overrides(cfg, workers=2)), cfg.detectors)
    return a == b, "sweep output identical across reruns and worker counts"


CHECKS = {
    "trellis_vs_enumeration": check_trellis_vs_enumeration,
    "bp_tree_exact": check_bp_tree,
    "literal_em_updates": check_literal_updates,
    "elbo_stationarity": check_elbo_stationary,
    "exact_em_monotone": check_exact_em_monotone,
    "momentum_degeneracy": check_momentum_degeneracy,
    "awgn_ber_anchor": check_awgn_ber,
    "schedule_roundtrip": check_schedule_roundtrip,
    "update_counter": check_update_counter,
    "sweep_determinism": check_sweep_determinism,
}


def run_selftest(names=None, out=print) -> bool:
    ok = True
    for name in names or CHECKS:
        try:
            passed, detail = CHECKS[name]()
        except Exception as exc:  # a crashing oracle is a failure, not an abort
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        passed = bool(passed)
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return ok
