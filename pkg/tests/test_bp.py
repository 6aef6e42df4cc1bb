import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embp.baselines import brute_force_posterior
from embp.bp import (
    bp_iteration,
    combine_messages,
    compute_factors,
    detect,
    edge_mask,
    logsumexp,
    run_bp,
    uniform_messages,
)
from embp.model import ChannelParams, Constellation, MatchedStats, build_matched_stats, bpsk, generate_block, qpsk


def stats_for(blk):
    return build_matched_stats(blk.truth, blk.observation)


def test_zero_interference_factor_is_one(rng):
    s = MatchedStats(x=rng.standard_normal(4).astype(complex), r=np.array([1.0, 0.0]), sigma2=np.array(0.7))
    assert np.all(compute_factors(s, qpsk()).logI == 0)


def test_scalar_local_factor():
    s = MatchedStats(x=np.array([1.0 + 0j]), r=np.array([1.0 + 0j]), sigma2=np.array(1.0))
    assert compute_factors(s, bpsk()).logF[0, 0] == pytest.approx(1.0)


def test_bpsk_pair_factor_antisymmetric(rng):
    blk = generate_block(rng, 6, 2, 3.0, bpsk())
    logI = compute_factors(stats_for(blk), bpsk()).logI
    assert np.allclose(logI[:, 0, 0], -logI[:, 0, 1])


def test_pair_factor_hermitian_symmetry(rng):
    blk = generate_block(rng, 6, 2, 3.0, qpsk())
    logI = compute_factors(stats_for(blk), qpsk()).logI
    # offset j and its reverse D-1-j describe the same pair seen from both ends
    assert np.allclose(logI, np.swapaxes(logI[::-1], -1, -2))


def test_factors_reject_nonpositive_noise():
    s = MatchedStats(x=np.zeros(2, complex), r=np.array([1.0, 0.0]), sigma2=np.array(0.0))
    with pytest.raises(ValueError):
        compute_factors(s, bpsk())


def test_no_edges_keeps_messages_uniform(rng):
    s = MatchedStats(x=rng.standard_normal(5) + 0j, r=np.array([1.0, 0.0, 0.0]), sigma2=np.array(0.5))
    f = compute_factors(s, bpsk())
    mu, b = bp_iteration(uniform_messages((), 5, 2, 2), f, 1.0)
    assert np.allclose(mu, -np.log(2))
    assert np.allclose(np.exp(b), np.exp(f.logF) / np.exp(f.logF).sum(-1, keepdims=True))


def test_beta_one_is_plain_update_and_zero_freezes(rng):
    blk = generate_block(rng, 10, 2, 4.0, qpsk())
    f = compute_factors(stats_for(blk), qpsk())
    mu1, _ = bp_iteration(uniform_messages((), 10, 2, 4), f, 1.0)
    plain = combine_messages(mu1, mu1, 1.0)
    assert plain is mu1
    frozen, _ = bp_iteration(mu1, f, 0.0)
    assert np.array_equal(frozen, mu1)


def test_beta_out_of_range(rng):
    blk = generate_block(rng, 4, 1, 4.0, bpsk())
    f = compute_factors(stats_for(blk), bpsk())
    with pytest.raises(ValueError):
        bp_iteration(uniform_messages((), 4, 1, 2), f, 1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 3), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_normalization_preserved(N, L, beta, seed):
    rng = np.random.default_rng(seed)
    c = qpsk()
    blk = generate_block(rng, N, L, float(rng.uniform(-5, 15)), c)
    f = compute_factors(stats_for(blk), c)
    mu = uniform_messages((), N, L, c.M)
    for _ in range(3):
        mu, b = bp_iteration(mu, f, beta)
        assert np.allclose(logsumexp(mu, axis=-1), 0.0, atol=1e-9)
        assert np.allclose(logsumexp(b, axis=-1), 0.0, atol=1e-9)


def test_momentum_preserves_fixed_point(rng):
    # a chain N=3, L=1 is a tree: flooding BP converges exactly
    c = qpsk()
    blk = generate_block(rng, 3, 1, 3.0, c)
    f = compute_factors(stats_for(blk), c)
    mu = uniform_messages((), 3, 1, c.M)
    for _ in range(10):
        mu, _ = bp_iteration(mu, f, 1.0)
    for beta in (0.1, 0.5, 0.9, 1.0):
        nxt, _ = bp_iteration(mu, f, beta)
        assert np.allclose(nxt, mu, atol=1e-9)


def test_tree_beliefs_exact(rng, constellation):
    for _ in range(10):
        blk = generate_block(rng, 2, 1, float(rng.uniform(-3, 12)), constellation)
        exact = brute_force_posterior(blk.observation, blk.truth, constellation)[0]
        b = np.exp(run_bp(stats_for(blk), constellation, 3))
        assert np.max(np.abs(b - exact)) < 1e-6


def test_chain_n3_beliefs_exact(rng):
    c = bpsk()
    blk = generate_block(rng, 3, 1, 6.0, c)
    exact = brute_force_posterior(blk.observation, blk.truth, c)[0]
    assert np.allclose(np.exp(run_bp(stats_for(blk), c, 50)), exact, atol=1e-6)


def test_run_bp_requires_iterations(rng):
    blk = generate_block(rng, 4, 1, 4.0, bpsk())
    with pytest.raises(ValueError):
        run_bp(stats_for(blk), bpsk(), 0)
    with pytest.raises(ValueError):
        run_bp(stats_for(blk), bpsk(), 2, beta_bp=[1.0])


def test_single_iteration_without_edges_is_matched_filter(rng):
    y = np.array([0.3, -2.0, 0.1])
    b = run_bp(build_matched_stats(ChannelParams(np.array([1.0]), 1.0), y), bpsk(), 1)
    assert np.array_equal(detect(b), [0, 1, 0])


def test_relabeling_equivariance(rng):
    c = qpsk()
    perm = np.array([2, 0, 3, 1])
    c2 = Constellation(c.points[perm])
    blk = generate_block(rng, 8, 2, 5.0, c)
    b1 = run_bp(stats_for(blk), c, 5)
    b2 = run_bp(stats_for(blk), c2, 5)
    assert np.allclose(b2, b1[:, perm], atol=1e-12)


def test_batched_equals_single(rng):
    c = bpsk()
    blks = [generate_block(rng, 9, 2, 4.0, c) for _ in range(3)]
    y = np.stack([b.observation for b in blks])
    p = ChannelParams(np.stack([b.truth.h for b in blks]), np.array([b.truth.sigma2 for b in blks]))
    batched = run_bp(build_matched_stats(p, y), c, 4)
    for i, b in enumerate(blks):
        assert np.allclose(batched[i], run_bp(stats_for(b), c, 4), atol=1e-13)


def test_edge_mask():
    m = edge_mask(3, 1)
    assert m.tolist() == [[False, True], [True, True], [True, False]]


def test_detect_examples(rng):
    assert detect(np.log([[0.9, 0.1]]))[0] == 0
    assert detect(np.log([[0.5, 0.5]]))[0] == 0
    b = rng.random((100, 4))
    assert np.array_equal(detect(np.log(b)), [max(range(4), key=lambda k: row[k]) for row in b])


def test_logsumexp_handles_all_minus_inf():
    a = np.full((3, 2), -np.inf)
    assert np.all(logsumexp(a, axis=-1) == -np.inf)
    assert logsumexp(np.array([0.0, 0.0])) == pytest.approx(np.log(2))
