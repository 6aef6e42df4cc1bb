from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embp.baselines import elbo
from embp.em import (
    Schedule,
    dumps_schedule,
    em_step,
    loads_schedule,
    make_schedule,
    param_names,
    sigma2_floor,
    update_sigma2,
    update_tap,
)
from embp.model import ChannelParams, Constellation, bpsk, convolve, generate_block, qpsk, sample_channel
from embp.selftest import expected_residual, literal_sigma2, literal_tap, random_instance


def delta(idx, M):
    return np.eye(M)[idx]


def noiseless(rng, N, L, c):
    idx = c.sample_indices(rng, N)
    h = sample_channel(L, rng)
    return idx, h, convolve(h, c.points[idx])


def test_sigma2_noiseless_truth_hits_floor(rng):
    c = bpsk()
    idx, h, y = noiseless(rng, 12, 2, c)
    s = update_sigma2(delta(idx, 2), y, ChannelParams(h, 0.3), c)
    assert s == pytest.approx(sigma2_floor(y))


def test_sigma2_delta_beliefs_is_residual_power(rng, constellation):
    blk = generate_block(rng, 15, 2, 3.0, constellation)
    s = update_sigma2(delta(blk.symbol_indices, constellation.M), blk.observation, blk.truth, constellation)
    resid = blk.observation - convolve(blk.truth.h, blk.symbols)
    assert s == pytest.approx(np.sum(np.abs(resid) ** 2) / 17, rel=1e-12)


def test_sigma2_literal_bpsk_n4_l1(rng):
    c = bpsk()
    blk, q = random_instance(rng, 4, 1, c)
    got = update_sigma2(q, blk.observation, blk.truth, c)
    assert got == pytest.approx(literal_sigma2(q, blk.observation, blk.truth.h, c.points), abs=1e-12)


def test_sigma2_is_expected_residual(rng, constellation):
    blk, q = random_instance(rng, 4, 2, constellation)
    got = update_sigma2(q, blk.observation, blk.truth, constellation)
    assert got == pytest.approx(expected_residual(q, blk.observation, blk.truth.h, constellation), abs=1e-12)


def test_tap_literal(rng, constellation):
    blk, q = random_instance(rng, 5, 2, constellation)
    for ell in range(3):
        got = update_tap(ell, q, blk.observation, blk.truth, constellation)
        ref = literal_tap(ell, q, blk.observation, blk.truth.h, constellation.points)
        assert abs(got - ref) < 1e-12


def test_tap_l0_correlation_estimator(rng):
    c = qpsk()
    idx, h, y = noiseless(rng, 20, 0, c)
    got = update_tap(0, delta(idx, 4), y, ChannelParams(np.zeros(1), 1.0), c)
    assert abs(got - h[0]) < 1e-12


def test_taps_fixed_point_at_truth(rng):
    c = qpsk()
    idx, h, y = noiseless(rng, 20, 1, c)
    p = ChannelParams(h, 1.0)
    for ell in range(2):
        assert abs(update_tap(ell, delta(idx, 4), y, p, c) - h[ell]) < 1e-9


def test_tap_index_range(rng):
    blk, q = random_instance(rng, 4, 1, bpsk())
    with pytest.raises(ValueError):
        update_tap(2, q, blk.observation, blk.truth, bpsk())


def test_tap_degenerate_denominator():
    c = Constellation(np.array([0.0, 1.0]))
    with pytest.raises(FloatingPointError):
        update_tap(0, delta(np.zeros(3, int), 2), np.ones(3), ChannelParams(np.ones(1), 1.0), c)


@pytest.mark.parametrize("ell", [0, 1, 2])
def test_tap_update_zeroes_elbo_gradient(rng, ell):
    c = qpsk()
    blk, q = random_instance(rng, 4, 2, c)
    y, p = blk.observation, blk.truth
    h = p.h.copy()
    h[ell] = update_tap(ell, q, y, p, c)
    eps = 1e-5
    for direction in (1.0, 1j):
        hp, hm = h.copy(), h.copy()
        hp[ell] += eps * direction
        hm[ell] -= eps * direction
        g = (elbo(q, y, ChannelParams(hp, p.sigma2), c) - elbo(q, y, ChannelParams(hm, p.sigma2), c)) / (2 * eps)
        assert abs(g) < 1e-6


def test_sigma2_update_zeroes_elbo_gradient(rng):
    c = qpsk()
    blk, q = random_instance(rng, 4, 2, c)
    s = float(update_sigma2(q, blk.observation, blk.truth, c))
    eps = 1e-6 * s
    lo = elbo(q, blk.observation, ChannelParams(blk.truth.h, s - eps), c)
    hi = elbo(q, blk.observation, ChannelParams(blk.truth.h, s + eps), c)
    assert abs(hi - lo) / (2 * eps) * s < 1e-6


def test_em_step_zero_row_is_identity(rng):
    blk, q = random_instance(rng, 6, 2, bpsk())
    sched = make_schedule("custom", 1, 2, beta_em=np.zeros((1, 4)))
    counter = Counter()
    out = em_step(1, sched, q, blk.observation, blk.truth, bpsk(), counter=counter)
    assert np.array_equal(out.h, blk.truth.h) and out.sigma2 == blk.truth.sigma2
    assert sum(counter.values()) == 0


def test_em_step_full_row_is_raw_updates(rng):
    c = bpsk()
    blk, q = random_instance(rng, 6, 2, c)
    out = em_step(1, make_schedule("parallel", 1, 2), q, blk.observation, blk.truth, c)
    raw = [update_tap(l, q, blk.observation, blk.truth, c) for l in range(3)]
    assert np.array_equal(out.h, raw)
    assert out.sigma2 == update_sigma2(q, blk.observation, blk.truth, c)


def test_em_step_half_weight_midpoint(rng):
    c = bpsk()
    blk, q = random_instance(rng, 6, 2, c)
    row = np.array([[0.5, 0, 0, 0]])
    out = em_step(1, make_schedule("custom", 1, 2, beta_em=row), q, blk.observation, blk.truth, c)
    raw = update_tap(0, q, blk.observation, blk.truth, c)
    assert out.h[0] == pytest.approx(0.5 * raw + 0.5 * blk.truth.h[0])
    assert np.array_equal(out.h[1:], blk.truth.h[1:]) and out.sigma2 == blk.truth.sigma2


def test_em_step_jacobi_semantics(rng):
    # every raw update reads the previous estimate, not the freshly updated taps
    c = qpsk()
    blk, q = random_instance(rng, 6, 2, c)
    out = em_step(1, make_schedule("parallel", 1, 2), q, blk.observation, blk.truth, c)
    assert out.h[1] == update_tap(1, q, blk.observation, blk.truth, c)


def test_em_step_range(rng):
    blk, q = random_instance(rng, 6, 1, bpsk())
    with pytest.raises(ValueError):
        em_step(2, make_schedule("serial", 1, 1), q, blk.observation, blk.truth, bpsk())
    with pytest.raises(ValueError):
        em_step(1, make_schedule("serial", 1, 2), q, blk.observation, blk.truth, bpsk())


def test_counter_counts_blocks(rng):
    c = bpsk()
    blk, q = random_instance(rng, 6, 1, c)
    p = ChannelParams(np.stack([blk.truth.h] * 3), np.full(3, blk.truth.sigma2))
    counter = Counter()
    em_step(1, make_schedule("parallel", 1, 1), np.stack([q] * 3), np.stack([blk.observation] * 3), p, c, counter)
    assert counter == Counter({"h0": 3, "h1": 3, "sigma2": 3})


def test_serial_schedule_updates_each_parameter_three_times():
    s = make_schedule("serial", 12, 2)
    assert np.all(s.beta_em.sum(axis=0) == 3) and np.all(s.beta_em.sum(axis=1) == 1)
    assert np.all(s.beta_bp == 1)


def test_parallel_schedule_all_ones():
    assert np.all(make_schedule("parallel", 5, 3).beta_em == 1)


def test_custom_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule("custom", 1, 0, beta_em=[[1.5, 0.0]])
    with pytest.raises(ValueError):
        make_schedule("custom", 2, 0, beta_em=[[1.0, 0.0]])
    with pytest.raises(ValueError):
        make_schedule("diagonal", 2, 0)
    with pytest.raises(ValueError):
        make_schedule("serial", 0, 2)


@given(
    st.integers(1, 6).flatmap(
        lambda T: st.tuples(
            st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=T, max_size=T),
            st.lists(st.floats(0, 1), min_size=T, max_size=T),
        )
    )
)
def test_schedule_text_round_trip(data):
    em, bp = data
    s = Schedule(np.array(em), np.array(bp))
    assert loads_schedule(dumps_schedule(s)) == s


def test_schedule_file_format(tmp_path):
    s = make_schedule("serial", 2, 0, beta_bp=0.5)
    path = tmp_path / "s.txt"
    s.save(path)
    assert path.read_text() == "2\n1.0 0.0\n0.0 1.0\n0.5 0.5\n"
    assert Schedule.load(path) == s


def test_schedule_comments_and_malformed():
    assert loads_schedule("# learned\n1\n1 0.25 1\n0.5\n").beta_em.tolist() == [[1, 0.25, 1]]
    for bad in ("", "2\n1 1\n0.5\n", "1\n1 1\n1 1\n0.5 0.5\n", "1\nx 1\n1\n"):
        with pytest.raises(ValueError):
            loads_schedule(bad)


def test_param_names():
    assert param_names(1) == ["h0", "h1", "sigma2"]
