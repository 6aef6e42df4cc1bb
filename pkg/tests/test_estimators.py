import numpy as np
import pytest
from sklearn.base import clone

from embp import CoherentBPDetector, EMBPDetector, MAPDetector, PilotMAPDetector, ScheduleLearner
from embp.em import make_schedule
from embp.model import ChannelParams, bpsk, complex_noise, convolve, sample_channel


def blocks(rng, B=6, N=30, L=2, sigma2=0.01):
    c = bpsk()
    h = np.stack([sample_channel(L, rng) for _ in range(B)])
    idx = np.stack([c.sample_indices(rng, N) for _ in range(B)])
    Y = convolve(h, c.points[idx]) + complex_noise(rng, np.full(B, sigma2), (N + L,))
    return Y, idx, ChannelParams(h, np.full(B, sigma2))


def test_get_params_and_clone():
    est = EMBPDetector(L=3, schedule="parallel", T=5)
    assert est.get_params() == {"L": 3, "constellation": "bpsk", "schedule": "parallel", "T": 5,
                                "init": "impulse_power:0.1"}
    other = clone(est).set_params(L=1)
    assert other.L == 1 and est.L == 3
    assert set(ScheduleLearner().get_params()) >= {"T", "L", "k_em_target", "gradient_mode"}


def test_embp_fit_predict_shapes(rng):
    Y, idx, _ = blocks(rng)
    est = EMBPDetector(L=2).fit(Y)
    assert est.channel_.h.shape == (6, 3) and est.log_beliefs_.shape == (6, 30, 2)
    assert est.trajectory_.shape == (13, 6, 3)
    proba = est.predict_proba(Y)
    assert np.allclose(proba.sum(-1), 1)
    assert np.array_equal(est.predict(Y), est.fit_predict(Y))
    assert est.fit_transform(Y).shape == (6, 3)
    assert est.symbols().shape == (6, 30)


def test_embp_single_block_is_promoted(rng):
    Y, _, _ = blocks(rng, B=1)
    assert EMBPDetector(L=2).predict(Y[0]).shape == (1, 30)


def test_coherent_detectors_recover_symbols(rng):
    Y, idx, params = blocks(rng, sigma2=1e-4)
    assert np.array_equal(MAPDetector(params).fit().predict(Y), idx)


def test_coherent_bp_close_to_map(rng):
    Y, idx, params = blocks(rng, B=200, sigma2=0.1)
    err_map = np.mean(MAPDetector(params).fit().predict(Y) != idx)
    err_bp = np.mean(CoherentBPDetector(params).fit().predict(Y) != idx)
    assert err_map <= err_bp <= err_map + 0.03


def test_pilot_map(rng):
    Y, idx, _ = blocks(rng, sigma2=1e-4)
    det = PilotMAPDetector(pilots=idx[0, :8], L=2)
    Y2, idx2, _ = blocks(np.random.default_rng(1), sigma2=1e-4)
    idx2[:, :8] = idx[0, :8]
    c = bpsk()
    h = np.stack([sample_channel(2, np.random.default_rng(k)) for k in range(6)])
    Y2 = convolve(h, c.points[idx2]) + complex_noise(rng, np.full(6, 1e-4), (32,))
    assert np.allclose(det.transform(Y2), h, atol=0.05)
    assert np.array_equal(det.predict(Y2), idx2)


@pytest.mark.parametrize("kw, Y, err", [
    ({"L": -1}, np.ones((2, 10)), ValueError),
    ({"L": 2.5}, np.ones((2, 10)), ValueError),
    ({"L": 2}, np.ones((2, 2)), ValueError),
    ({"L": 1}, np.full((2, 10), np.nan), ValueError),
    ({"L": 1}, np.ones((2, 3, 4)), ValueError),
    ({"L": 1}, np.array([["a", "b", "c"]]), TypeError),
    ({"L": 1, "constellation": "16qam"}, np.ones((2, 10)), ValueError),
    ({"L": 1, "schedule": make_schedule("serial", 3, 2)}, np.ones((2, 10)), ValueError),
])
def test_validation_errors(kw, Y, err):
    with pytest.raises(err):
        EMBPDetector(**kw).fit(Y)


def test_coherent_needs_channel():
    with pytest.raises(ValueError):
        CoherentBPDetector().fit()
    with pytest.raises(ValueError):
        PilotMAPDetector(L=1).fit(np.ones((1, 5)))


def test_unfitted_symbols_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        EMBPDetector().symbols()


def test_schedule_learner_fit_transform(rng):
    learner = ScheduleLearner(T=2, L=1, N=12, batches=3, batch_size=8, seed=0).fit()
    assert learner.schedule_.beta_em.shape == (2, 3)
    assert np.all((learner.schedule_.beta_em >= 0) & (learner.schedule_.beta_em <= 1))
    assert len(learner.history_) >= 1
    Y, _, _ = blocks(rng, L=1, N=12)
    assert learner.transform(Y).shape == (6, 2)
    with pytest.raises(ValueError):
        ScheduleLearner(T=2, L=1).fit(channels=np.ones((4, 3)))
