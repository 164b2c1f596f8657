import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ota_fl_sim.channel import (ChannelConfig, FadingDraw, apply_fading, compute_precoding_factor,
                                decode_fading, decode_full, decode_partial, decoded_noise_variance,
                                draw_fading, encode, encode_fading, mac_superpose,
                                participation_probability, r_hat_for_participation,
                                sigma2_from_snr_db, snr, snr_db)
from ota_fl_sim.exceptions import ConfigError, DegenerateUpdateError, NoParticipantsError


def test_precoding_examples():
    assert compute_precoding_factor([1, 1, 1], [1 / 3] * 3, 1.0) == pytest.approx(1.0, rel=1e-15)
    assert compute_precoding_factor([4.0, 0.0], [0.5, 0.5], 2.0) == 1.0
    with pytest.raises(DegenerateUpdateError):
        compute_precoding_factor([0.0, 0.0], [0.5, 0.5], 1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 20), P=st.floats(0.01, 100))
def test_precoding_meets_power_budget(seed, K, P):
    rng = np.random.default_rng(seed)
    norms = rng.uniform(0.01, 10, K)
    q = rng.dirichlet(np.ones(K))
    q = q / q.sum()
    p = compute_precoding_factor(norms, q, P)
    assert abs(p * (q @ norms) - P) <= 1e-9 * P


def test_precoding_validates_inputs():
    with pytest.raises(ValueError):
        compute_precoding_factor([1, 1], [0.3, 0.3], 1.0)
    with pytest.raises(ValueError):
        compute_precoding_factor([1, -1], [0.5, 0.5], 1.0)
    with pytest.raises(ValueError):
        compute_precoding_factor([1], [0.5, 0.5], 1.0)


def test_encode_examples():
    np.testing.assert_array_equal(encode([3.0, 5.0], [1.0, 1.0], 4.0), [4.0, 8.0])
    assert not np.any(encode(np.ones(3), np.ones(3), 2.0))
    with pytest.raises(ValueError):
        encode([np.nan], [0.0], 1.0)
    with pytest.raises(ValueError):
        encode([1.0], [0.0], 0.0)


def test_encode_fading_inverts_channel():
    draw = FadingDraw(r=2.0, omega=0.7)
    x = encode_fading([3.0, -1.0], [1.0, 1.0], 4.0, draw, r_hat=0.5)
    received = apply_fading(x, draw)
    # receiver sees r_hat * sqrt(p) * delta with zero phase
    np.testing.assert_allclose(received, 0.5 * 2.0 * np.array([2.0, -2.0]), atol=1e-12)
    assert encode_fading([1.0], [0.0], 1.0, FadingDraw(0.5, 0.0), r_hat=0.5) is None
    assert encode_fading([1.0], [0.0], 1.0, FadingDraw(0.3, 0.0), r_hat=0.5) is None


def test_mac_superpose_noiseless_is_exact_sum():
    y = mac_superpose([np.array([1.0, 2.0]), np.array([3.0, 4.0])], 0.0, rng=0)
    np.testing.assert_array_equal(y, [4.0, 6.0])
    y = mac_superpose([np.array([1.5])], 0.0, rng=0)
    np.testing.assert_array_equal(y, [1.5])
    with pytest.raises(ValueError):
        mac_superpose([np.ones(2), np.ones(3)], 0.0, rng=0)
    with pytest.raises(ValueError):
        mac_superpose([], 0.0, rng=0)


def test_mac_superpose_noise_seeded():
    a = mac_superpose([np.zeros(5)], 1.0, rng=3)
    b = mac_superpose([np.zeros(5)], 1.0, rng=3)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, mac_superpose([np.zeros(5)], 1.0, rng=4))


def test_decode_examples():
    np.testing.assert_array_equal(decode_full([6.0, 3.0], 3, 1.0, [1.0, 1.0]), [3.0, 2.0])
    np.testing.assert_array_equal(decode_full([0.0, 0.0], 3, 1.0, [1.0, -2.0]), [1.0, -2.0])
    np.testing.assert_array_equal(decode_partial([10.0, 4.0], 2, 4.0, [0.0, 0.0]), [2.5, 1.0])
    with pytest.raises(NoParticipantsError):
        decode_partial([1.0], 0, 1.0, [0.0])
    with pytest.raises(NoParticipantsError):
        decode_fading([1.0], 0.5, 0, 1.0, [0.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 10), p=st.floats(0.01, 100))
def test_noiseless_round_trip_is_average(seed, K, p):
    rng = np.random.default_rng(seed)
    prev = rng.standard_normal(4)
    thetas = rng.standard_normal((K, 4))
    y = mac_superpose([encode(t, prev, p) for t in thetas], 0.0, rng=0)
    np.testing.assert_allclose(decode_full(y, K, p, prev), thetas.mean(axis=0), atol=1e-12)


def _decoded_noise(decoder, n, sigma2, seed):
    # coordinates carry independent noise draws, so one wide vector is n trials
    y = mac_superpose([np.zeros(n)], sigma2, rng=seed)
    return decoder(y)


@pytest.mark.parametrize("K,p,sigma2", [(3, 0.25, 1.0), (5, 2.0, 0.3)])
def test_full_decode_noise_variance(K, p, sigma2):
    noise = _decoded_noise(lambda y: decode_full(y, K, p, 0.0), 100_000, sigma2, seed=K)
    target = sigma2 / (K * K * p)
    assert decoded_noise_variance(sigma2, K, p) == pytest.approx(target)
    assert abs(noise.mean()) < 5 * math.sqrt(target / 1e5)
    assert noise.var() == pytest.approx(target, rel=0.03)


def test_partial_decode_noise_variance():
    noise = _decoded_noise(lambda y: decode_partial(y, 2, 0.25, 0.0), 100_000, 1.0, seed=9)
    assert noise.var() == pytest.approx(1.0 / (4 * 0.25), rel=0.03)


def test_fading_decode_noise_variance():
    r_hat, k, p = 0.8, 4, 0.5
    noise = _decoded_noise(lambda y: decode_fading(y, r_hat, k, p, 0.0), 100_000, 1.0, seed=11)
    target = 1.0 / (r_hat ** 2 * k ** 2 * p)
    assert decoded_noise_variance(1.0, k, p, r_hat) == pytest.approx(target)
    assert noise.var() == pytest.approx(target, rel=0.03)


def test_rayleigh_draws():
    draws = draw_fading(100_000, rng=0)
    r = np.array([d.r for d in draws])
    omega = np.array([d.omega for d in draws])
    assert np.mean(r ** 2) == pytest.approx(1.0, rel=0.02)
    assert omega.min() >= 0 and omega.max() < 2 * math.pi
    for r_hat in (0.3, 1.0, 1.5):
        assert np.mean(r > r_hat) == pytest.approx(participation_probability(r_hat), abs=0.01)
    assert [d.r for d in draw_fading(5, 1)] == [d.r for d in draw_fading(5, 1)]


def test_participation_threshold_inverse():
    for f in (0.05, 2 / 3, 1.0):
        assert participation_probability(r_hat_for_participation(f)) == pytest.approx(f, rel=1e-12)
    with pytest.raises(ValueError):
        r_hat_for_participation(0.0)


def test_snr_examples():
    assert snr(1.0, 1000, 1e-3) == pytest.approx(1.0)
    assert snr_db(1.0, 1000, 1e-3) == pytest.approx(0.0, abs=1e-12)
    assert sigma2_from_snr_db(0.0, 1.0, 1000) == pytest.approx(1e-3)
    assert sigma2_from_snr_db(10.0, 1.0, 1000) == pytest.approx(1e-4)
    assert snr(1.0, 10, 0.0) == math.inf and snr_db(1.0, 10, 0.0) == math.inf


@pytest.mark.parametrize("kwargs,field", [
    ({"P": 0.0}, "channel.P"),
    ({"sigma2": -1.0}, "channel.sigma2"),
    ({"fading": True, "r_hat": 0.0}, "channel.r_hat"),
    ({"precoding_mode": "magic"}, "channel.precoding"),
    ({"baseband": "iq"}, "channel.baseband"),
])
def test_channel_config_errors_name_field(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        ChannelConfig(**kwargs)
    assert exc.value.field == field and field in str(exc.value)
