import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchordiff.errors import ConfigError, NumericError
from anchordiff.schedule import (anchored_forward, build_schedule, invert_x0,
                                 range_from_steps, reverse_chain,
                                 sample_train_timestep, truncated_range)

SCHED = build_schedule(50)


def test_single_step_schedule():
    sched = build_schedule(1, 0.5, 0.5)
    assert sched.alpha_bars[0] == pytest.approx(0.5)


def test_alpha_bar_strictly_decreasing():
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert SCHED.alpha_bars[49] < SCHED.alpha_bars[0]
    assert np.all((SCHED.alpha_bars > 0) & (SCHED.alpha_bars < 1))


def test_alpha_bar_matches_independent_product_loop():
    # independent oracle: recompute the cumulative product step by step
    prod = 1.0
    for tau in range(50):
        beta = 1e-4 + (0.02 - 1e-4) * tau / 49
        prod *= 1.0 - beta
    assert SCHED.alpha_bars[49] == pytest.approx(prod, rel=1e-12)


def test_sqrt_coefficients_pythagorean_identity():
    total = SCHED.sqrt_alpha_bars ** 2 + SCHED.sqrt_one_minus ** 2
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_build_schedule_rejects_bad_ranges():
    with pytest.raises(ConfigError):
        build_schedule(0)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.0, 0.02)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.03, 0.02)
    with pytest.raises(ConfigError):
        build_schedule(10, 0.1, 1.0)


def test_truncated_range_examples():
    assert truncated_range(0.2, 50).s_tr == 10
    assert truncated_range(1.0, 50).s_tr == 50
    assert truncated_range(0.001, 50).s_tr == 1
    assert truncated_range(0.2, 50).tau_start == 9


def test_truncated_range_rejects_bad_rho():
    for rho in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            truncated_range(rho, 50)


def test_range_from_steps_bounds():
    assert range_from_steps(10, 50).tau_start == 9
    with pytest.raises(ConfigError):
        range_from_steps(0, 50)
    with pytest.raises(ConfigError):
        range_from_steps(51, 50)


def test_sample_timestep_support():
    rng = np.random.default_rng(0)
    trange = truncated_range(0.2, 50)
    draws = [sample_train_timestep(trange, rng) for _ in range(2000)]
    assert min(draws) >= 0 and max(draws) <= 9
    single = truncated_range(0.001, 50)
    assert all(sample_train_timestep(single, rng) == 0 for _ in range(20))


def test_sample_timestep_uniform_within_three_sigma():
    rng = np.random.default_rng(1)
    trange = truncated_range(0.2, 50)
    n = 100_000
    counts = np.bincount([sample_train_timestep(trange, rng) for _ in range(n)],
                         minlength=10)
    p = 0.1
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_anchored_forward_zero_noise():
    anchor = np.random.default_rng(2).uniform(-1, 1, size=(4, 3))
    out = anchored_forward(anchor, np.zeros_like(anchor), 7, SCHED)
    np.testing.assert_array_equal(out, SCHED.sqrt_alpha_bars[7] * anchor)


def test_anchored_forward_zero_anchor():
    ones = np.ones((4, 3))
    out = anchored_forward(np.zeros((4, 3)), ones, 12, SCHED)
    np.testing.assert_array_equal(out, SCHED.sqrt_one_minus[12] * ones)


def test_anchored_forward_tau_out_of_range():
    with pytest.raises(IndexError):
        anchored_forward(np.zeros((2, 2)), np.zeros((2, 2)), 50, SCHED)


@settings(max_examples=50, deadline=None)
@given(tau=st.integers(min_value=0, max_value=49), seed=st.integers(0, 10_000))
def test_round_trip_identity_property(tau, seed):
    rng = np.random.default_rng(seed)
    anchor = rng.uniform(-1, 1, size=(5, 5))
    eps = rng.standard_normal((5, 5))
    noisy = anchored_forward(anchor, eps, tau, SCHED)
    recovered = invert_x0(noisy, eps, tau, SCHED)
    np.testing.assert_allclose(recovered, anchor, atol=1e-10)


def test_invert_near_identity_at_tau_zero():
    noisy = np.random.default_rng(3).uniform(-1, 1, size=(3, 3))
    out = invert_x0(noisy, np.zeros_like(noisy), 0, SCHED)
    np.testing.assert_allclose(out, noisy, atol=1e-3)


def test_invert_clamps_to_bound():
    noisy = np.full((2, 2), 3.0)
    out = invert_x0(noisy, np.zeros_like(noisy), 0, SCHED)
    np.testing.assert_array_equal(out, np.full((2, 2), 1.5))


def test_reverse_chain_perfect_oracle_recovers_anchor():
    rng = np.random.default_rng(4)
    for s_tr in (1, 5, 10, 50):
        trange = range_from_steps(s_tr, 50)
        anchor = rng.uniform(-1, 1, size=(4, 5))
        eps = rng.standard_normal((4, 5))
        init = anchored_forward(anchor, eps, trange.tau_start, SCHED)
        out = reverse_chain(init, lambda x, tau, ctx: eps, trange, SCHED)
        np.testing.assert_allclose(out, anchor, atol=1e-8)


def test_reverse_chain_single_step_equals_inversion():
    rng = np.random.default_rng(5)
    trange = range_from_steps(1, 50)
    init = rng.uniform(-1, 1, size=(2, 3))
    eps_hat = rng.standard_normal((2, 3)) * 0.1
    out = reverse_chain(init, lambda x, tau, ctx: eps_hat, trange, SCHED)
    np.testing.assert_array_equal(out, invert_x0(init, eps_hat, 0, SCHED))


def test_reverse_chain_deterministic_bitwise():
    rng = np.random.default_rng(6)
    trange = range_from_steps(10, 50)
    init = rng.uniform(-1, 1, size=(3, 4))

    def denoiser(x, tau, ctx):
        return np.tanh(x) * 0.3

    a = reverse_chain(init, denoiser, trange, SCHED)
    b = reverse_chain(init, denoiser, trange, SCHED)
    assert np.array_equal(a, b)


def test_reverse_chain_nonfinite_denoiser_raises():
    trange = range_from_steps(3, 50)
    with pytest.raises(NumericError):
        reverse_chain(np.zeros((2, 2)), lambda x, tau, ctx: np.full_like(x, np.nan),
                      trange, SCHED)
