import numpy
import pytest
from numpy.testing import assert_allclose
from scipy.stats import chisquare

from numerics import RandomSource, gaussian_image
from schedule import (
    NoiseSchedule,
    forward_diffuse,
    linear_beta_schedule,
    posterior_params,
    sample_alpha_bar,
)


def test_single_step_schedule():
    schedule = linear_beta_schedule(1, 0.02, 0.02)
    assert schedule.T == 1
    assert_allclose(schedule.beta[1:], [0.02])
    assert schedule.alpha_bar[0] == 1.0


def test_constant_beta_products():
    schedule = linear_beta_schedule(3, 0.1, 0.1)
    assert_allclose(schedule.alpha_bar, [1, 0.9, 0.81, 0.729], atol=1e-15)


def test_alpha_bar_strictly_decreases():
    schedule = linear_beta_schedule(200, 1e-3, 0.2)
    assert (numpy.diff(schedule.alpha_bar) < 0).all()
    assert schedule.alpha_bar[-1] < schedule.alpha_bar[1]


def test_alpha_bar_telescopes():
    schedule = linear_beta_schedule(50, 1e-4, 0.02)
    t = numpy.arange(1, 51)
    assert_allclose(schedule.alpha_bar[t] / schedule.alpha_bar[t - 1], schedule.alpha[t], rtol=1e-14)
    t = numpy.arange(2, 51)
    assert_allclose(
        numpy.sqrt(schedule.alpha[t] * schedule.alpha[t - 1]),
        numpy.sqrt(schedule.alpha_bar[t] / schedule.alpha_bar[t - 2]),
        atol=1e-12,
    )


def test_noise_variance_equals_one_minus_alpha():
    schedule = linear_beta_schedule(20, 1e-3, 0.2)
    assert_allclose(numpy.sqrt(schedule.beta[1:]), numpy.sqrt(1 - schedule.alpha[1:]), atol=1e-15)


def test_schedule_arrays_are_read_only():
    schedule = linear_beta_schedule(4, 0.1, 0.2)
    with pytest.raises(ValueError):
        schedule.alpha_bar[1] = 0.5


@pytest.mark.parametrize(
    "args", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.2, 0.1), (5, 0.1, 1.0)]
)
def test_invalid_schedules(args):
    with pytest.raises(ValueError):
        linear_beta_schedule(*args)


def test_decreasing_betas_are_rejected():
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.2, 0.1])


def test_forward_diffuse_limits():
    schedule = linear_beta_schedule(200, 1e-3, 0.2)
    rng = RandomSource(0)
    y0, eps = rng.normal((8, 8)), rng.normal((8, 8))
    assert_allclose(
        forward_diffuse(schedule, y0, 10, numpy.zeros((8, 8))),
        numpy.sqrt(schedule.alpha_bar[10]) * y0,
    )
    assert_allclose(forward_diffuse(schedule, y0, 200, eps), eps, atol=1e-3)


def test_forward_diffuse_is_jointly_linear():
    schedule = linear_beta_schedule(10, 0.01, 0.1)
    rng = RandomSource(1)
    y1, y2, e1, e2 = (rng.normal((6, 6)) for _ in range(4))
    combined = forward_diffuse(schedule, 2 * y1 + y2, 5, 2 * e1 + e2)
    assert_allclose(
        combined,
        2 * forward_diffuse(schedule, y1, 5, e1) + forward_diffuse(schedule, y2, 5, e2),
        atol=1e-12,
    )


@pytest.mark.slow
def test_forward_diffuse_statistics():
    schedule = linear_beta_schedule(10, 0.05, 0.1)
    t = 4
    rng = RandomSource(2)
    y0 = numpy.linspace(0.5, 1.5, 16).reshape(4, 4)
    samples = numpy.stack(
        [forward_diffuse(schedule, y0, t, gaussian_image(rng, 4, 4)) for _ in range(10_000)]
    )
    assert_allclose(samples.mean(0), numpy.sqrt(schedule.alpha_bar[t]) * y0, rtol=0.02, atol=0.02)
    assert_allclose(samples.std(0), numpy.sqrt(1 - schedule.alpha_bar[t]), rtol=0.04)


def test_sample_alpha_bar_interval_membership():
    schedule = linear_beta_schedule(20, 0.01, 0.3)
    rng = RandomSource(3)
    for _ in range(1000):
        alpha_bar, t = sample_alpha_bar(schedule, rng)
        assert 1 <= t <= 20
        assert schedule.alpha_bar[t] < alpha_bar < schedule.alpha_bar[t - 1]


def test_sample_alpha_bar_single_interval():
    schedule = linear_beta_schedule(1, 0.3, 0.3)
    rng = RandomSource(4)
    draws = [sample_alpha_bar(schedule, rng) for _ in range(500)]
    assert all(t == 1 and 0.7 < alpha_bar < 1 for alpha_bar, t in draws)


@pytest.mark.slow
def test_sample_alpha_bar_histogram():
    schedule = linear_beta_schedule(5, 0.05, 0.25)
    rng = RandomSource(5)
    draws = numpy.array([sample_alpha_bar(schedule, rng)[0] for _ in range(100_000)])
    # Two bins per interval: the density is piecewise uniform, mass 1 / (2T) per bin
    edges = []
    for t in range(5, 0, -1):
        low, high = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
        edges += [low, 0.5 * (low + high)]
    edges.append(1.0)
    counts, _ = numpy.histogram(draws, bins=edges)
    assert chisquare(counts).pvalue > 0.01


def test_posterior_first_step_is_degenerate():
    schedule = linear_beta_schedule(5, 0.1, 0.2)
    y0 = RandomSource(6).normal((4, 4))
    mu, sigma2 = posterior_params(schedule, y0, numpy.zeros((4, 4)), 1)
    assert_allclose(mu, y0, atol=0)
    assert sigma2 == 0.0


def test_posterior_scalar_instance():
    schedule = NoiseSchedule.from_betas([0.1, 0.2])
    mu, sigma2 = posterior_params(schedule, numpy.ones((1, 1)), numpy.ones((1, 1)), 2)
    expected = numpy.sqrt(0.8) * 0.1 / 0.28 + numpy.sqrt(0.9) * 0.2 / 0.28
    assert_allclose(mu, [[expected]], rtol=1e-12)
    assert_allclose(sigma2, 0.2 * 0.1 / 0.28, rtol=1e-12)


def test_posterior_variance_bounds():
    schedule = linear_beta_schedule(30, 1e-3, 0.2)
    zeros = numpy.zeros((2, 2))
    for t in range(2, 31):
        _, sigma2 = posterior_params(schedule, zeros, zeros, t)
        assert 0 < sigma2 <= schedule.beta[t]
