from dataclasses import dataclass

import numpy

from numerics import as_real_image


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Forward diffusion schedule over T steps. Arrays are indexed by timestep: beta[t]
    and alpha[t] for t in 1..T (index 0 unused, set to 0 and 1), alpha_bar[t] for t in 0..T
    with alpha_bar[0] = 1.
    """

    T: int
    beta: numpy.ndarray
    alpha: numpy.ndarray
    alpha_bar: numpy.ndarray

    @classmethod
    def from_betas(cls, betas):
        betas = numpy.asarray(betas, dtype=numpy.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas should be a non-empty 1D sequence")
        if numpy.any(betas <= 0) or numpy.any(betas >= 1):
            raise ValueError("Every beta should lie strictly inside (0, 1)")
        if numpy.any(numpy.diff(betas) < 0):
            raise ValueError("betas should be non-decreasing")
        beta = numpy.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        # Sequential product, so alpha_bar[t] == alpha_bar[t - 1] * alpha[t] exactly
        alpha_bar = numpy.cumprod(alpha)
        for array in (beta, alpha, alpha_bar):
            array.setflags(write=False)
        return cls(len(betas), beta, alpha, alpha_bar)

    def metadata(self):
        return {
            "T": self.T,
            "beta_start": float(self.beta[1]),
            "beta_end": float(self.beta[self.T]),
        }


def linear_beta_schedule(T, beta_start, beta_end):
    if T < 1:
        raise ValueError(f"T should be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"Expected 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )
    return NoiseSchedule.from_betas(numpy.linspace(beta_start, beta_end, T))


def _check_timestep(schedule, t):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"Timestep should be in [1, {schedule.T}], got {t}")


def forward_diffuse(schedule, y0, t, eps):
    """
    Closed form of the forward process: y_t = sqrt(alpha_bar_t) y_0 + sqrt(1 - alpha_bar_t) eps.
    """
    _check_timestep(schedule, t)
    y0 = as_real_image(y0, "y0")
    if numpy.shape(eps) != y0.shape:
        raise ValueError(f"eps shape {numpy.shape(eps)} does not match y0 shape {y0.shape}")
    alpha_bar = schedule.alpha_bar[t]
    return numpy.sqrt(alpha_bar) * y0 + numpy.sqrt(1 - alpha_bar) * eps


def sample_alpha_bar(schedule, rng):
    """
    Draw from the piecewise uniform training distribution of the noise level:
    t uniform on {1..T}, then alpha_bar uniform on (alpha_bar_t, alpha_bar_{t-1}).

    Returns:
        (alpha_bar, t)
    """
    t = int(rng.integers(1, schedule.T + 1))
    low, high = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    while True:
        alpha_bar = float(rng.uniform(low, high))
        if low < alpha_bar < high:
            return alpha_bar, t


def posterior_params(schedule, y0, yt, t):
    """
    Mean and variance of the tractable posterior q(y_{t-1} | y_t, y_0).

    Returns:
        (mu, sigma2)
    """
    _check_timestep(schedule, t)
    y0 = as_real_image(y0, "y0")
    yt = as_real_image(yt, "yt")
    if t == 1:
        # alpha_bar_0 = 1: the posterior collapses onto y0
        return y0.copy(), 0.0
    alpha = schedule.alpha[t]
    beta = schedule.beta[t]
    alpha_bar = schedule.alpha_bar[t]
    alpha_bar_prev = schedule.alpha_bar[t - 1]
    coef_yt = numpy.sqrt(alpha) * (1 - alpha_bar_prev) / (1 - alpha_bar)
    coef_y0 = numpy.sqrt(alpha_bar_prev) * beta / (1 - alpha_bar)
    sigma2 = beta * (1 - alpha_bar_prev) / (1 - alpha_bar)
    return coef_yt * yt + coef_y0 * y0, float(sigma2)
