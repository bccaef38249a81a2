import time
from dataclasses import dataclass

import numpy
import torch

import models
from forward_model import MeasurementOp
from numerics import RandomSource, as_real_image, gaussian_image
from schedule import NoiseSchedule


@dataclass
class SamplerConfig:
    schedule: NoiseSchedule
    dc_step: float = 1.0  # Data-consistency step size in [0, 1]
    enable_dc: bool = True  # False runs the plain conditional sampler
    seed: int = 0  # Seed of the initial noise and of every z
    record_trajectory: bool = False  # Keep per-step k-space residuals in the report

    def __post_init__(self):
        if not 0 <= self.dc_step <= 1:
            raise ValueError(f"dc_step should be in [0, 1], got {self.dc_step}")

    def to_dict(self):
        return {
            "schedule": self.schedule.metadata(),
            "dc_step": self.dc_step,
            "enable_dc": self.enable_dc,
            "seed": self.seed,
            "record_trajectory": self.record_trajectory,
        }


def _predict(model, x_cond, y, alpha_bar):
    # The predictor is real-valued
    y = numpy.real(y)
    if isinstance(model, torch.nn.Module):
        return models.predict_noise(model, x_cond, y, alpha_bar)
    return numpy.asarray(model(x_cond, y, alpha_bar), dtype=numpy.float64)


def estimate_y0(model, x_cond, y_t, alpha_bar_t):
    """
    Invert the forward process with the predicted noise:
    y0 ~ (y_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
    """
    eps = _predict(model, x_cond, y_t, alpha_bar_t)
    return (y_t - numpy.sqrt(1 - alpha_bar_t) * eps) / numpy.sqrt(alpha_bar_t)


def reverse_step(model, x_cond, y_t, t, schedule, z):
    """
    One ancestral refinement y_t -> y_{t-1}.

    Args:
        model: Denoiser network or any callable (x_cond, y, alpha_bar) -> eps.
        x_cond: Condition image.
        y_t: Current state (real or complex).
        t (int): Timestep in [1, T].
        schedule: NoiseSchedule.
        z: Standard normal image, all zeros at t = 1.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"Timestep should be in [1, {schedule.T}], got {t}")
    if t == 1 and numpy.any(z != 0):
        raise ValueError("z should be zero at t = 1")
    alpha = schedule.alpha[t]
    alpha_bar = schedule.alpha_bar[t]
    eps = _predict(model, x_cond, y_t, alpha_bar)
    mean = (y_t - ((1 - alpha) / numpy.sqrt(1 - alpha_bar)) * eps) / numpy.sqrt(alpha)
    return mean + numpy.sqrt(schedule.beta[t]) * z


def _refine(model, x_cond, config, op=None, b=None):
    """
    Shared reverse loop. Without a measurement it is the plain sampler; with one every
    reverse update is followed by a DC correction. The reverse update always runs on
    the real image. Only the DC correction is complex, so the residual contracts by
    exactly (1 - dc_step) and a zero DC step leaves the run bitwise identical to the
    plain one.
    """
    x_cond = as_real_image(x_cond, "condition")
    schedule = config.schedule
    rng = RandomSource(config.seed)
    h, w = x_cond.shape
    y = gaussian_image(rng, h, w)
    trajectory = []
    for t in range(schedule.T, 0, -1):
        z = gaussian_image(rng, h, w) if t > 1 else numpy.zeros((h, w))
        y = reverse_step(model, x_cond, numpy.real(y), t, schedule, z)
        if op is not None:
            y = y.astype(numpy.complex128)
            if config.record_trajectory:
                before = op.residual_norm(y, b)
            y = op.dc_update(y, b, config.dc_step)
            if config.record_trajectory:
                trajectory.append(
                    {"t": t, "residual_before": before, "residual_after": op.residual_norm(y, b)}
                )
    return numpy.real(y), trajectory


def sample_plain(model, x_cond, config):
    y, _ = _refine(model, x_cond, config)
    return y


def sample_dc(model, x_cond, b, config, return_trajectory=False):
    """
    Conditional sampling with a data-consistency correction after every reverse update.

    Returns:
        The final DC-corrected image, plus the per-step residual records if
        return_trajectory is set.
    """
    if not config.enable_dc:
        raise ValueError("sample_dc requires enable_dc")
    x_cond = as_real_image(x_cond, "condition")
    if b.mask.shape != x_cond.shape:
        raise ValueError(
            f"Measurement mask shape {b.mask.shape} does not match condition shape {x_cond.shape}"
        )
    image, trajectory = _refine(model, x_cond, config, MeasurementOp(b.mask), b)
    if return_trajectory:
        return image, trajectory
    return image


def reconstruct(model, b, mask, config, config_echo=None):
    """
    End-to-end reconstruction: zero-filled condition, then the configured sampler.

    Args:
        model: Denoiser network (or noise callable).
        b (KSpaceMeasurement): Measured k-space.
        mask (SamplingMask): Mask the measurement was taken with.
        config (SamplerConfig): Sampler settings.
        config_echo (dict, optional): Effective run config to echo into the report.

    Returns:
        (image, report)
    """
    if mask.shape != b.mask.shape or not numpy.array_equal(mask.keep, b.mask.keep):
        raise ValueError("Measurement was not acquired with the given mask")
    op = MeasurementOp(mask)
    start = time.perf_counter()
    x_cond = op.zero_fill(b)
    if config.enable_dc:
        image, trajectory = sample_dc(model, x_cond, b, config, return_trajectory=True)
    else:
        image, trajectory = sample_plain(model, x_cond, config), []

    report = {
        "config": config_echo if config_echo is not None else config.to_dict(),
        "sampler": config.to_dict(),
        "total_steps": config.schedule.T,
        "wall_time": time.perf_counter() - start,
        "final_residual": op.residual_norm(image, b),
    }
    if config.record_trajectory and config.enable_dc:
        report["residuals"] = trajectory
    return image, report
