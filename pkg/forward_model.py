from dataclasses import dataclass

import numpy

from masks import SamplingMask, mask_from_keep
from numerics import as_complex_image, as_real_image, dft2_centered, idft2_centered


@dataclass
class KSpaceMeasurement:
    """
    Masked single-coil k-space b = A y + e, zero wherever the mask is False.
    """

    kdata: numpy.ndarray
    mask: SamplingMask
    noise_std: float = 0.0

    def __post_init__(self):
        self.kdata = as_complex_image(self.kdata, "k-space")
        if self.kdata.shape != self.mask.shape:
            raise ValueError(
                f"k-space shape {self.kdata.shape} does not match mask shape {self.mask.shape}"
            )
        if numpy.any(self.kdata[~self.mask.keep] != 0):
            raise ValueError("k-space has non-zero entries outside the sampling mask")


class MeasurementOp:
    """
    Single-coil Cartesian MRI operator A = P F (coil sensitivities fixed to identity),
    with F the unitary centered 2D DFT and P the selection by the sampling mask.

    Args:
        mask (SamplingMask or array): Sampling pattern; raw boolean grids are wrapped.
    """

    def __init__(self, mask):
        if not isinstance(mask, SamplingMask):
            mask = mask_from_keep(mask)
        self.mask = mask
        self.keep = mask.keep

    @property
    def shape(self):
        return self.keep.shape

    def _check_shape(self, array, name):
        if array.shape != self.shape:
            raise ValueError(f"{name} shape {array.shape} does not match operator shape {self.shape}")

    def _check_measurement(self, b):
        if b.mask.shape != self.shape:
            raise ValueError(
                f"Measurement mask shape {b.mask.shape} does not match operator shape {self.shape}"
            )

    def apply_A(self, y):
        y = as_complex_image(y)
        self._check_shape(y, "Image")
        return dft2_centered(y) * self.keep

    def apply_A_star(self, k):
        k = as_complex_image(k, "k-space")
        self._check_shape(k, "k-space")
        return idft2_centered(k * self.keep)

    def undersample(self, y_true, noise_std, rng):
        """
        Simulate an acquisition b = A y + e, e circularly symmetric complex Gaussian
        with per-entry standard deviation noise_std on sampled entries only.
        """
        if not noise_std >= 0:
            raise ValueError(f"noise_std should be >= 0, got {noise_std}")
        y_true = as_real_image(y_true, "ground truth")
        kdata = self.apply_A(y_true)
        if noise_std > 0:
            noise = rng.normal((2,) + self.shape) * (noise_std / numpy.sqrt(2))
            kdata = kdata + (noise[0] + 1j * noise[1]) * self.keep
        return KSpaceMeasurement(kdata, self.mask, float(noise_std))

    def zero_fill(self, b):
        """
        Zero-filled reconstruction Re{A* b}, the conditioning image of the denoiser.
        """
        self._check_measurement(b)
        return numpy.real(self.apply_A_star(b.kdata))

    def dc_update(self, y, b, step):
        """
        Data-consistency step y' = y - step * A*(A y - b).

        Complex input stays complex, which keeps the measurement residual contracting
        by exactly (1 - step). Real input returns the real part of the update.
        """
        if not 0 <= step <= 1:
            raise ValueError(f"DC step should be in [0, 1], got {step}")
        self._check_measurement(b)
        correction = self.apply_A_star(self.apply_A(y) - b.kdata)
        if numpy.iscomplexobj(y):
            return y - step * correction
        return as_real_image(y) - step * numpy.real(correction)

    def residual_norm(self, y, b):
        self._check_measurement(b)
        return float(numpy.linalg.norm(self.apply_A(y) - b.kdata))
