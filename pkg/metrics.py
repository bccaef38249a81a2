import math
from dataclasses import dataclass, field

import numpy
from skimage.metrics import mean_squared_error, structural_similarity

from numerics import as_real_image

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_GAUSSIAN_SIGMA = 1.5


def _prepare(ref, test):
    ref = as_real_image(ref, "reference")
    test = as_real_image(test, "test image")
    if ref.shape != test.shape:
        raise ValueError(f"Reference shape {ref.shape} does not match test shape {test.shape}")
    return ref, test


def _data_range(ref, data_range):
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError(f"data_range should be > 0, got {data_range}")
    return data_range


def psnr(ref, test, data_range=None):
    """
    Peak signal-to-noise ratio in dB, math.inf when the images are identical.

    data_range defaults to the reference max - min.
    """
    ref, test = _prepare(ref, test)
    data_range = _data_range(ref, data_range)
    mse = mean_squared_error(ref, test)
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)


def ssim(ref, test, data_range=None, win_size=7, gaussian_weights=False):
    """
    Mean structural similarity with K1 = 0.01, K2 = 0.03, over a uniform
    win_size window or an 11x11 Gaussian (sigma 1.5) window.
    """
    ref, test = _prepare(ref, test)
    data_range = _data_range(ref, data_range)
    if gaussian_weights:
        win_size = 11
    if min(ref.shape) < win_size:
        raise ValueError(f"Images {ref.shape} are smaller than the {win_size}x{win_size} SSIM window")
    if gaussian_weights:
        value = structural_similarity(
            ref,
            test,
            data_range=data_range,
            gaussian_weights=True,
            sigma=SSIM_GAUSSIAN_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    else:
        value = structural_similarity(
            ref, test, data_range=data_range, win_size=win_size, K1=SSIM_K1, K2=SSIM_K2
        )
    return float(value)


def _aggregate(values):
    values = numpy.asarray(values, dtype=numpy.float64)
    if numpy.all(values == values[0]):
        # Covers all-infinite PSNR series
        return float(values[0]), 0.0
    return float(numpy.mean(values)), float(numpy.std(values))


@dataclass
class MetricReport:
    """
    Per image PSNR / SSIM with mean and population standard deviation.
    """

    names: list
    psnr: list
    ssim: list
    psnr_mean: float = field(init=False)
    psnr_std: float = field(init=False)
    ssim_mean: float = field(init=False)
    ssim_std: float = field(init=False)

    def __post_init__(self):
        if not self.psnr or len(self.psnr) != len(self.ssim) or len(self.names) != len(self.psnr):
            raise ValueError("MetricReport needs one name, PSNR and SSIM per image")
        self.psnr_mean, self.psnr_std = _aggregate(self.psnr)
        self.ssim_mean, self.ssim_std = _aggregate(self.ssim)

    @property
    def count(self):
        return len(self.psnr)

    def to_dict(self):
        return {
            "count": self.count,
            "psnr": {"mean": self.psnr_mean, "std": self.psnr_std},
            "ssim": {"mean": self.ssim_mean, "std": self.ssim_std},
            "images": [
                {"name": name, "psnr": p, "ssim": s}
                for name, p, s in zip(self.names, self.psnr, self.ssim)
            ],
        }

    def summary(self):
        return (
            f"PSNR {self.psnr_mean:.2f} ± {self.psnr_std:.2f} dB, "
            f"SSIM {self.ssim_mean:.4f} ± {self.ssim_std:.4f} (n = {self.count})"
        )


def evaluate_batch(pairs, data_range=None, win_size=7, gaussian_weights=False, names=None):
    """
    Score (reference, test) pairs.

    Args:
        pairs: Sequence of (reference, test) images.
        data_range (float, optional): Shared dynamic range, per reference max - min if None.
        names (list, optional): Label per pair, defaults to the pair index.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_batch needs at least one pair")
    if names is None:
        names = [str(i) for i in range(len(pairs))]
    psnrs = [psnr(ref, test, data_range) for ref, test in pairs]
    ssims = [ssim(ref, test, data_range, win_size, gaussian_weights) for ref, test in pairs]
    return MetricReport(list(names), psnrs, ssims)
