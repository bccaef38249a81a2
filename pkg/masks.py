import enum
import math
from dataclasses import dataclass, field

import numpy
from numba import njit
from scipy.optimize import brentq

from numerics import RandomSource


class MaskPattern(str, enum.Enum):
    G1D = "g1d"
    G2D = "g2d"
    UNIFORM1D = "uniform1d"
    POISSON = "poisson"


class MaskGenerationError(RuntimeError):
    def __init__(self, message, achieved_fraction):
        super().__init__(f"{message} (achieved fraction {achieved_fraction:.4f})")
        self.achieved_fraction = achieved_fraction


@dataclass
class SamplingMask:
    """
    Cartesian k-space sampling pattern, centered convention (zero frequency at h // 2, w // 2).

    Attributes:
        keep: Boolean (h, w) grid, True where the frequency is sampled.
        pattern: Generating pattern, None for masks read back from disk.
        acceleration: Requested acceleration factor R.
        seed: Seed used by the generator.
        center_fraction: Fraction of each axis kept fully sampled at the center.
        params: Generator specific values (e.g. Poisson exclusion radius).
    """

    keep: numpy.ndarray
    pattern: MaskPattern = None
    acceleration: float = 1.0
    seed: int = 0
    center_fraction: float = 0.04
    params: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.keep.shape[0]

    @property
    def width(self):
        return self.keep.shape[1]

    @property
    def shape(self):
        return self.keep.shape


def mask_from_keep(keep, pattern=None, seed=0):
    """
    Wrap a raw 0/1 grid (e.g. loaded from a DMT1 file) into a SamplingMask.
    """
    keep = numpy.asarray(keep).astype(bool)
    if keep.ndim != 2:
        raise ValueError(f"Mask should be 2D, got shape {keep.shape}")
    fraction = keep.mean()
    acceleration = 1 / fraction if fraction > 0 else math.inf
    return SamplingMask(keep, pattern, acceleration, seed)


def sampled_fraction(mask):
    keep = mask.keep if isinstance(mask, SamplingMask) else numpy.asarray(mask, dtype=bool)
    return float(numpy.count_nonzero(keep)) / keep.size


def center_count(n, center_fraction):
    """
    Number of always-sampled lines along an axis of length n, rounded up so the
    block sits symmetrically around the center index.
    """
    count = max(1, int(math.ceil(n * center_fraction)))
    if (n - count) % 2:
        count += 1
    return min(count, n)


def center_columns(w, center_fraction):
    cols = numpy.zeros(w, dtype=bool)
    count = center_count(w, center_fraction)
    start = (w - count + 1) // 2
    cols[start : start + count] = True
    return cols


def center_block(h, w, center_fraction):
    rows = center_columns(h, center_fraction)
    cols = center_columns(w, center_fraction)
    return numpy.outer(rows, cols)


def _check_acceleration(acceleration, limit):
    if not acceleration >= 1:
        raise ValueError(f"Acceleration should be >= 1, got {acceleration}")
    if acceleration > limit:
        raise ValueError(f"Acceleration {acceleration} exceeds the number of sampleable lines {limit}")


def gen_g1d(h, w, acceleration, seed, center_fraction=0.04, sigma_fraction=1 / 6):
    """
    Gaussian 1D: full phase-encode columns drawn without replacement with probability
    proportional to a Gaussian profile around the k-space center, on top of the
    center columns. The center counts toward the w / R sampled columns.
    """
    _check_acceleration(acceleration, w)
    rng = RandomSource(seed)
    keep_cols = center_columns(w, center_fraction)
    num_lines = max(0, int(round(w / acceleration)) - int(keep_cols.sum()))
    if num_lines:
        offsets = numpy.arange(w) - w // 2
        pdf = numpy.exp(-0.5 * (offsets / (sigma_fraction * w)) ** 2)
        pdf[keep_cols] = 0
        pdf /= pdf.sum()
        keep_cols[rng.choice(w, num_lines, replace=False, p=pdf)] = True
    keep = numpy.repeat(keep_cols[None, :], h, axis=0)
    return SamplingMask(keep, MaskPattern.G1D, acceleration, seed, center_fraction)


def gen_g2d(h, w, acceleration, seed, center_fraction=0.04, sigma_fraction=1 / 6):
    """
    Gaussian 2D: pointwise Bernoulli sampling with an isotropic Gaussian profile,
    scaled so the expected sampled fraction (center block included) is 1 / R.
    """
    _check_acceleration(acceleration, h * w)
    rng = RandomSource(seed)
    # Drawn before any branching so that, for one seed, a lower R keeps a superset
    uniforms = rng.uniform(size=(h, w))
    center = center_block(h, w, center_fraction)
    outside = ~center
    target = h * w / acceleration - center.sum()

    yy, xx = numpy.meshgrid(
        numpy.arange(h) - h // 2, numpy.arange(w) - w // 2, indexing="ij"
    )
    sigma = sigma_fraction * min(h, w)
    profile = numpy.exp(-(yy ** 2 + xx ** 2) / (2 * sigma ** 2))

    if target <= 0:
        prob = numpy.zeros((h, w))
    elif target >= outside.sum():
        prob = numpy.ones((h, w))
    else:
        scale = brentq(
            lambda c: numpy.minimum(1.0, c * profile[outside]).sum() - target,
            0.0,
            1.0 / profile[outside].min(),
        )
        prob = numpy.minimum(1.0, scale * profile)
    keep = center | (uniforms < prob)
    return SamplingMask(keep, MaskPattern.G2D, acceleration, seed, center_fraction)


def gen_uniform1d(h, w, acceleration, seed, center_fraction=0.04):
    """
    Uniform 1D: every ceil(R)-th column from a random offset, plus the center columns.
    """
    _check_acceleration(acceleration, w)
    rng = RandomSource(seed)
    step = int(math.ceil(acceleration))
    offset = int(rng.integers(0, step))
    keep_cols = center_columns(w, center_fraction)
    keep_cols[offset + step * numpy.arange(w // step)] = True
    keep = numpy.repeat(keep_cols[None, :], h, axis=0)
    return SamplingMask(
        keep, MaskPattern.UNIFORM1D, acceleration, seed, center_fraction, {"offset": offset}
    )


def poisson_radius_map(h, w, exclusion_radius, density_slope):
    """
    Local exclusion radius, growing linearly from exclusion_radius at the k-space
    center to exclusion_radius * (1 + density_slope) at the farthest corner.
    """
    yy, xx = numpy.meshgrid(
        numpy.arange(h) - h // 2, numpy.arange(w) - w // 2, indexing="ij"
    )
    rho = numpy.sqrt(yy ** 2 + xx ** 2)
    return exclusion_radius * (1 + density_slope * rho / max(rho.max(), 1))


@njit(cache=True)
def _throw_darts(order, radius, center):
    h, w = center.shape
    accepted = numpy.zeros((h, w), dtype=numpy.bool_)
    reach = int(math.ceil(radius.max()))
    for index in order:
        r, c = index // w, index % w
        if center[r, c]:
            continue
        free = True
        for y in range(max(0, r - reach), min(h, r + reach + 1)):
            for x in range(max(0, c - reach), min(w, c + reach + 1)):
                if accepted[y, x]:
                    limit = max(radius[r, c], radius[y, x])
                    if (y - r) ** 2 + (x - c) ** 2 < limit * limit:
                        free = False
                        break
            if not free:
                break
        if free:
            accepted[r, c] = True
    return accepted


def gen_poisson(
    h,
    w,
    acceleration,
    seed,
    center_fraction=0.04,
    density_slope=2.0,
    tolerance=0.1,
    max_attempts=40,
):
    """
    Variable-density Poisson-disc: dart throwing over a seeded candidate order where
    two accepted points p, q (outside the center block) satisfy
    |p - q| >= max(r(p), r(q)). The base radius is bisected until the sampled
    fraction is within tolerance * (1 / R) of 1 / R.
    """
    _check_acceleration(acceleration, h * w)
    rng = RandomSource(seed)
    center = center_block(h, w, center_fraction)
    order = rng.permutation(h * w)
    if acceleration == 1:
        return SamplingMask(
            numpy.ones((h, w), dtype=bool), MaskPattern.POISSON, acceleration, seed, center_fraction
        )

    target = 1 / acceleration
    low, high = 0.0, float(max(h, w))
    best = None
    for _ in range(max_attempts):
        exclusion_radius = 0.5 * (low + high)
        radius = poisson_radius_map(h, w, exclusion_radius, density_slope)
        keep = center | _throw_darts(order, radius, center)
        fraction = sampled_fraction(keep)
        if best is None or abs(fraction - target) < abs(best[1] - target):
            best = (keep, fraction, exclusion_radius)
        if abs(fraction - target) <= tolerance * target:
            return SamplingMask(
                keep,
                MaskPattern.POISSON,
                acceleration,
                seed,
                center_fraction,
                {"exclusion_radius": exclusion_radius, "density_slope": density_slope},
            )
        if fraction > target:
            low = exclusion_radius
        else:
            high = exclusion_radius
    raise MaskGenerationError(
        f"Poisson-disc mask did not reach fraction {target:.4f} after {max_attempts} attempts",
        best[1],
    )


def generate_mask(pattern, h, w, acceleration, seed, config=None):
    """
    Dispatch to the generator of a pattern, reading the tunable mask parameters
    (center fraction, profile widths, Poisson density law) from a config if given.
    """
    pattern = MaskPattern(pattern)
    center_fraction = getattr(config, "center_fraction", 0.04)
    if pattern is MaskPattern.G1D:
        return gen_g1d(
            h, w, acceleration, seed, center_fraction, getattr(config, "g1d_sigma_fraction", 1 / 6)
        )
    elif pattern is MaskPattern.G2D:
        return gen_g2d(
            h, w, acceleration, seed, center_fraction, getattr(config, "g2d_sigma_fraction", 1 / 6)
        )
    elif pattern is MaskPattern.UNIFORM1D:
        return gen_uniform1d(h, w, acceleration, seed, center_fraction)
    else:
        return gen_poisson(
            h,
            w,
            acceleration,
            seed,
            center_fraction,
            getattr(config, "poisson_density_slope", 2.0),
            getattr(config, "poisson_tolerance", 0.1),
            getattr(config, "poisson_max_attempts", 40),
        )


def matches_acceleration(mask, tolerance=0.2):
    """
    Whether a generated mask honors its declared acceleration. Uniform 1D is checked
    against its construction (equispaced columns plus center), the other patterns
    against the [(1 - tolerance) / R, (1 + tolerance) / R] fraction band.
    """
    if mask.pattern is MaskPattern.UNIFORM1D:
        step = int(math.ceil(mask.acceleration))
        kept = int(mask.keep[0].sum())
        extra = center_count(mask.width, mask.center_fraction)
        return mask.width // step <= kept <= mask.width // step + extra
    fraction = sampled_fraction(mask)
    if mask.acceleration == 1:
        return fraction == 1.0
    return (1 - tolerance) / mask.acceleration <= fraction <= (1 + tolerance) / mask.acceleration
