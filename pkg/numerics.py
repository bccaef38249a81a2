import numpy

SEED_MODULUS = 2 ** 64


class RandomSource:
    """
    Seeded random source backing every stochastic draw (noise images, mask darts,
    phantom layouts, training noise).

    A source is single-owner: concurrent tasks should each get their own child
    from spawn() rather than share one instance.

    Args:
        seed (int): 64-bit seed, identical seeds give identical draw sequences.
    """

    def __init__(self, seed):
        self.seed = int(seed) % SEED_MODULUS
        self.seed_sequence = numpy.random.SeedSequence(self.seed)
        self.generator = numpy.random.Generator(numpy.random.PCG64(self.seed_sequence))

    def normal(self, shape):
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def spawn(self, n):
        """
        Fork n independent child sources with derived seeds.
        """
        return [
            RandomSource(int(child.generate_state(1, dtype=numpy.uint64)[0]))
            for child in self.seed_sequence.spawn(n)
        ]

    def derive_seed(self):
        return self.spawn(1)[0].seed


def check_finite(array, name="input"):
    if not numpy.all(numpy.isfinite(array)):
        raise ValueError(f"{name} contains non-finite entries")


def as_real_image(data, name="image"):
    """
    Validate and return a RealImage: a finite 2-D float64 array.
    """
    image = numpy.asarray(data, dtype=numpy.float64)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"{name} should be a non-empty 2D grid, got shape {image.shape}")
    check_finite(image, name)
    return image


def as_complex_image(data, name="image"):
    image = numpy.asarray(data, dtype=numpy.complex128)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"{name} should be a non-empty 2D grid, got shape {image.shape}")
    check_finite(image, name)
    return image


def dft2_centered(img):
    """
    Unitary 2D DFT with the zero frequency at the grid center (index h // 2, w // 2).
    """
    img = as_complex_image(img)
    return numpy.fft.fftshift(
        numpy.fft.fft2(numpy.fft.ifftshift(img), norm="ortho")
    )


def idft2_centered(k):
    """
    Exact inverse of dft2_centered.
    """
    k = as_complex_image(k, "k-space")
    return numpy.fft.fftshift(
        numpy.fft.ifft2(numpy.fft.ifftshift(k), norm="ortho")
    )


def gaussian_image(rng, h, w):
    """
    RealImage of i.i.d. standard normal entries drawn from rng.
    """
    if h < 1 or w < 1:
        raise ValueError(f"Image dimensions should be positive, got {h}x{w}")
    return rng.normal((h, w))
