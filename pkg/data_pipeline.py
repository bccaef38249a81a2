import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy

from forward_model import KSpaceMeasurement, MeasurementOp
from masks import MaskPattern, SamplingMask, generate_mask, matches_acceleration
from numerics import as_real_image

TENSOR_MAGIC = b"DMT1"
ARCHIVE_MAGIC = b"DMTA"
COMPLEX_FLAG = 0x80
DTYPE_TAGS = {0: numpy.dtype("<f4"), 1: numpy.dtype("<f8"), 2: numpy.dtype("u1")}
MAX_ELEMENTS = 2 ** 36


class TensorFileError(Exception):
    pass


class TensorFormatError(TensorFileError):
    """Bad magic bytes, unknown dtype tag or malformed header."""


class TensorTruncatedError(TensorFileError):
    """File shorter than its header declares."""


class TensorShapeError(TensorFileError):
    """Rank or dimensions out of range, or shape disagreeing with its consumer."""


##################################
######### Tensor format ##########


def _dtype_tag(dtype):
    for tag, tag_dtype in DTYPE_TAGS.items():
        if dtype.kind == tag_dtype.kind and dtype.itemsize == tag_dtype.itemsize:
            return tag
    raise TensorFormatError(f"dtype {dtype} has no DMT1 tag")


def encode_tensor(tensor):
    """
    DMT1 record: magic, u8 dtype tag (0x80 set for complex), u8 rank, rank x u32 LE
    dimensions, then the row-major LE payload (real part then imaginary part if complex).
    """
    array = numpy.asarray(tensor)
    if array.dtype == bool:
        array = array.astype(numpy.uint8)
    is_complex = numpy.iscomplexobj(array)
    if is_complex:
        parts = (array.real, array.imag)
        tag = _dtype_tag(array.real.dtype)
    else:
        parts = (array,)
        tag = _dtype_tag(array.dtype)
    if array.ndim > 255 or any(dim > 0xFFFFFFFF for dim in array.shape):
        raise TensorShapeError(f"Shape {array.shape} does not fit a DMT1 header")
    header = TENSOR_MAGIC + struct.pack(
        f"<BB{array.ndim}I", tag | (COMPLEX_FLAG if is_complex else 0), array.ndim, *array.shape
    )
    payload = b"".join(
        numpy.ascontiguousarray(part, dtype=DTYPE_TAGS[tag]).tobytes() for part in parts
    )
    return header + payload


def decode_tensor(buffer, offset=0):
    """
    Parse one DMT1 record starting at offset.

    Returns:
        (array, offset just past the record)
    """
    head = bytes(buffer[offset : offset + 4])
    if head != TENSOR_MAGIC:
        if len(head) < 4 and TENSOR_MAGIC.startswith(head):
            raise TensorTruncatedError("File ends inside the DMT1 magic")
        raise TensorFormatError(f"Bad magic bytes {head!r}, expected {TENSOR_MAGIC!r}")
    offset += 4
    if len(buffer) < offset + 2:
        raise TensorTruncatedError("File ends inside the DMT1 header")
    dtype_byte, rank = struct.unpack_from("<BB", buffer, offset)
    offset += 2
    tag = dtype_byte & ~COMPLEX_FLAG
    is_complex = bool(dtype_byte & COMPLEX_FLAG)
    if tag not in DTYPE_TAGS:
        raise TensorFormatError(f"Unknown dtype tag {tag}")
    if len(buffer) < offset + 4 * rank:
        raise TensorTruncatedError("File ends inside the DMT1 dimensions")
    shape = struct.unpack_from(f"<{rank}I", buffer, offset)
    offset += 4 * rank

    count = math.prod(shape)
    if count > MAX_ELEMENTS:
        raise TensorShapeError(f"Shape {shape} overflows the {MAX_ELEMENTS} element limit")
    dtype = DTYPE_TAGS[tag]
    part_bytes = count * dtype.itemsize
    num_parts = 2 if is_complex else 1
    if len(buffer) < offset + num_parts * part_bytes:
        raise TensorTruncatedError(
            f"Payload has {len(buffer) - offset} bytes, header declares {num_parts * part_bytes}"
        )
    parts = []
    for _ in range(num_parts):
        part = numpy.frombuffer(buffer, dtype=dtype, count=count, offset=offset)
        parts.append(part.reshape(shape).astype(dtype.newbyteorder("=")))
        offset += part_bytes
    if is_complex:
        array = numpy.empty(shape, dtype=numpy.result_type(parts[0].dtype, numpy.complex64))
        array.real = parts[0]
        array.imag = parts[1]
    else:
        array = parts[0]
    return array, offset


def save_tensor(path, tensor):
    with open(path, "wb") as f:
        f.write(encode_tensor(tensor))


def load_tensor(path):
    with open(path, "rb") as f:
        buffer = f.read()
    array, offset = decode_tensor(buffer)
    if offset != len(buffer):
        raise TensorFormatError(f"{len(buffer) - offset} trailing bytes after the DMT1 record")
    return array


def save_archive(path, tensors, meta=None):
    """
    DMTA archive: magic, u32 LE header length, JSON header {"names", "meta"}, then
    one DMT1 record per name in order.
    """
    names = list(tensors)
    header = json.dumps({"names": names, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC + struct.pack("<I", len(header)) + header)
        for name in names:
            f.write(encode_tensor(tensors[name]))


def load_archive(path):
    """
    Returns:
        (dict of name to array in stored order, meta dict)
    """
    with open(path, "rb") as f:
        buffer = f.read()
    if buffer[:4] != ARCHIVE_MAGIC:
        raise TensorFormatError(f"Bad archive magic {buffer[:4]!r}, expected {ARCHIVE_MAGIC!r}")
    if len(buffer) < 8:
        raise TensorTruncatedError("File ends inside the archive header length")
    (header_length,) = struct.unpack_from("<I", buffer, 4)
    if len(buffer) < 8 + header_length:
        raise TensorTruncatedError("File ends inside the archive header")
    try:
        header = json.loads(buffer[8 : 8 + header_length].decode("utf-8"))
        names, meta = header["names"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise TensorFormatError(f"Malformed archive header: {err}") from err
    offset = 8 + header_length
    tensors = {}
    for name in names:
        tensors[name], offset = decode_tensor(buffer, offset)
    if offset != len(buffer):
        raise TensorFormatError(f"{len(buffer) - offset} trailing bytes after the archive records")
    return tensors, meta


##################################
############## PGM ###############


def save_pgm(path, image):
    """
    8-bit binary PGM, min-max normalized per image.
    """
    image = as_real_image(image)
    low, high = image.min(), image.max()
    scaled = (image - low) / (high - low) if high > low else numpy.zeros_like(image)
    pixels = numpy.round(scaled * 255).astype(numpy.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def _pgm_tokens(buffer, count):
    tokens = []
    index = 0
    while len(tokens) < count:
        while index < len(buffer) and buffer[index : index + 1].isspace():
            index += 1
        if buffer[index : index + 1] == b"#":
            while index < len(buffer) and buffer[index : index + 1] not in (b"\n", b"\r"):
                index += 1
            continue
        start = index
        while index < len(buffer) and not buffer[index : index + 1].isspace():
            index += 1
        if start == index:
            raise TensorTruncatedError("File ends inside the PGM header")
        tokens.append(buffer[start:index])
    # Exactly one whitespace byte separates the header from the raster
    return tokens, index + 1


def load_pgm(path):
    """
    Read an 8-bit binary PGM as a float image in [0, 1].
    """
    with open(path, "rb") as f:
        buffer = f.read()
    if buffer[:2] != b"P5":
        raise TensorFormatError(f"Bad PGM magic {buffer[:2]!r}, expected b'P5'")
    (_, width, height, maxval), offset = _pgm_tokens(buffer, 4)
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as err:
        raise TensorFormatError(f"Malformed PGM header: {err}") from err
    if not 0 < maxval < 256:
        raise TensorFormatError(f"Only 8-bit PGM is supported, got maxval {maxval}")
    if len(buffer) < offset + width * height:
        raise TensorTruncatedError(
            f"PGM raster has {len(buffer) - offset} bytes, header declares {width * height}"
        )
    pixels = numpy.frombuffer(buffer, dtype=numpy.uint8, count=width * height, offset=offset)
    return pixels.reshape(height, width).astype(numpy.float64) / maxval


def load_image_file(path):
    """
    Load a RealImage from a PGM raster or a real 2D DMT1 tensor.
    """
    if str(path).lower().endswith(".pgm"):
        return load_pgm(path)
    array = load_tensor(path)
    if numpy.iscomplexobj(array):
        raise TensorShapeError(f"{path} holds a complex tensor, expected a real image")
    if array.ndim != 2:
        raise TensorShapeError(f"{path} holds a rank {array.ndim} tensor, expected a 2D image")
    return as_real_image(array, str(path))


##################################
############ Phantoms ############


@dataclass
class PhantomSpec:
    size: int = 64  # Square grid size
    ellipse_count: tuple = (4, 8)  # Inclusive range of interior ellipses
    intensity: tuple = (0.1, 0.5)  # Range of the intensity added by each ellipse
    ring_intensity: float = 0.8  # Skull-like bounding ring
    tissue_intensity: float = 0.2  # Background inside the ring
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"Phantom size should be >= 16, got {self.size}")
        low, high = self.ellipse_count
        if not 0 <= low <= high:
            raise ValueError(f"Invalid ellipse_count range {self.ellipse_count}")
        if not self.intensity[0] <= self.intensity[1]:
            raise ValueError(f"Invalid intensity range {self.intensity}")


def _ellipse(xx, yy, x0, y0, a, b, theta):
    cos, sin = numpy.cos(theta), numpy.sin(theta)
    u = (xx - x0) * cos + (yy - y0) * sin
    v = (xx - x0) * sin - (yy - y0) * cos
    return (u / a) ** 2 + (v / b) ** 2 <= 1


def gen_phantom(spec, rng):
    """
    Random ellipse phantom inside a bounding ring, clipped to [0, 1].
    """
    coords = numpy.linspace(-1, 1, spec.size)
    xx, yy = numpy.meshgrid(coords, coords)
    outer = _ellipse(xx, yy, 0, 0, 0.85, 0.95, 0)
    inner = _ellipse(xx, yy, 0, 0, 0.78, 0.88, 0)

    image = numpy.zeros((spec.size, spec.size))
    image[outer] = spec.ring_intensity
    image[inner] = spec.tissue_intensity
    count = int(rng.integers(spec.ellipse_count[0], spec.ellipse_count[1] + 1))
    for _ in range(count):
        x0, y0 = rng.uniform(-0.45, 0.45, 2)
        a, b = rng.uniform(0.05, 0.3, 2)
        theta = rng.uniform(0, numpy.pi)
        value = rng.uniform(spec.intensity[0], spec.intensity[1])
        image[_ellipse(xx, yy, x0, y0, a, b, theta) & inner] += value
    return numpy.clip(image, 0.0, 1.0)


##################################
############ Datasets ############


@dataclass
class MaskParams:
    patterns: list = field(default_factory=lambda: ["g1d"])  # Cycled across the pairs
    acceleration: float = 8.0
    center_fraction: float = 0.04
    g1d_sigma_fraction: float = 1 / 6
    g2d_sigma_fraction: float = 1 / 6
    poisson_density_slope: float = 2.0
    poisson_tolerance: float = 0.1
    poisson_max_attempts: int = 40
    shared_mask: bool = False  # One mask for every pair instead of a fresh seed per pair

    def __post_init__(self):
        if not self.patterns:
            raise ValueError("At least one mask pattern is required")
        self.patterns = [MaskPattern(pattern).value for pattern in self.patterns]

    @classmethod
    def from_config(cls, config):
        return cls(
            list(config.patterns),
            config.acceleration,
            config.center_fraction,
            config.g1d_sigma_fraction,
            config.g2d_sigma_fraction,
            config.poisson_density_slope,
            config.poisson_tolerance,
            config.poisson_max_attempts,
            config.shared_mask,
        )


@dataclass
class DatasetEntry:
    name: str
    truth: str
    condition: str
    mask: str
    kspace: str
    pattern: str
    mask_seed: int


@dataclass
class DatasetManifest:
    """
    Paired dataset index. Entry paths are relative to the manifest directory.
    """

    entries: list
    patterns: list
    acceleration: float
    noise_std: float
    seed: int
    shape: list
    center_fraction: float
    root: str = field(default=".", compare=False)

    def resolve(self, relative_path):
        return os.path.join(self.root, relative_path)

    def to_dict(self):
        content = asdict(self)
        content.pop("root")
        return content

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            content = json.load(f)
        content["entries"] = [DatasetEntry(**entry) for entry in content["entries"]]
        return cls(**content, root=os.path.dirname(os.path.abspath(path)))

    def load_mask(self, entry):
        keep = load_tensor(self.resolve(entry.mask)).astype(bool)
        return SamplingMask(
            keep, MaskPattern(entry.pattern), self.acceleration, entry.mask_seed, self.center_fraction
        )

    def load_measurement(self, entry):
        mask = self.load_mask(entry)
        return KSpaceMeasurement(load_tensor(self.resolve(entry.kspace)), mask, self.noise_std)

    def validate(self):
        """
        Check that every referenced file parses, shapes agree and masks honor the
        declared acceleration. Raises TensorShapeError or ValueError on the first problem.
        """
        for entry in self.entries:
            truth = load_image_file(self.resolve(entry.truth))
            condition = load_image_file(self.resolve(entry.condition))
            measurement = self.load_measurement(entry)
            if not truth.shape == condition.shape == measurement.mask.shape:
                raise TensorShapeError(
                    f"Entry {entry.name}: truth {truth.shape}, condition {condition.shape}, "
                    f"mask {measurement.mask.shape} disagree"
                )
            if not matches_acceleration(measurement.mask):
                raise ValueError(
                    f"Entry {entry.name}: mask does not match acceleration {self.acceleration}"
                )


def build_dataset(n, spec, mask_params, noise_std, out_dir, rng, truths=None):
    """
    Generate n (zero-filled condition, ground truth) pairs and their acquisitions.

    Writes out_dir/{truth,condition,mask,kspace}/NNNN.dmt and out_dir/manifest.json.
    Every pair draws from its own child of rng, so the dataset depends only on the
    arguments.

    Args:
        truths (list, optional): Ground-truth images (e.g. loaded MR slices) used
            instead of phantoms; n must equal their count.

    Returns:
        DatasetManifest
    """
    if n < 1:
        raise ValueError(f"Dataset size should be >= 1, got {n}")
    if not noise_std >= 0:
        raise ValueError(f"noise_std should be >= 0, got {noise_std}")
    if truths is not None:
        truths = [as_real_image(truth, "ground truth") for truth in truths]
        if len(truths) != n:
            raise ValueError(f"Expected {n} ground-truth images, got {len(truths)}")
        shape = truths[0].shape
        if any(truth.shape != shape for truth in truths):
            raise ValueError("Ground-truth images should all share one shape")
    else:
        shape = (spec.size, spec.size)
    subdirs = ("truth", "condition", "mask", "kspace")
    for subdir in subdirs:
        os.makedirs(os.path.join(out_dir, subdir), exist_ok=True)

    shared_seed = rng.derive_seed()
    shared_mask = None
    if mask_params.shared_mask:
        shared_mask = generate_mask(
            mask_params.patterns[0], *shape, mask_params.acceleration, shared_seed, mask_params
        )

    entries = []
    for index, item_rng in enumerate(rng.spawn(n)):
        phantom_rng, noise_rng, mask_rng = item_rng.spawn(3)
        truth = truths[index] if truths is not None else gen_phantom(spec, phantom_rng)
        if shared_mask is not None:
            mask = shared_mask
        else:
            pattern = mask_params.patterns[index % len(mask_params.patterns)]
            mask = generate_mask(
                pattern, *shape, mask_params.acceleration, mask_rng.seed, mask_params
            )
        op = MeasurementOp(mask)
        measurement = op.undersample(truth, noise_std, noise_rng)
        condition = op.zero_fill(measurement)

        name = f"{index:04d}"
        paths = {subdir: os.path.join(subdir, f"{name}.dmt") for subdir in subdirs}
        save_tensor(os.path.join(out_dir, paths["truth"]), truth)
        save_tensor(os.path.join(out_dir, paths["condition"]), condition)
        save_tensor(os.path.join(out_dir, paths["mask"]), mask.keep)
        save_tensor(os.path.join(out_dir, paths["kspace"]), measurement.kdata)
        entries.append(DatasetEntry(name, pattern=mask.pattern.value, mask_seed=mask.seed, **paths))

    manifest = DatasetManifest(
        entries,
        list(mask_params.patterns),
        float(mask_params.acceleration),
        float(noise_std),
        rng.seed,
        list(shape),
        mask_params.center_fraction,
        root=os.path.abspath(out_dir),
    )
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


class PairedDataset:
    """
    In-memory (condition, truth) pairs, stacked as (n, h, w) arrays.
    """

    def __init__(self, conditions, truths):
        self.conditions = numpy.asarray(conditions, dtype=numpy.float64)
        self.truths = numpy.asarray(truths, dtype=numpy.float64)
        if self.conditions.shape != self.truths.shape:
            raise ValueError(
                f"Conditions {self.conditions.shape} and truths {self.truths.shape} should match"
            )

    @classmethod
    def from_manifest(cls, manifest):
        if not manifest.entries:
            return cls(numpy.zeros((0, 1, 1)), numpy.zeros((0, 1, 1)))
        conditions = [load_image_file(manifest.resolve(entry.condition)) for entry in manifest.entries]
        truths = [load_image_file(manifest.resolve(entry.truth)) for entry in manifest.entries]
        return cls(numpy.stack(conditions), numpy.stack(truths))

    def __len__(self):
        return len(self.truths)

    def batches(self, rng, batch_size):
        """
        Yield shuffled (conditions, truths) batches covering the dataset once.
        """
        order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            index = order[start : start + batch_size]
            yield self.conditions[index], self.truths[index]
