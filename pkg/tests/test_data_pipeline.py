import json
import math
import os
import struct

import numpy
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from data_pipeline import (
    DatasetManifest,
    MaskParams,
    PairedDataset,
    PhantomSpec,
    TensorFormatError,
    TensorShapeError,
    TensorTruncatedError,
    build_dataset,
    decode_tensor,
    encode_tensor,
    gen_phantom,
    load_archive,
    load_image_file,
    load_pgm,
    load_tensor,
    save_archive,
    save_pgm,
    save_tensor,
)
from metrics import evaluate_batch
from numerics import RandomSource


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "u1"])
def test_tensor_round_trip_is_bitwise(tmp_path, dtype):
    array = (RandomSource(0).uniform(0, 200, (64, 64))).astype(dtype)
    save_tensor(tmp_path / "x.dmt", array)
    loaded = load_tensor(tmp_path / "x.dmt")
    assert loaded.dtype == array.dtype
    assert_array_equal(loaded, array)


def test_complex_tensor_round_trip(tmp_path):
    rng = RandomSource(1)
    array = rng.normal((8, 6)) + 1j * rng.normal((8, 6))
    save_tensor(tmp_path / "k.dmt", array)
    loaded = load_tensor(tmp_path / "k.dmt")
    assert loaded.dtype == numpy.complex128
    assert_array_equal(loaded, array)


def test_boolean_tensors_are_stored_as_bytes():
    array, _ = decode_tensor(encode_tensor(numpy.eye(3, dtype=bool)))
    assert array.dtype == numpy.uint8
    assert_array_equal(array, numpy.eye(3))


def test_truncated_payload():
    buffer = encode_tensor(numpy.zeros((4, 4)))
    with pytest.raises(TensorTruncatedError):
        decode_tensor(buffer[:-1])
    with pytest.raises(TensorTruncatedError):
        decode_tensor(buffer[:7])


def test_bad_magic_and_unknown_tag():
    buffer = bytearray(encode_tensor(numpy.zeros(3)))
    with pytest.raises(TensorFormatError):
        decode_tensor(b"XXXX" + bytes(buffer[4:]))
    buffer[4] = 9
    with pytest.raises(TensorFormatError):
        decode_tensor(bytes(buffer))


def test_shape_overflow():
    buffer = b"DMT1" + struct.pack("<BB3I", 1, 3, 2 ** 20, 2 ** 20, 2 ** 20)
    with pytest.raises(TensorShapeError):
        decode_tensor(buffer)


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "x.dmt"
    path.write_bytes(encode_tensor(numpy.zeros(2)) + b"\x00")
    with pytest.raises(TensorFormatError):
        load_tensor(path)


def test_archive_round_trip(tmp_path):
    tensors = {"a": numpy.arange(6.0).reshape(2, 3), "b/c": numpy.ones(4, dtype=numpy.float32)}
    save_archive(tmp_path / "x.dmta", tensors, {"step": 3})
    loaded, meta = load_archive(tmp_path / "x.dmta")
    assert list(loaded) == ["a", "b/c"]
    assert_array_equal(loaded["a"], tensors["a"])
    assert loaded["b/c"].dtype == numpy.float32
    assert meta == {"step": 3}


def test_pgm_round_trip(tmp_path):
    image = RandomSource(2).uniform(0, 1, (12, 20))
    image[0, 0], image[0, 1] = 0.0, 1.0
    save_pgm(tmp_path / "x.pgm", image)
    loaded = load_pgm(tmp_path / "x.pgm")
    assert loaded.shape == (12, 20)
    assert numpy.abs(loaded - image).max() <= 0.5 / 255 + 1e-12
    assert_allclose(load_image_file(str(tmp_path / "x.pgm")), loaded)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([0, 255]))
    assert_array_equal(load_pgm(path), [[0.0, 1.0]])


def test_load_image_file_rejects_complex(tmp_path):
    save_tensor(tmp_path / "k.dmt", numpy.ones((4, 4), dtype=complex))
    with pytest.raises(TensorShapeError):
        load_image_file(str(tmp_path / "k.dmt"))


def test_phantom_is_deterministic_and_bounded():
    spec = PhantomSpec(size=64)
    first = gen_phantom(spec, RandomSource(3))
    assert_array_equal(first, gen_phantom(spec, RandomSource(3)))
    assert numpy.any(first != gen_phantom(spec, RandomSource(4)))
    assert first.min() >= 0 and first.max() <= 1
    assert first.shape == (64, 64)


def test_phantom_without_ellipses_has_two_levels():
    image = gen_phantom(PhantomSpec(size=32, ellipse_count=(0, 0)), RandomSource(0))
    assert set(numpy.unique(image)) == {0.0, 0.2, 0.8}
    assert image[0, 0] == 0.0
    assert image[16, 16] == 0.2


def test_phantom_size_is_validated():
    with pytest.raises(ValueError):
        PhantomSpec(size=8)


def small_spec():
    return PhantomSpec(size=16, ellipse_count=(1, 2))


def test_single_pair_dataset(tmp_path):
    manifest = build_dataset(1, small_spec(), MaskParams(acceleration=4, center_fraction=0.125), 0.0, tmp_path, RandomSource(0))
    assert len(manifest.entries) == 1
    for subdir in ("truth", "condition", "mask", "kspace"):
        assert (tmp_path / subdir / "0000.dmt").exists()
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded == manifest
    loaded.validate()


def test_full_mask_condition_equals_truth(tmp_path):
    manifest = build_dataset(2, small_spec(), MaskParams(acceleration=1), 0.0, tmp_path, RandomSource(1))
    for entry in manifest.entries:
        truth = load_tensor(manifest.resolve(entry.truth))
        condition = load_tensor(manifest.resolve(entry.condition))
        assert_allclose(condition, truth, atol=1e-10)


def test_datasets_are_reproducible(tmp_path):
    params = MaskParams(acceleration=4, center_fraction=0.125)
    build_dataset(3, small_spec(), params, 0.01, tmp_path / "a", RandomSource(5))
    build_dataset(3, small_spec(), params, 0.01, tmp_path / "b", RandomSource(5))
    for root, _, files in os.walk(tmp_path / "a"):
        for name in files:
            first = os.path.join(root, name)
            second = first.replace(str(tmp_path / "a"), str(tmp_path / "b"))
            if name == "manifest.json":
                continue
            with open(first, "rb") as f, open(second, "rb") as g:
                assert f.read() == g.read()


def test_invalid_dataset_arguments(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(0, small_spec(), MaskParams(), 0.0, tmp_path / "a", RandomSource(0))
    with pytest.raises(ValueError):
        build_dataset(2, small_spec(), MaskParams(), -0.1, tmp_path / "b", RandomSource(0))
    assert not (tmp_path / "a").exists()
    assert not (tmp_path / "b").exists()


def test_patterns_cycle_across_pairs(tmp_path):
    params = MaskParams(patterns=["g1d", "uniform1d"], acceleration=4, center_fraction=0.125)
    manifest = build_dataset(4, small_spec(), params, 0.0, tmp_path, RandomSource(6))
    assert [entry.pattern for entry in manifest.entries] == ["g1d", "uniform1d", "g1d", "uniform1d"]
    with open(tmp_path / "manifest.json") as f:
        assert json.load(f)["patterns"] == ["g1d", "uniform1d"]


def test_shared_mask(tmp_path):
    params = MaskParams(acceleration=4, center_fraction=0.125, shared_mask=True)
    manifest = build_dataset(3, small_spec(), params, 0.0, tmp_path, RandomSource(7))
    masks = [manifest.load_mask(entry).keep for entry in manifest.entries]
    assert all(numpy.array_equal(mask, masks[0]) for mask in masks)


def test_external_truths(tmp_path):
    truths = [numpy.full((20, 24), 0.5), numpy.zeros((20, 24))]
    manifest = build_dataset(2, small_spec(), MaskParams(acceleration=1), 0.0, tmp_path, RandomSource(8), truths)
    assert manifest.shape == [20, 24]
    with pytest.raises(ValueError):
        build_dataset(2, small_spec(), MaskParams(), 0.0, tmp_path / "x", RandomSource(8), truths[:1])


def test_validate_detects_a_shape_disagreement(tmp_path):
    manifest = build_dataset(1, small_spec(), MaskParams(acceleration=4, center_fraction=0.125), 0.0, tmp_path, RandomSource(9))
    save_tensor(manifest.resolve(manifest.entries[0].condition), numpy.zeros((8, 8)))
    with pytest.raises(TensorShapeError):
        manifest.validate()


def test_paired_dataset_batches(tmp_path):
    manifest = build_dataset(5, small_spec(), MaskParams(acceleration=4, center_fraction=0.125), 0.0, tmp_path, RandomSource(10))
    dataset = PairedDataset.from_manifest(manifest)
    assert len(dataset) == 5
    batches = list(dataset.batches(RandomSource(0), 2))
    assert [len(conditions) for conditions, _ in batches] == [2, 2, 1]
    seen = numpy.concatenate([truths for _, truths in batches])
    assert sorted(map(bytes, seen)) == sorted(map(bytes, dataset.truths))


def test_undersampled_conditions_are_aliased(tmp_path):
    manifest = build_dataset(100, PhantomSpec(), MaskParams(acceleration=8), 0.0, tmp_path, RandomSource(11))
    dataset = PairedDataset.from_manifest(manifest)
    report = evaluate_batch(list(zip(dataset.truths, dataset.conditions)), data_range=1.0)
    assert math.isfinite(report.psnr_mean)
    assert report.psnr_mean < 40
