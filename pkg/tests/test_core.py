import hashlib
import struct

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelqc.core import (
    SLICE_SIZE,
    ClassVocabulary,
    EmptyMaskError,
    EmptySliceError,
    Mask,
    SlicePair,
    SubjectMeta,
    Volume,
    VolumeFormatError,
    load_volume,
    preprocess_pair,
    sample_slices,
    save_volume,
)


def _mask_with_extent(z0, z1, nz=60):
    data = np.zeros((nz, 8, 8), dtype=np.uint8)
    data[z0:z1 + 1, 2:5, 2:5] = 1
    return Mask(data, class_id=1)


# -- I/O ----------------------------------------------------------------------


def test_portable_round_trip_is_bit_exact(tmp_path, rng):
    v = Volume(rng.normal(size=(4, 5, 6)).astype(np.float32), (2.5, 0.7, 0.7), "case-01")
    save_volume(v, tmp_path / "a.vol")
    back = load_volume(tmp_path / "a.vol")
    assert back == v
    assert back.shape == (4, 5, 6)
    assert back.data.tobytes() == v.data.tobytes()


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float64, np.bool_])
def test_round_trip_dtypes(tmp_path, rng, dtype):
    v = Volume((rng.random((3, 3, 3)) * 10).astype(dtype), id="x")
    save_volume(v, tmp_path / "b.vol")
    assert load_volume(tmp_path / "b.vol") == v


def test_two_saves_are_byte_identical(tmp_path, rng):
    v = Volume(rng.normal(size=(3, 4, 5)), (1.0, 1.0, 2.0), "same")
    save_volume(v, tmp_path / "1.vol")
    save_volume(v, tmp_path / "2.vol")
    h1 = hashlib.sha256((tmp_path / "1.vol").read_bytes()).hexdigest()
    h2 = hashlib.sha256((tmp_path / "2.vol").read_bytes()).hexdigest()
    assert h1 == h2


def test_load_does_not_clip(tmp_path):
    v = Volume(np.array([[[-3000.0, 5000.0]]]), id="hu")
    save_volume(v, tmp_path / "hu.vol")
    assert load_volume(tmp_path / "hu.vol").data.tolist() == [[[-3000.0, 5000.0]]]


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.vol")


def test_unwritable_location(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((1, 1, 1))), blocker / "v.vol")


def test_corrupt_header(tmp_path):
    p = tmp_path / "bad.vol"
    p.write_bytes(b"LQCVOL1\n" + struct.pack("<Q", 5) + b"{oops" + b"\x00" * 8)
    with pytest.raises(VolumeFormatError):
        load_volume(p)


def test_payload_length_mismatch(tmp_path):
    p = tmp_path / "short.vol"
    save_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32)), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        load_volume(p)


def test_not_a_volume(tmp_path):
    p = tmp_path / "junk.vol"
    p.write_bytes(b"hello world")
    with pytest.raises(VolumeFormatError):
        load_volume(p)


def _raw_nifti_header(path):
    # dim[8] int16 at byte 40, pixdim[8] float32 at byte 76 (NIfTI-1)
    raw = path.read_bytes()
    dims = struct.unpack("<8h", raw[40:56])
    pixdim = struct.unpack("<8f", raw[76:108])
    return dims[1:dims[0] + 1], pixdim[1:dims[0] + 1]


def test_nifti_ingestion(tmp_path, rng):
    arr = rng.integers(-1000, 1000, size=(64, 64, 32)).astype(np.int16)  # (i, j, k)
    img = nib.Nifti1Image(arr, np.diag([1.0, 1.0, 3.0, 1.0]))
    path = tmp_path / "ct.nii"
    nib.save(img, str(path))
    dims, pixdim = _raw_nifti_header(path)
    v = load_volume(path)
    # slice axis (k) first
    assert v.shape == (dims[2], dims[1], dims[0]) == (32, 64, 64)
    assert v.spacing == (pixdim[2], pixdim[1], pixdim[0]) == (3.0, 1.0, 1.0)
    assert v.data[5, 6, 7] == arr[7, 6, 5]
    assert v.id == "ct"


def test_nifti_gz(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    nib.save(nib.Nifti1Image(arr, np.eye(4)), str(tmp_path / "x.nii.gz"))
    v = load_volume(tmp_path / "x.nii.gz")
    assert v.shape == (4, 3, 2)


def test_volume_rejects_bad_spacing():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


# -- types ---------------------------------------------------------------------


def test_vocabulary_invariants():
    vocab = ClassVocabulary.from_names(["liver", "spleen"])
    assert vocab.size == 2 and vocab.id_of("spleen") == 2 and vocab.name_of(1) == "liver"
    with pytest.raises(ValueError):
        ClassVocabulary(((1, "a"), (3, "b")))
    with pytest.raises(ValueError):
        ClassVocabulary.from_names(["a", "a"])
    with pytest.raises(ValueError):
        ClassVocabulary.from_names(["a", ""])


def test_subject_meta_validation():
    with pytest.raises(ValueError):
        SubjectMeta("v", "other")
    with pytest.raises(ValueError):
        SubjectMeta("v", "male", -1)


def test_mask_explode():
    data = np.zeros((2, 3, 3), dtype=np.uint8)
    data[0, 0, 0] = 1
    data[1, 2, 2] = 4
    parts = Mask(data, id="m").explode()
    assert sorted(parts) == [1, 4]
    assert parts[4].data.sum() == 1 and parts[4].class_id == 4


# -- preprocessing -------------------------------------------------------------


def _single_slice(hu, mask2d):
    image = Volume(np.asarray(hu, dtype=np.float32)[None], id="img")
    return image, Mask(np.asarray(mask2d, dtype=np.uint8)[None], class_id=1)


def test_clip_and_scale():
    hu = np.full((20, 20), 300.0)
    hu[:, :10] = -500.0
    m = np.zeros((20, 20))
    m[5:15, 5:15] = 1
    image, mask = _single_slice(hu, m)
    pair = preprocess_pair(image, mask, 0, 1)
    img = pair.pixels[0]
    # far left and far right of the crop keep the two plateaus
    assert img[128, 40] == pytest.approx(0.0)
    assert img[128, 215] == pytest.approx(1.0)
    assert pair.pixels.shape == (2, SLICE_SIZE, SLICE_SIZE)


def test_full_slice_mask_is_centred():
    hu = np.zeros((256, 256))
    m = np.ones((256, 256))
    image, mask = _single_slice(hu, m)
    pair = preprocess_pair(image, mask, 0, 1)
    msk = pair.pixels[1]
    # window side 384 -> the 256 image occupies the middle two thirds
    inner = msk[44:212, 44:212]
    assert inner.min() == 1.0
    assert msk[:40].max() == 0.0 and msk[-40:].max() == 0.0
    assert set(np.unique(msk)) <= {0.0, 1.0}
    assert pair.pixels[0][128, 128] == pytest.approx(0.5)


def test_empty_slice_refused():
    image, mask = _single_slice(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(EmptySliceError):
        preprocess_pair(image, mask, 0, 1)


def test_preprocess_shape_mismatch():
    image = Volume(np.zeros((1, 4, 4)))
    mask = Mask(np.ones((1, 5, 5), dtype=np.uint8), class_id=1)
    with pytest.raises(ValueError):
        preprocess_pair(image, mask, 0, 1)


def test_slice_pair_validation():
    with pytest.raises(ValueError):
        SlicePair(np.zeros((2, 10, 10), dtype=np.float32), 1, 0)
    px = np.zeros((2, SLICE_SIZE, SLICE_SIZE), dtype=np.float32)
    px[1, 0, 0] = 0.5
    with pytest.raises(ValueError):
        SlicePair(px, 1, 0)


@settings(max_examples=30, deadline=None)
@given(
    lo=st.floats(-1e6, 1e6),
    hi=st.floats(-1e6, 1e6),
    y0=st.integers(0, 20),
    x0=st.integers(0, 20),
    h=st.integers(1, 11),
    w=st.integers(1, 11),
)
def test_image_channel_bounded(lo, hi, y0, x0, h, w):
    hu = np.linspace(lo, hi, 32 * 32).reshape(32, 32)
    m = np.zeros((32, 32))
    m[y0:y0 + h, x0:x0 + w] = 1
    image, mask = _single_slice(hu, m)
    pair = preprocess_pair(image, mask, 0, 1)
    assert 0.0 <= pair.pixels[0].min() and pair.pixels[0].max() <= 1.0
    assert pair.pixels[1].sum() > 0


# -- slice sampling ------------------------------------------------------------


def test_sample_ten_of_forty():
    assert sample_slices(_mask_with_extent(10, 49), 1, 10) == [10, 14, 19, 23, 27, 32, 36, 40, 45, 49]


def test_sample_fewer_than_k():
    assert sample_slices(_mask_with_extent(5, 7), 1, 10) == [5, 6, 7]


def test_sample_single_is_midpoint():
    assert sample_slices(_mask_with_extent(10, 49), 1, 1) == [30]


def test_sample_empty_mask():
    with pytest.raises(EmptyMaskError):
        sample_slices(Mask(np.zeros((4, 4, 4), dtype=np.uint8)), 1, 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(1, 15))
def test_sample_invariants(occupied, k):
    data = np.zeros((len(occupied), 3, 3), dtype=np.uint8)
    for z, on in enumerate(occupied):
        if on:
            data[z, 1, 1] = 1
    mask = Mask(data, class_id=1)
    nonempty = [z for z, on in enumerate(occupied) if on]
    if not nonempty:
        with pytest.raises(EmptyMaskError):
            sample_slices(mask, 1, k)
        return
    out = sample_slices(mask, 1, k)
    assert out == sorted(set(out))
    assert set(out) <= set(nonempty)
    assert len(out) == min(k, len(nonempty))
    assert out[0] >= nonempty[0] and out[-1] <= nonempty[-1]
