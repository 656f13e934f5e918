"""Volumes, masks, volume I/O, slice preprocessing and slice sampling."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

HU_MIN = -200.0
HU_MAX = 200.0
SLICE_SIZE = 256
CROP_MARGIN = 1.5

PORTABLE_MAGIC = b"LQCVOL1\n"
PORTABLE_VERSION = 1


class VolumeFormatError(ValueError):
    """A volume file exists but cannot be decoded."""


class EmptySliceError(ValueError):
    """The requested mask slice holds no foreground voxels."""


class EmptyMaskError(ValueError):
    """The mask holds no foreground voxels for the requested class."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def shape(self) -> tuple:
        return tuple(int(s) for s in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.id == other.id
            and self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass
class Mask:
    """Integer label grid (0 = background) or a binary grid for one class."""

    data: np.ndarray
    class_id: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.data.shape}")
        if self.data.dtype.kind not in "biu":
            raise ValueError(f"mask must hold integer labels, got dtype {self.data.dtype}")

    @property
    def shape(self) -> tuple:
        return tuple(int(s) for s in self.data.shape)

    def binary(self, class_id: Optional[int] = None) -> np.ndarray:
        """Boolean grid for ``class_id``; a binary mask returns its own foreground."""
        if class_id is None or (self.class_id is not None and self.class_id == class_id):
            return self.data > 0
        return self.data == class_id

    def explode(self) -> dict:
        """Split a multi-class mask into per-class binary masks."""
        out = {}
        for cid in np.unique(self.data):
            if cid == 0:
                continue
            out[int(cid)] = Mask((self.data == cid).astype(np.uint8), class_id=int(cid), id=self.id)
        return out


@dataclass(frozen=True)
class ClassVocabulary:
    entries: tuple

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [i for i, _ in entries]
        names = [n for _, n in entries]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("class ids must be unique and contiguous from 1")
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ValueError("class names must be unique and non-empty")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "ClassVocabulary":
        return cls(tuple((i + 1, n) for i, n in enumerate(names)))

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list:
        return [n for _, n in self.entries]

    @property
    def ids(self) -> list:
        return [i for i, _ in self.entries]

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id - 1][1]

    def id_of(self, name: str) -> int:
        for i, n in self.entries:
            if n == name:
                return i
        raise KeyError(name)

    def to_json(self) -> list:
        return [{"class_id": i, "class_name": n} for i, n in self.entries]

    @classmethod
    def from_json(cls, rows) -> "ClassVocabulary":
        return cls(tuple((r["class_id"], r["class_name"]) for r in rows))


@dataclass
class SlicePair:
    pixels: np.ndarray
    class_id: int
    z_index: int
    volume_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.shape != (2, SLICE_SIZE, SLICE_SIZE):
            raise ValueError(f"slice pair must be (2, {SLICE_SIZE}, {SLICE_SIZE}), got {px.shape}")
        if px[0].min() < 0.0 or px[0].max() > 1.0:
            raise ValueError("image channel outside [0, 1]")
        if not np.isin(px[1], (0.0, 1.0)).all():
            raise ValueError("mask channel is not binary")


@dataclass
class SubjectMeta:
    volume_id: str
    sex: str = "unknown"
    age: Optional[float] = None

    def __post_init__(self):
        if self.sex not in ("male", "female", "unknown"):
            raise ValueError(f"sex must be male/female/unknown, got {self.sex!r}")
        if self.age is not None and self.age < 0:
            raise ValueError("age must be non-negative")

    def to_json(self) -> dict:
        return {"volume_id": self.volume_id, "sex": self.sex, "age": self.age}

    @classmethod
    def from_json(cls, d: dict) -> "SubjectMeta":
        return cls(d["volume_id"], d.get("sex", "unknown"), d.get("age"))


# ---------------------------------------------------------------------------
# volume I/O


def _portable_bytes(v: Volume) -> bytes:
    data = np.ascontiguousarray(v.data)
    dtype = data.dtype.newbyteorder("<") if data.dtype.itemsize > 1 else data.dtype
    payload = data.astype(dtype, copy=False).tobytes(order="C")
    header = {
        "version": PORTABLE_VERSION,
        "id": v.id,
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": dtype.str,
        "payload_bytes": len(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PORTABLE_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def save_volume(v: Volume, path, format: str = "portable") -> None:
    if format != "portable":
        raise ValueError(f"cannot write format {format!r}; NIfTI is read-only")
    path = Path(path)
    blob = _portable_bytes(v)
    with open(path, "wb") as fh:
        fh.write(blob)


def _load_portable(path: Path) -> Volume:
    raw = path.read_bytes()
    n_magic = len(PORTABLE_MAGIC)
    if raw[:n_magic] != PORTABLE_MAGIC or len(raw) < n_magic + 8:
        raise VolumeFormatError(f"{path}: not a portable volume file")
    (hlen,) = struct.unpack("<Q", raw[n_magic:n_magic + 8])
    start = n_magic + 8
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        dtype = np.dtype(header["dtype"])
        spacing = tuple(header["spacing"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{path}: corrupt header ({exc})") from exc
    payload = raw[start + hlen:]
    expected = math.prod(shape) * dtype.itemsize
    if len(payload) != expected or header.get("payload_bytes", expected) != expected:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return Volume(data, spacing, header.get("id", ""))


def _load_nifti(path: Path) -> Volume:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        arr = np.asarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types
        raise VolumeFormatError(f"{path}: unreadable NIfTI ({exc})") from exc
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a 3D image, got {arr.ndim}D")
    zooms = img.header.get_zooms()[:3]
    # (i, j, k) storage -> (z, y, x)
    data = np.ascontiguousarray(arr.transpose(2, 1, 0))
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
    return Volume(data, spacing, name)


def load_volume(path, format: Optional[str] = None) -> Volume:
    """Read a volume; ``format`` is inferred from the suffix when omitted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    if format is None:
        format = "nifti" if path.name.endswith((".nii", ".nii.gz")) else "portable"
    if format == "nifti":
        return _load_nifti(path)
    if format == "portable":
        return _load_portable(path)
    raise ValueError(f"unknown volume format {format!r}")


def save_mask(mask: Mask, path, spacing=(1.0, 1.0, 1.0)) -> None:
    save_volume(Volume(mask.data, spacing, mask.id), path)


def load_mask(path, class_id: Optional[int] = None) -> Mask:
    v = load_volume(path)
    return Mask(v.data, class_id=class_id, id=v.id)


# ---------------------------------------------------------------------------
# preprocessing


def normalize_hu(image: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(image, dtype=np.float64), HU_MIN, HU_MAX)
    return (clipped - HU_MIN) / (HU_MAX - HU_MIN)


def crop_window(mask2d: np.ndarray, margin: float = CROP_MARGIN):
    """Square crop around the mask's bounding-box centre.

    Returns ``(y0, x0, side)``; the window may extend past the image.
    """
    ys, xs = np.nonzero(mask2d)
    if ys.size == 0:
        raise EmptySliceError("mask slice is empty")
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    side = max(int(math.ceil(margin * max(h, w))), 2)
    cy = (ys.min() + ys.max() + 1) / 2.0
    cx = (xs.min() + xs.max() + 1) / 2.0
    y0 = int(math.floor(cy - side / 2.0))
    x0 = int(math.floor(cx - side / 2.0))
    return y0, x0, side


def _extract_padded(plane: np.ndarray, y0: int, x0: int, side: int) -> np.ndarray:
    out = np.zeros((side, side), dtype=plane.dtype)
    ny, nx = plane.shape
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + side, ny), min(x0 + side, nx)
    if sy1 > sy0 and sx1 > sx0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = plane[sy0:sy1, sx0:sx1]
    return out


def _resize(plane: np.ndarray, size: int, order: int) -> np.ndarray:
    if plane.shape == (size, size):
        return plane.copy()
    factor = size / plane.shape[0]
    out = ndimage.zoom(plane, factor, order=order, mode="nearest", grid_mode=True)
    if out.shape != (size, size):  # zoom rounds the output shape
        out = out[:size, :size]
        out = np.pad(out, ((0, size - out.shape[0]), (0, size - out.shape[1])), mode="edge")
    return out


def preprocess_pair(image: Volume, mask: Mask, z: int, class_id: int, margin: float = CROP_MARGIN) -> SlicePair:
    """Build the 2-channel network input for slice ``z``.

    Raises :class:`EmptySliceError` when the class has no voxels on that slice;
    callers are expected to skip such slices.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
    if not 0 <= z < image.shape[0]:
        raise IndexError(f"slice {z} outside volume with {image.shape[0]} slices")
    m2 = mask.binary(class_id)[z]
    y0, x0, side = crop_window(m2, margin)
    img = normalize_hu(image.data[z])
    img_c = _extract_padded(img, y0, x0, side)
    msk_c = _extract_padded(m2.astype(np.float64), y0, x0, side)
    img_r = np.clip(_resize(img_c, SLICE_SIZE, order=1), 0.0, 1.0)
    msk_r = (_resize(msk_c, SLICE_SIZE, order=0) > 0.5).astype(np.float32)
    pixels = np.stack([img_r.astype(np.float32), msk_r])
    return SlicePair(pixels, int(class_id), int(z), image.id)


def nonempty_slices(mask: Mask, class_id: Optional[int] = None) -> np.ndarray:
    fg = mask.binary(class_id)
    return np.flatnonzero(fg.reshape(fg.shape[0], -1).any(axis=1))


def sample_slices(mask: Mask, class_id: Optional[int], k: int = 10) -> list:
    """Pick ``k`` evenly spaced non-empty slices, endpoints included."""
    if k < 1:
        raise ValueError("k must be >= 1")
    zs = nonempty_slices(mask, class_id)
    if zs.size == 0:
        raise EmptyMaskError(f"mask {mask.id!r} is empty for class {class_id}")
    n = zs.size
    if n <= k:
        return [int(z) for z in zs]
    if k == 1:
        pos = [math.floor((n - 1) / 2.0 + 0.5)]
    else:
        pos = np.floor(np.linspace(0, n - 1, k) + 0.5).astype(int)
    return sorted({int(zs[p]) for p in pos})
