"""Exact overlap metrics, mask degradations and the synthetic training corpus.

The corpus stands in for harvesting pseudo labels from segmentation-model
checkpoints: phantom CT-like volumes with exact per-class ground truth are
degraded along severity ladders, and each degraded mask is stored with its
exact DSC against the ground truth.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import ClassVocabulary, Mask, SubjectMeta, Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
DEGRADATION_KINDS = ("erode", "dilate", "drop_component", "translate", "merge_neighbor")

# face-adjacent (6-connected) structuring element
STRUCTURE_6 = ndimage.generate_binary_structure(3, 1)


def _as_bool(m) -> np.ndarray:
    if isinstance(m, Mask):
        return m.binary()
    return np.asarray(m).astype(bool)


def dsc(a, b) -> float:
    """Dice coefficient between two binary masks.

    Both empty gives 1.0; exactly one empty gives 0.0.
    """
    a = _as_bool(a)
    b = _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = int(np.count_nonzero(a))
    nb = int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


def _surface(m: np.ndarray) -> np.ndarray:
    return m & ~ndimage.binary_erosion(m, structure=STRUCTURE_6, border_value=0)


def nsd(a, b, tolerance: float, spacing=(1.0, 1.0, 1.0)) -> float:
    """Normalized surface distance (symmetric boundary agreement within ``tolerance`` mm)."""
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    a = _as_bool(a)
    b = _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sa, sb = _surface(a), _surface(b)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    # distance from every voxel to the nearest surface voxel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    hits = np.count_nonzero(dist_to_b[sa] <= tolerance) + np.count_nonzero(dist_to_a[sb] <= tolerance)
    return hits / (na + nb)


# ---------------------------------------------------------------------------
# degradations


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    magnitude: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if int(self.magnitude) != self.magnitude or self.magnitude < 0:
            raise ValueError("magnitude must be a non-negative integer")

    def to_json(self) -> dict:
        return {"kind": self.kind, "magnitude": int(self.magnitude), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, d) -> "DegradationSpec":
        return cls(d["kind"], int(d.get("magnitude", 0)), int(d.get("seed", 0)))


def _shift(m: np.ndarray, axis: int, offset: int) -> np.ndarray:
    out = np.zeros_like(m)
    n = m.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if offset >= 0:
        src[axis] = slice(0, n - offset)
        dst[axis] = slice(offset, n)
    else:
        src[axis] = slice(-offset, n)
        dst[axis] = slice(0, n + offset)
    out[tuple(dst)] = m[tuple(src)]
    return out


def _drop_components(m: np.ndarray, count: int) -> np.ndarray:
    labels, n = ndimage.label(m, structure=STRUCTURE_6)
    if n == 0:
        return m.copy()
    sizes = np.bincount(labels.ravel())[1:]
    # smallest first, ties by label order
    order = sorted(range(n), key=lambda i: (sizes[i], i))
    drop = np.array(order[:count], dtype=int) + 1
    return m & ~np.isin(labels, drop)


def _blob(shape, center, radius: float) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return d2 <= radius ** 2


def _merge_neighbor(m: np.ndarray, magnitude: int, rng: np.random.Generator, context) -> np.ndarray:
    if not m.any():
        return m.copy()
    if context is not None:
        ctx = _as_bool(context) & ~m
        reach = ndimage.binary_dilation(m, structure=STRUCTURE_6, iterations=magnitude)
        labels, n = ndimage.label(ctx, structure=STRUCTURE_6)
        touching = sorted(set(np.unique(labels[reach & ctx])) - {0})
        if touching:
            pick = touching[int(rng.integers(len(touching)))]
            return m | (labels == pick)
    # no neighbouring structure: attach a synthetic blob at a boundary voxel
    surface = np.argwhere(_surface(m))
    centre = surface[int(rng.integers(len(surface)))]
    return m | _blob(m.shape, centre, float(magnitude))


def degrade(mask, spec: DegradationSpec, context=None) -> Mask:
    """Apply one degradation; deterministic in ``(mask, spec, context)``.

    ``context`` (optional) marks other structures in the volume; ``merge_neighbor``
    prefers to swallow one of those that lies within ``magnitude`` voxels.
    """
    if not isinstance(spec, DegradationSpec):
        raise TypeError("spec must be a DegradationSpec")
    m = _as_bool(mask)
    class_id = mask.class_id if isinstance(mask, Mask) else None
    mid = mask.id if isinstance(mask, Mask) else ""
    k = int(spec.magnitude)
    rng = np.random.default_rng(spec.seed)
    if k == 0:
        out = m.copy()
    elif spec.kind == "erode":
        out = ndimage.binary_erosion(m, structure=STRUCTURE_6, iterations=k, border_value=0)
    elif spec.kind == "dilate":
        out = ndimage.binary_dilation(m, structure=STRUCTURE_6, iterations=k)
    elif spec.kind == "drop_component":
        out = _drop_components(m, k)
    elif spec.kind == "translate":
        axis = int(rng.integers(3))
        sign = 1 if rng.integers(2) else -1
        out = _shift(m, axis, sign * k)
    elif spec.kind == "merge_neighbor":
        out = _merge_neighbor(m, k, rng, context)
    else:  # pragma: no cover - guarded by DegradationSpec
        raise ValueError(f"unknown degradation kind {spec.kind!r}")
    return Mask(out.astype(np.uint8), class_id=class_id, id=mid)


# ---------------------------------------------------------------------------
# phantoms

DEFAULT_CLASSES = ("liver", "spleen", "kidney", "pancreas", "gallbladder")

# per-class intensity signature (HU mean), shape family and component count
_SIGNATURES = (
    (60.0, "ellipsoid", 1),
    (150.0, "box", 1),
    (-140.0, "ellipsoid", 2),
    (100.0, "box", 1),
    (-30.0, "ellipsoid", 1),
)


def class_signature(index: int):
    hu, shape, comps = _SIGNATURES[index % len(_SIGNATURES)]
    # extra classes beyond the table get shifted bands
    hu = hu + 23.0 * (index // len(_SIGNATURES))
    return hu, shape, comps


def make_phantom(class_ids: Sequence[int], shape=(20, 64, 64), spacing=(2.0, 1.0, 1.0),
                 rng: Optional[np.random.Generator] = None, volume_id: str = ""):
    """Synthesise a CT-like volume with one structure per class.

    Structures sit on a ring so that neighbours touch, which is what makes a
    "mask covers two organs" error possible.
    Returns ``(Volume, Mask)`` where the mask holds class ids.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    nz, ny, nx = shape
    labels = np.zeros(shape, dtype=np.uint8)
    image = rng.normal(-100.0, 15.0, size=shape)
    k = len(class_ids)
    ring = 0.22 * min(ny, nx)
    phase = rng.uniform(0, 2 * np.pi)
    zz, yy, xx = np.ogrid[:nz, :ny, :nx]
    for idx, cid in enumerate(class_ids):
        hu, kind, comps = class_signature(cid - 1)
        ang = phase + 2 * np.pi * idx / max(k, 1) + rng.uniform(-0.15, 0.15)
        cy = ny / 2 + ring * np.sin(ang)
        cx = nx / 2 + ring * np.cos(ang)
        cz = nz / 2 + rng.uniform(-1.5, 1.5)
        rz = rng.uniform(0.28, 0.38) * nz
        ry = rng.uniform(0.11, 0.16) * ny
        rx = rng.uniform(0.11, 0.16) * nx
        region = np.zeros(shape, dtype=bool)
        offsets = [(0.0, 0.0)] if comps == 1 else [(-0.55, -0.55), (0.55, 0.55)]
        scale = 1.0 if comps == 1 else 0.6
        for oy, ox in offsets:
            py, px = cy + oy * ry, cx + ox * rx
            a, b, c = rz * scale + 1, ry * scale, rx * scale
            if kind == "ellipsoid":
                part = ((zz - cz) / a) ** 2 + ((yy - py) / b) ** 2 + ((xx - px) / c) ** 2 <= 1.0
            else:
                part = (np.abs(zz - cz) <= a) & (np.abs(yy - py) <= b * 0.85) & (np.abs(xx - px) <= c * 0.85)
            region |= part
        labels[region] = cid
        image[region] = rng.normal(hu, 12.0, size=int(region.sum()))
    image = np.round(image).astype(np.float32)
    return Volume(image, spacing, volume_id), Mask(labels, id=volume_id)


# ---------------------------------------------------------------------------
# corpus


DEFAULT_LADDER = (
    DegradationSpec("erode", 0),
    DegradationSpec("erode", 1),
    DegradationSpec("erode", 2),
    DegradationSpec("erode", 3),
    DegradationSpec("dilate", 1),
    DegradationSpec("dilate", 2),
    DegradationSpec("translate", 3),
    DegradationSpec("merge_neighbor", 4),
)


@dataclass
class GeneratorConfig:
    classes: tuple = DEFAULT_CLASSES
    n_volumes: int = 20
    ladder: tuple = DEFAULT_LADDER
    shape: tuple = (20, 64, 64)
    spacing: tuple = (2.0, 1.0, 1.0)
    test_fraction: float = 0.2

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "n_volumes": int(self.n_volumes),
            "ladder": [s.to_json() for s in self.ladder],
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "test_fraction": float(self.test_fraction),
        }

    @classmethod
    def from_json(cls, d) -> "GeneratorConfig":
        base = cls()
        return cls(
            classes=tuple(d.get("classes", base.classes)),
            n_volumes=int(d.get("n_volumes", base.n_volumes)),
            ladder=tuple(DegradationSpec.from_json(s) for s in d["ladder"]) if "ladder" in d else base.ladder,
            shape=tuple(d.get("shape", base.shape)),
            spacing=tuple(d.get("spacing", base.spacing)),
            test_fraction=float(d.get("test_fraction", base.test_fraction)),
        )


@dataclass
class CorpusRecord:
    volume_id: str
    class_id: int
    class_name: str
    severity: int
    degradation: dict
    image: str
    mask: str
    ground_truth: str
    actual_dsc: float
    split: str
    subject: dict

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class CorpusManifest:
    records: list
    seed: int
    config: dict
    vocabulary: list = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        by_volume = {}
        for r in self.records:
            if not 0.0 <= r.actual_dsc <= 1.0:
                raise ValueError(f"record dsc {r.actual_dsc} outside [0, 1]")
            if by_volume.setdefault(r.volume_id, r.split) != r.split:
                raise ValueError(f"volume {r.volume_id} appears in more than one split")

    def to_json(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "seed": self.seed,
            "config": self.config,
            "vocabulary": self.vocabulary,
            "records": [r.to_json() for r in self.records],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {d.get('schema_version')!r}")
        recs = [CorpusRecord(**r) for r in d["records"]]
        return cls(recs, d["seed"], d["config"], d.get("vocabulary", []), root=path.parent)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def volume_ids(self, split: Optional[str] = None) -> list:
        seen = []
        for r in self.records:
            if (split is None or r.split == split) and r.volume_id not in seen:
                seen.append(r.volume_id)
        return seen

    def subjects(self) -> dict:
        return {r.volume_id: SubjectMeta.from_json(r.subject) for r in self.records}

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_record(self, rec: CorpusRecord):
        """Return ``(image, degraded_mask, ground_truth_mask)`` for a record."""
        image = load_volume(self.resolve(rec.image))
        mv = load_volume(self.resolve(rec.mask))
        gv = load_volume(self.resolve(rec.ground_truth))
        degraded = Mask(mv.data, class_id=rec.class_id, id=rec.volume_id)
        gt = Mask((gv.data == rec.class_id).astype(np.uint8), class_id=rec.class_id, id=rec.volume_id)
        return image, degraded, gt

    def vocab(self) -> ClassVocabulary:
        return ClassVocabulary.from_json(self.vocabulary)


def _sub_seed(seed: int, *parts) -> int:
    h = hashlib.sha256(repr((seed,) + parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def build_corpus(config: GeneratorConfig, seed: int, out_dir) -> CorpusManifest:
    """Synthesise phantoms, degrade every (volume, class) along the ladder, write all files."""
    if not config.classes:
        raise ValueError("config names no classes")
    if not config.ladder:
        raise ValueError("config has an empty severity ladder")
    if config.n_volumes < 1:
        raise ValueError("config needs at least one volume")
    out_dir = Path(out_dir)
    try:
        for sub in ("images", "labels", "masks"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc

    vocab = ClassVocabulary.from_names(config.classes)
    n_test = int(round(config.n_volumes * config.test_fraction))
    if config.n_volumes > 1:
        n_test = min(max(n_test, 1 if config.test_fraction > 0 else 0), config.n_volumes - 1)
    else:
        n_test = 0
    split_rng = np.random.default_rng(_sub_seed(seed, "split"))
    test_idx = set(split_rng.permutation(config.n_volumes)[:n_test].tolist())

    records = []
    for v in range(config.n_volumes):
        vid = f"vol{v:04d}"
        rng = np.random.default_rng(_sub_seed(seed, "phantom", v))
        image, labels = make_phantom(vocab.ids, config.shape, config.spacing, rng, vid)
        meta_rng = np.random.default_rng(_sub_seed(seed, "meta", v))
        subject = SubjectMeta(vid, "male" if meta_rng.integers(2) else "female",
                              float(meta_rng.integers(18, 90)))
        img_ref = f"images/{vid}.vol"
        lab_ref = f"labels/{vid}.vol"
        save_volume(image, out_dir / img_ref)
        save_volume(Volume(labels.data, config.spacing, vid), out_dir / lab_ref)
        split = "test" if v in test_idx else "train"
        for cid, cname in vocab.entries:
            gt = labels.binary(cid)
            others = (labels.data > 0) & ~gt
            for sev, spec in enumerate(config.ladder):
                spec_v = DegradationSpec(spec.kind, spec.magnitude, _sub_seed(seed, spec.seed, v, cid, sev) % 2**31)
                deg = degrade(Mask(gt.astype(np.uint8), cid, vid), spec_v, context=others)
                mref = f"masks/{vid}_c{cid:03d}_s{sev:02d}.vol"
                save_volume(Volume(deg.data, config.spacing, vid), out_dir / mref)
                records.append(CorpusRecord(
                    volume_id=vid, class_id=cid, class_name=cname, severity=sev,
                    degradation=spec_v.to_json(), image=img_ref, mask=mref,
                    ground_truth=lab_ref, actual_dsc=dsc(deg.data, gt), split=split,
                    subject=subject.to_json(),
                ))
    manifest = CorpusManifest(records, int(seed), config.to_json(), vocab.to_json(), root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def resample_corpus(manifest: CorpusManifest, estimates, m: int, balance_key: str = "sex") -> CorpusManifest:
    """Keep the ``m`` best-estimated volumes, balanced across ``balance_key`` groups.

    Each group contributes ``m // n_groups`` volumes ranked by mean predicted
    DSC (ties by volume id).
    """
    subjects = manifest.subjects()
    preds = {}
    for rec in estimates:
        preds.setdefault(rec.volume_id, []).append(rec.predicted_dsc)
    missing = [v for v in subjects if v not in preds]
    if missing:
        raise ValueError(f"no estimates for volumes {missing[:5]}")
    groups = {}
    for vid, meta in subjects.items():
        key = getattr(meta, balance_key, None)
        if key is None:
            raise ValueError(f"volume {vid} has no {balance_key!r} value")
        groups.setdefault(key, []).append(vid)
    per_group = m // len(groups)
    capacity = len(groups) * min(len(v) for v in groups.values())
    if m > capacity:
        raise ValueError(f"cannot pick {m} volumes balanced over {sorted(groups)}: capacity {capacity}")
    keep = set()
    for key in sorted(groups):
        ranked = sorted(groups[key], key=lambda v: (-float(np.mean(preds[v])), v))
        keep.update(ranked[:per_group])
    out = copy.copy(manifest)
    out.records = [r for r in manifest.records if r.volume_id in keep]
    return out
