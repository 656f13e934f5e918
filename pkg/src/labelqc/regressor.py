"""Class-conditioned DSC regressor, its training loop and volume-level inference.

The network scores a 2-channel slice (image, mask).  A vision encoder
produces features ``f``; an MLP on ``[f, condition]`` emits two bounded
positive gates ``w1`` (size of ``f``) and ``w2`` (size of the first head
layer), and the head computes ``sigmoid(g2(w2 * relu(g1(w1 * f))))``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .conditioning import EmbeddingTable, cosine_similarity_matrix
from .core import Mask, Volume, load_volume, preprocess_pair, sample_slices
from .loss import LossConfig, loss_log_line, torch_compositional_loss
from .oracle import CorpusManifest, dsc
from .pairing import optimal_pairs
from .validation import check_slice_batch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class QualityRecord:
    volume_id: str
    class_id: int
    predicted_dsc: float
    actual_dsc: Optional[float] = None
    slice_predictions: list = field(default_factory=list)
    slice_indices: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "class_id": self.class_id,
            "actual_dsc": self.actual_dsc,
            "predicted_dsc": self.predicted_dsc,
            "slice_predictions": list(self.slice_predictions),
            "slice_indices": list(self.slice_indices),
        }

    @classmethod
    def from_json(cls, d) -> "QualityRecord":
        return cls(d["volume_id"], int(d["class_id"]), float(d["predicted_dsc"]), d.get("actual_dsc"),
                   list(d.get("slice_predictions", [])), list(d.get("slice_indices", [])))


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path) -> list:
    with open(path) as fh:
        return [QualityRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# network


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class SmallEncoder(nn.Module):
    """Average-pool stem, four conv blocks, global average pooling."""

    def __init__(self, channels=(16, 32, 64), d_f=128, stem_pool=8):
        super().__init__()
        widths = [2, *channels, d_f]
        layers = [nn.AvgPool2d(stem_pool)] if stem_pool > 1 else []
        layers += [_conv_block(a, b) for a, b in zip(widths[:-1], widths[1:])]
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


def _resnet50_encoder():
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.conv1 = nn.Conv2d(2, 64, kernel_size=7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    return net


class ConditionedQualityNet(nn.Module):
    def __init__(self, d_t: int, conditioned=True, encoder="small", channels=(16, 32, 64),
                 d_f=128, d_g=64, attn_hidden=128, stem_pool=8):
        super().__init__()
        if encoder == "small":
            self.encoder = SmallEncoder(channels, d_f, stem_pool)
        elif encoder == "resnet50":
            self.encoder = _resnet50_encoder()
            d_f = 2048
        else:
            raise ValueError(f"unknown encoder {encoder!r}")
        self.conditioned = conditioned
        self.d_f, self.d_g, self.d_t = d_f, d_g, d_t
        if conditioned:
            self.attention = nn.Sequential(
                nn.Linear(d_f + d_t, attn_hidden),
                nn.ReLU(inplace=True),
                nn.Linear(attn_hidden, d_f + d_g),
            )
        self.g1 = nn.Linear(d_f, d_g)
        self.g2 = nn.Linear(d_g, 1)

    def forward(self, x, cond=None):
        f = self.encoder(x)
        if self.conditioned:
            if cond is None or cond.shape != (f.shape[0], self.d_t):
                raise ValueError(f"condition must be ({f.shape[0]}, {self.d_t})")
            # gates in (0, 2) sit near 1 at initialisation, so conditioning starts close to neutral
            w = 2.0 * torch.sigmoid(self.attention(torch.cat([f, cond], dim=1)))
            w1, w2 = w[:, : self.d_f], w[:, self.d_f:]
            hidden = torch.relu(self.g1(w1 * f))
            out = self.g2(w2 * hidden)
        else:
            out = self.g2(torch.relu(self.g1(f)))
        return torch.sigmoid(out).squeeze(1)


# ---------------------------------------------------------------------------
# estimator


class QualityRegressor(RegressorMixin, BaseEstimator):
    """Predict the DSC of a slice's mask against its unseen ground truth.

    Parameters mirror the training configuration; ``get_params`` is the
    config snapshot stored in checkpoints.  ``embeddings`` supplies the class
    conditions and the similarities used to pair samples for the ranking term.
    """

    def __init__(self, embeddings: Optional[EmbeddingTable] = None, conditioned=True, encoder="small",
                 channels=(16, 32, 64), d_f=128, d_g=64, attn_hidden=128, stem_pool=8,
                 lam=1.0, xi=0.05, lr=1e-3, batch_size=128, epochs=30, seed=0,
                 checkpoint_dir=None, log_path=None):
        self.embeddings = embeddings
        self.conditioned = conditioned
        self.encoder = encoder
        self.channels = channels
        self.d_f = d_f
        self.d_g = d_g
        self.attn_hidden = attn_hidden
        self.stem_pool = stem_pool
        self.lam = lam
        self.xi = xi
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir
        self.log_path = log_path

    # -- helpers --------------------------------------------------------
    def _build(self):
        d_t = self.embeddings.d_t if self.embeddings is not None else 0
        torch.manual_seed(self.seed)
        return ConditionedQualityNet(d_t, self.conditioned, self.encoder, tuple(self.channels),
                                     self.d_f, self.d_g, self.attn_hidden, self.stem_pool)

    def _conditions(self, class_ids, conditions=None):
        if conditions is not None:
            return torch.as_tensor(np.asarray(conditions, dtype=np.float32))
        if not self.conditioned:
            return None
        return torch.as_tensor(self.embeddings.lookup(class_ids).astype(np.float32))

    def _check_embeddings(self, class_ids):
        needs = self.conditioned or self.lam > 0
        if needs and self.embeddings is None:
            raise ValueError("embeddings are required for conditioning or the ranking term")
        if self.embeddings is not None:
            self.embeddings.lookup(np.unique(class_ids))  # raises on a missing class

    def init_untrained(self):
        """Materialise freshly initialised weights without training."""
        self.model_ = self._build()
        self.model_.eval()
        self.loss_log_ = []
        return self

    # -- sklearn API ----------------------------------------------------
    def fit(self, X, y, class_ids):
        X, class_ids, y = check_slice_batch(X, class_ids, y)
        self._check_embeddings(class_ids)
        cfg = LossConfig(self.lam, self.xi)
        model = self._build()
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        rng = np.random.default_rng(self.seed)
        n = X.shape[0]
        log = []
        step = 0
        log_fh = open(self.log_path, "w") if self.log_path else None
        ckpt_dir = Path(self.checkpoint_dir) if self.checkpoint_dir else None
        if ckpt_dir is not None:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        try:
            for epoch in range(self.epochs):
                model.train()
                order = rng.permutation(n)
                for start in range(0, n, self.batch_size):
                    idx = np.sort(order[start:start + self.batch_size])
                    xb = torch.from_numpy(np.ascontiguousarray(X[idx], dtype=np.float32))
                    yb = torch.from_numpy(y[idx].astype(np.float32))
                    if len(idx) < 2:
                        continue  # batch-norm needs two samples
                    pairing = None
                    if cfg.lam > 0:
                        h = cosine_similarity_matrix(self.embeddings.lookup(class_ids[idx]))
                        pairing = optimal_pairs(h)
                    pred = model(xb, self._conditions(class_ids[idx]))
                    if pairing is None:
                        mse = torch.mean((pred - yb) ** 2)
                        loss, rank = mse, torch.zeros(())
                    else:
                        loss, mse, rank = torch_compositional_loss(pred, yb, pairing, cfg)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    row = {"step": step, "epoch": epoch, "mse_term": float(mse.detach()), "rank_term": float(rank.detach()),
                           "lambda": cfg.lam, "xi": cfg.xi, "loss": float(loss.detach())}
                    log.append(row)
                    if log_fh:
                        log_fh.write(loss_log_line(step, row["mse_term"], row["rank_term"], cfg,
                                                   epoch=epoch, loss=row["loss"]) + "\n")
                    step += 1
                self.model_ = model
                if ckpt_dir is not None:
                    save_checkpoint(self, ckpt_dir / f"epoch_{epoch:03d}.npz")
        finally:
            if log_fh:
                log_fh.close()
        model.eval()
        self.model_ = model
        self.loss_log_ = log
        return self

    @torch.no_grad()
    def predict(self, X, class_ids=None, conditions=None, batch_size=256):
        """Predicted DSC per slice pair.

        ``conditions`` overrides the table lookup with explicit condition
        vectors (one row per sample).
        """
        check_is_fitted(self, "model_")
        X = check_slice_batch(X)
        n = X.shape[0]
        if conditions is None and self.conditioned:
            if class_ids is None:
                raise ValueError("class_ids are required for a conditioned model")
            class_ids = np.asarray(class_ids, dtype=int).ravel()
            if class_ids.shape[0] != n:
                raise ValueError(f"{class_ids.shape[0]} class ids for {n} samples")
        model = self.model_
        model.eval()
        out = np.empty(n, dtype=np.float64)
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            xb = torch.from_numpy(np.ascontiguousarray(X[sl], dtype=np.float32))
            cond = None
            if self.conditioned:
                cond = self._conditions(None if class_ids is None else class_ids[sl],
                                        None if conditions is None else np.asarray(conditions)[sl])
            pred = model(xb, cond)
            if not torch.isfinite(pred).all():
                raise FloatingPointError("non-finite prediction")
            out[sl] = pred.numpy()
        return out

    def score(self, X, y, class_ids=None):
        return r2_score(y, self.predict(X, class_ids))

    def mean_training_loss(self, epoch: int) -> float:
        vals = [r["loss"] for r in self.loss_log_ if r["epoch"] == epoch]
        return float(np.mean(vals))


def forward(model: QualityRegressor, pair, cond=None) -> float:
    """Score one :class:`~labelqc.core.SlicePair`; ``cond`` may override the class condition."""
    conditions = None
    if cond is not None:
        vec = getattr(cond, "vector", cond)
        conditions = np.asarray(vec, dtype=np.float32)[None, :]
    return float(model.predict(pair.pixels[None], [pair.class_id], conditions)[0])


def estimate_slice(model: QualityRegressor, pair, cond=None) -> dict:
    return {"volume_id": pair.volume_id, "class_id": pair.class_id, "z_index": pair.z_index,
            "predicted_dsc": forward(model, pair, cond)}


def estimate_volume(model: QualityRegressor, image: Volume, mask: Mask, class_id: int, k: int = 10,
                    actual_dsc: Optional[float] = None) -> QualityRecord:
    """Average slice predictions over ``k`` evenly sampled mask slices."""
    zs = sample_slices(mask, class_id, k)
    pairs = [preprocess_pair(image, mask, z, class_id) for z in zs]
    X = np.stack([p.pixels for p in pairs])
    preds = model.predict(X, [class_id] * len(pairs))
    return QualityRecord(image.id, int(class_id), float(np.mean(preds)), actual_dsc,
                         [float(v) for v in preds], [int(z) for z in zs])


# ---------------------------------------------------------------------------
# corpus glue


@dataclass
class SliceDataset:
    X: np.ndarray
    y: np.ndarray
    class_ids: np.ndarray
    record_index: np.ndarray
    z_index: np.ndarray


def _record_masks(manifest: CorpusManifest, records):
    cache = {}
    for rec in records:
        key = (rec.image, rec.ground_truth)
        if key not in cache:
            cache.clear()
            cache[key] = (load_volume(manifest.resolve(rec.image)), load_volume(manifest.resolve(rec.ground_truth)))
        image, labels = cache[key]
        deg = Mask(load_volume(manifest.resolve(rec.mask)).data, class_id=rec.class_id, id=rec.volume_id)
        gt = (labels.data == rec.class_id)
        yield rec, image, deg, gt


def slice_dataset(manifest: CorpusManifest, split: str = "train", per_record: int = 3) -> SliceDataset:
    """Slice pairs for every record of a split, labelled with their slice-level DSC."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    xs, ys, cs, ri, zi = [], [], [], [], []
    positions = {id(r): i for i, r in enumerate(manifest.records)}
    for rec, image, deg, gt in _record_masks(manifest, records):
        if not deg.data.any():
            logger.warning("record %s/%s severity %s has an empty mask; skipped", rec.volume_id, rec.class_id, rec.severity)
            continue
        for z in sample_slices(deg, rec.class_id, per_record):
            pair = preprocess_pair(image, deg, z, rec.class_id)
            xs.append(pair.pixels)
            ys.append(dsc(deg.data[z] > 0, gt[z]))
            cs.append(rec.class_id)
            ri.append(positions[id(rec)])
            zi.append(z)
    return SliceDataset(np.stack(xs), np.asarray(ys), np.asarray(cs, dtype=int),
                        np.asarray(ri, dtype=int), np.asarray(zi, dtype=int))


def train(manifest: CorpusManifest, table: Optional[EmbeddingTable], params: Optional[dict] = None,
          loss_cfg: LossConfig = LossConfig(), per_record: int = 3, checkpoint_dir=None, log_path=None,
          data: Optional[SliceDataset] = None) -> QualityRegressor:
    """Fit a regressor on the manifest's training split."""
    params = dict(params or {})
    present = sorted({r.class_id for r in manifest.split("train")})
    if table is not None:
        table.lookup(present)
    data = data if data is not None else slice_dataset(manifest, "train", per_record)
    model = QualityRegressor(embeddings=table, lam=loss_cfg.lam, xi=loss_cfg.xi,
                             checkpoint_dir=checkpoint_dir, log_path=log_path, **params)
    return model.fit(data.X, data.y, data.class_ids)


def estimate_manifest(model: QualityRegressor, manifest: CorpusManifest, split: Optional[str] = "test",
                      k: int = 10) -> list:
    records = manifest.records if split is None else manifest.split(split)
    out = []
    for rec, image, deg, gt in _record_masks(manifest, records):
        if not deg.data.any():
            continue
        out.append(estimate_volume(model, image, deg, rec.class_id, k, actual_dsc=rec.actual_dsc))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _table_json(table: Optional[EmbeddingTable]):
    return None if table is None else table.to_json()


def save_checkpoint(model: QualityRegressor, path) -> None:
    """Write config snapshot plus a flat named-parameter table (``.npz``)."""
    check_is_fitted(model, "model_")
    params = model.get_params()
    params.pop("embeddings")
    params["channels"] = list(params["channels"])
    for key in ("checkpoint_dir", "log_path"):
        params[key] = None if params[key] is None else str(params[key])
    header = {"version": CHECKPOINT_VERSION, "config": params, "embeddings": _table_json(model.embeddings)}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.model_.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> QualityRegressor:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    table = None if header["embeddings"] is None else EmbeddingTable.from_json(header["embeddings"])
    cfg = header["config"]
    cfg["channels"] = tuple(cfg["channels"])
    model = QualityRegressor(embeddings=table, **cfg)
    model.init_untrained()
    model.model_.load_state_dict(state)
    model.model_.eval()
    return model

