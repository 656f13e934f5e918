"""Regression and ranking metrics for quality estimates."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if den == 0:
        return None
    return float(np.clip(np.dot(xc, yc) / den, -1.0, 1.0))


def correlation_metrics(predicted, actual):
    """Pearson (LCC) and Spearman (SROCC) correlations.

    Either coefficient is ``None`` when undefined (a constant input).
    """
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError("length mismatch")
    if p.size < 2:
        raise ValueError("need at least two samples")
    lcc = _pearson(p, a)
    srocc = _pearson(rankdata(p, method="average"), rankdata(a, method="average"))
    return lcc, srocc


def map_at_k(predicted, actual, k: int) -> float:
    """Average precision at ``k`` for retrieving the ``k`` lowest-actual samples.

    Samples are ranked by ascending prediction; precision is accumulated at
    each hit position within the first ``k`` and divided by ``k``.  Ties in
    either ordering go to the lower index.
    """
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError("length mismatch")
    if not 1 <= k <= p.size:
        raise ValueError(f"k={k} outside 1..{p.size}")
    target = set(np.argsort(a, kind="stable")[:k].tolist())
    ranked = np.argsort(p, kind="stable")[:k]
    hits = 0
    total = 0.0
    for pos, idx in enumerate(ranked, start=1):
        if idx in target:
            hits += 1
            total += hits / pos
    return total / k


@dataclass
class ClassMetrics:
    class_id: int
    n: int
    lcc: Optional[float]
    srocc: Optional[float]
    ap: dict = field(default_factory=dict)  # {k: AP@k}


@dataclass
class EvalReport:
    per_class: list
    overall: dict
    config: dict

    def to_json(self) -> dict:
        return {
            "per_class": [
                {"class_id": c.class_id, "n": c.n, "lcc": c.lcc, "srocc": c.srocc,
                 "ap": {str(k): v for k, v in c.ap.items()}}
                for c in self.per_class
            ],
            "overall": self.overall,
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d) -> "EvalReport":
        per = [ClassMetrics(c["class_id"], c["n"], c["lcc"], c["srocc"],
                            {int(k): v for k, v in c["ap"].items()}) for c in d["per_class"]]
        return cls(per, d["overall"], d["config"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def eval_suite(records, ks=(5, 10)) -> EvalReport:
    """Per-class and pooled metrics over records carrying both actual and predicted DSC.

    MAP@k is the mean AP@k over classes with at least ``k`` records; pooled
    LCC/SROCC treat all records as one scatter.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    if any(r.actual_dsc is None for r in records):
        raise ValueError("every record needs an actual DSC")
    by_class = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r)
    per_class = []
    for cid in sorted(by_class):
        rs = by_class[cid]
        p = np.array([r.predicted_dsc for r in rs])
        a = np.array([r.actual_dsc for r in rs])
        lcc = srocc = None
        if len(rs) >= 2:
            lcc, srocc = correlation_metrics(p, a)
        ap = {}
        for k in ks:
            if len(rs) >= k:
                ap[k] = map_at_k(p, a, k)
            else:
                warnings.warn(f"class {cid} has {len(rs)} records < k={k}; excluded from MAP@{k}")
        per_class.append(ClassMetrics(cid, len(rs), lcc, srocc, ap))
    p = np.array([r.predicted_dsc for r in records])
    a = np.array([r.actual_dsc for r in records])
    lcc, srocc = correlation_metrics(p, a) if len(records) >= 2 else (None, None)
    overall = {"n": len(records), "lcc": lcc, "srocc": srocc}
    for k in ks:
        vals = [c.ap[k] for c in per_class if k in c.ap]
        overall[f"map@{k}"] = float(np.mean(vals)) if vals else None
    for name in ("lcc", "srocc"):
        vals = [getattr(c, name) for c in per_class if getattr(c, name) is not None]
        overall[f"macro_{name}"] = float(np.mean(vals)) if vals else None
    return EvalReport(per_class, overall, {"ks": list(ks)})


def write_scatter_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["predicted", "actual", "class_id", "volume_id"])
        for r in records:
            w.writerow([r.predicted_dsc, r.actual_dsc, r.class_id, r.volume_id])
