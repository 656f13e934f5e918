"""Sample selection and dataset quality reports built on quality estimates.

Baseline uncertainty scores (entropy, MC-dropout spread, random) are provided
alongside the quality scores so selection strategies can be compared in one
harness.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import entr

from .core import SubjectMeta

logger = logging.getLogger(__name__)

DIRECTIONS = {
    "quality": "lower-is-worse",
    "entropy": "higher-is-more-uncertain",
    "mc_dropout": "higher-is-more-uncertain",
    "random": "higher-is-more-uncertain",
}


@dataclass(frozen=True)
class SelectorScore:
    volume_id: str
    method: str
    score: float
    class_id: Optional[int] = None

    def __post_init__(self):
        if self.method not in DIRECTIONS:
            raise ValueError(f"unknown selector method {self.method!r}")
        if not np.isfinite(self.score):
            raise ValueError("selector score must be finite")

    @property
    def direction(self) -> str:
        return DIRECTIONS[self.method]


def entropy_score(prob, mode: str = "mean", volume_id: str = "", class_id=None) -> SelectorScore:
    """Binary entropy of per-voxel foreground probabilities, aggregated by ``mode``."""
    p = np.asarray(prob, dtype=np.float64)
    if p.size == 0 or np.nanmin(p) < 0 or np.nanmax(p) > 1 or np.isnan(p).any():
        raise ValueError("probabilities must lie within [0, 1]")
    h = entr(p) + entr(1.0 - p)
    if mode == "mean":
        s = float(h.mean())
    elif mode == "sum":
        s = float(h.sum())
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    return SelectorScore(volume_id, "entropy", s, class_id)


def mc_dropout_score(prob_passes, volume_id: str = "", class_id=None) -> SelectorScore:
    """Mean over voxels of the population std across stochastic passes."""
    passes = [np.asarray(p, dtype=np.float64) for p in prob_passes]
    if len(passes) < 2:
        raise ValueError("need at least two stochastic passes")
    if any(p.shape != passes[0].shape for p in passes):
        raise ValueError("passes differ in shape")
    std = np.stack(passes).std(axis=0)
    return SelectorScore(volume_id, "mc_dropout", float(std.mean()), class_id)


def quality_scores(records) -> list:
    return [SelectorScore(r.volume_id, "quality", float(r.predicted_dsc), r.class_id) for r in records]


def random_scores(volume_ids, seed: int) -> list:
    rng = np.random.default_rng(seed)
    ids = sorted(set(volume_ids))
    draws = rng.random(len(ids))
    return [SelectorScore(v, "random", float(d)) for v, d in zip(ids, draws)]


def _volume_scores(scores):
    scores = list(scores)
    methods = {s.method for s in scores}
    if len(methods) > 1:
        raise ValueError(f"mixed selector methods {sorted(methods)}")
    per = {}
    for s in scores:
        per.setdefault(s.volume_id, []).append(s.score)
    method = methods.pop() if methods else "quality"
    return method, {v: float(np.mean(vals)) for v, vals in per.items()}


def _worst_first(scores):
    method, vol = _volume_scores(scores)
    if DIRECTIONS[method] == "lower-is-worse":
        return sorted(vol, key=lambda v: (vol[v], v))
    return sorted(vol, key=lambda v: (-vol[v], v))


def select_for_annotation(scores, n: int) -> list:
    """Volumes most in need of revision: lowest quality or highest uncertainty first."""
    if n < 0:
        raise ValueError("budget must be non-negative")
    return _worst_first(scores)[:n]


def select_pseudo_labels(scores, k: int) -> list:
    """Volumes most trustworthy as pseudo labels, best first."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return _worst_first(scores)[::-1][:k]


# ---------------------------------------------------------------------------
# reports


@dataclass
class BiasResult:
    key: str
    test: str
    groups: dict
    statistic: float
    p_value: float
    extra: dict = field(default_factory=dict)


@dataclass
class DatasetReport:
    organ_means: dict
    organ_counts: dict
    overall_mean: float
    fraction_below: float
    threshold: float
    n_records: int
    bias: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["organ_means"] = {str(k): v for k, v in self.organ_means.items()}
        d["organ_counts"] = {str(k): v for k, v in self.organ_counts.items()}
        return d


def volume_quality(records) -> dict:
    per = {}
    for r in records:
        per.setdefault(r.volume_id, []).append(float(r.predicted_dsc))
    return {v: float(np.mean(vals)) for v, vals in per.items()}


def bias_test(records, meta, key: str = "sex", n_permutations: int = 9999, seed: int = 0) -> BiasResult:
    """Test whether per-volume predicted quality depends on a subject attribute.

    ``sex``: Welch's unequal-variance t-test on per-volume means.
    ``age``: Spearman correlation between age and per-volume mean, with a
    permutation p-value; decade group means are reported for display.
    """
    vq = volume_quality(records)
    meta = {m.volume_id: m for m in meta}
    missing = [v for v in vq if v not in meta]
    if missing:
        raise ValueError(f"no subject metadata for volumes {missing[:5]}")
    if key == "sex":
        groups = {}
        for v, q in vq.items():
            if meta[v].sex != "unknown":
                groups.setdefault(meta[v].sex, []).append(q)
        if len(groups) < 2 or min(len(g) for g in groups.values()) < 2:
            raise ValueError("need at least two volumes in each of two sex groups")
        a, b = (np.asarray(groups[g]) for g in sorted(groups))
        res = stats.ttest_ind(a, b, equal_var=False)
        summary = {g: {"n": len(v), "mean": float(np.mean(v))} for g, v in sorted(groups.items())}
        return BiasResult("sex", "welch_t", summary, float(res.statistic), float(res.pvalue))
    if key == "age":
        pairs = [(meta[v].age, q) for v, q in sorted(vq.items()) if meta[v].age is not None]
        if len(pairs) < 3:
            raise ValueError("need at least three volumes with a known age")
        ages = np.array([p[0] for p in pairs], dtype=float)
        qs = np.array([p[1] for p in pairs], dtype=float)
        decades = {}
        for a, q in pairs:
            decades.setdefault(f"{int(a // 10) * 10}s", []).append(q)
        if len(decades) < 2 or min(len(g) for g in decades.values()) < 2:
            # the continuous test is still defined; only the display bins are thin
            logger.warning("age decades with fewer than two volumes")

        def rho(x):
            return stats.spearmanr(x, qs).statistic

        res = stats.permutation_test((ages,), rho, permutation_type="pairings",
                                     n_resamples=n_permutations, random_state=seed)
        summary = {d: {"n": len(v), "mean": float(np.mean(v))} for d, v in sorted(decades.items())}
        return BiasResult("age", "spearman_permutation", summary, float(res.statistic), float(res.pvalue))
    raise ValueError(f"unknown bias key {key!r}")


def dataset_report(records, meta=None, threshold: float = 0.8, groupings=("sex", "age"),
                   class_names: Optional[dict] = None) -> DatasetReport:
    records = list(records)
    if not records:
        raise ValueError("no records")
    per = {}
    for r in records:
        per.setdefault(r.class_id, []).append(float(r.predicted_dsc))
    if class_names:
        for cid in class_names:
            if cid not in per:
                warnings.warn(f"organ {class_names[cid]!r} has no records; omitted")
    organ_means = {cid: float(np.mean(v)) for cid, v in sorted(per.items())}
    organ_counts = {cid: len(v) for cid, v in sorted(per.items())}
    preds = np.array([float(r.predicted_dsc) for r in records])
    report = DatasetReport(
        organ_means=organ_means,
        organ_counts=organ_counts,
        overall_mean=float(np.mean(list(organ_means.values()))),
        fraction_below=float(np.count_nonzero(preds < threshold) / preds.size),
        threshold=threshold,
        n_records=len(records),
    )
    if meta:
        for key in groupings:
            try:
                report.bias.append(bias_test(records, meta, key))
            except ValueError as exc:
                warnings.warn(f"bias test on {key!r} skipped: {exc}")
    return report
