"""Checks that need the session's trained toy model."""

import numpy as np

from labelqc.core import load_volume, preprocess_pair
from labelqc.regressor import QualityRegressor, _record_masks, slice_dataset


def _ambiguity_set(manifest):
    """Held-out slices whose degraded mask covers two organs: (pixels, own class, other class)."""
    out = []
    records = [r for r in manifest.split("test") if r.degradation["kind"] == "merge_neighbor"]
    for rec, image, deg, _ in _record_masks(manifest, records):
        labels = load_volume(manifest.resolve(rec.ground_truth)).data
        for z in np.flatnonzero(deg.data.any(axis=(1, 2))):
            covered = labels[z][deg.data[z] > 0]
            others = [c for c in np.unique(covered) if c not in (0, rec.class_id)]
            if others and (covered == rec.class_id).any():
                pair = preprocess_pair(image, deg, int(z), rec.class_id)
                out.append((pair.pixels, rec.class_id, int(others[0])))
    return out


def _condition_gap(model, table, items):
    X = np.stack([p for p, _, _ in items])
    a = model.predict(X, conditions=table.lookup([c for _, c, _ in items]).astype(np.float32))
    b = model.predict(X, conditions=table.lookup([c for _, _, c in items]).astype(np.float32))
    return float(np.mean(np.abs(a - b)))


def test_condition_changes_prediction_on_ambiguous_slices(trained_full, toy_corpus, toy_table):
    items = _ambiguity_set(toy_corpus)
    assert len(items) >= 10
    untrained = QualityRegressor(toy_table, **{k: v for k, v in trained_full.get_params().items()
                                               if k != "embeddings"}).init_untrained()
    trained_gap = _condition_gap(trained_full, toy_table, items)
    untrained_gap = _condition_gap(untrained, toy_table, items)
    assert trained_gap > untrained_gap


def test_perfect_masks_rank_above_heavily_eroded(trained_full, toy_corpus):
    data = slice_dataset(toy_corpus, "test", per_record=3)
    severities = np.array([toy_corpus.records[i].severity for i in data.record_index])
    kinds = [toy_corpus.records[i].degradation for i in data.record_index]
    heavy = np.array([k["kind"] == "erode" and k["magnitude"] == 3 for k in kinds])
    perfect = severities == 0
    pred = trained_full.predict(data.X, data.class_ids)
    assert pred[perfect].mean() > pred[heavy].mean()
    assert np.all((pred > 0) & (pred < 1))
