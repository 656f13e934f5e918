"""Class-name condition embeddings.

Three providers produce one vector per vocabulary class:

* ``one_hot`` - standard basis vectors (no semantic similarity between classes),
* ``precomputed_file`` - text-encoder outputs generated offline and stored in a
  table file, looked up by rendered prompt,
* ``hash_fallback`` - a deterministic pseudo-random unit vector per prompt, for
  when no encoder output is available.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import ClassVocabulary

PLACEHOLDER = "[CLS]"
PROVIDERS = ("one_hot", "precomputed_file", "hash_fallback")
TABLE_FORMAT = "labelqc-embeddings"
TABLE_VERSION = 1

# prompt templates compared in the ablation
TEMPLATES = (
    "[CLS]",
    "A photo of a [CLS].",
    "A computerized tomography of a [CLS].",
    "There is [CLS] in this computerized tomography.",
)


def render_prompt(template: str, class_name: str) -> str:
    n = template.count(PLACEHOLDER)
    if n != 1:
        raise ValueError(f"template must contain {PLACEHOLDER} exactly once, found {n}")
    return template.replace(PLACEHOLDER, class_name)


@dataclass(frozen=True)
class ConditionEmbedding:
    class_id: int
    vector: np.ndarray
    provider: str
    template: str


@dataclass
class EmbeddingTable:
    vocabulary: ClassVocabulary
    vectors: np.ndarray  # (n_classes, d_t), row i is class id i + 1
    provider: str
    template: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape[0] != self.vocabulary.size:
            raise ValueError("embedding table does not cover the vocabulary")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding table has non-finite entries")

    @property
    def d_t(self) -> int:
        return int(self.vectors.shape[1])

    def __getitem__(self, class_id: int) -> ConditionEmbedding:
        return ConditionEmbedding(int(class_id), self.vectors[class_id - 1], self.provider, self.template)

    def lookup(self, class_ids) -> np.ndarray:
        ids = np.asarray(class_ids, dtype=int)
        if ids.size and (ids.min() < 1 or ids.max() > self.vocabulary.size):
            raise KeyError(f"class id outside vocabulary 1..{self.vocabulary.size}")
        return self.vectors[ids - 1]

    def to_json(self) -> dict:
        return {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "d_t": self.d_t,
            "provider": self.provider,
            "template": self.template,
            "count": self.vocabulary.size,
            "entries": [
                {
                    "class_id": cid,
                    "class_name": name,
                    "prompt": render_prompt(self.template, name),
                    "vector_b64": _encode(self.vectors[cid - 1]),
                }
                for cid, name in self.vocabulary.entries
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, d) -> "EmbeddingTable":
        if d.get("format") != TABLE_FORMAT:
            raise ValueError("not an embedding table")
        entries = sorted(d["entries"], key=lambda e: e["class_id"])
        vocab = ClassVocabulary(tuple((e["class_id"], e["class_name"]) for e in entries))
        vecs = np.stack([_decode_row(e) for e in entries])
        if vecs.shape[1] != d["d_t"] or len(entries) != d["count"]:
            raise ValueError("embedding table header disagrees with its rows")
        return cls(vocab, vecs, d["provider"], d["template"])

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls.from_json(json.loads(Path(path).read_text()))


def _encode(v: np.ndarray) -> str:
    return base64.b64encode(np.asarray(v, dtype="<f8").tobytes()).decode("ascii")


def _decode_row(entry: dict) -> np.ndarray:
    if "vector_b64" in entry:
        return np.frombuffer(base64.b64decode(entry["vector_b64"]), dtype="<f8").astype(np.float64)
    return np.asarray(entry["vector"], dtype=np.float64)


def read_prompt_vectors(path) -> dict:
    """Read a precomputed text-embedding file into ``{prompt: vector}``.

    Rows carry ``prompt`` plus either ``vector`` (list of floats) or
    ``vector_b64`` (little-endian float64).
    """
    d = json.loads(Path(path).read_text())
    rows = d["entries"] if isinstance(d, dict) else d
    out = {}
    dim = None
    for row in rows:
        v = _decode_row(row)
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise ValueError(f"{path}: row for {row['prompt']!r} has dim {v.shape[0]}, expected {dim}")
        out[row["prompt"]] = v
    if isinstance(d, dict) and "d_t" in d and dim is not None and d["d_t"] != dim:
        raise ValueError(f"{path}: header d_t {d['d_t']} but rows have {dim}")
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("zero-norm embedding")
    return v / n


def hash_vector(prompt: str, d_t: int, seed: int = 0) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return _unit(rng.standard_normal(d_t))


def embed_classes(vocab: ClassVocabulary, provider: str = "one_hot", template: str = PLACEHOLDER,
                  path=None, d_t: int = 64, seed: int = 0) -> EmbeddingTable:
    if provider not in PROVIDERS:
        raise ValueError(f"unknown provider {provider!r}; expected one of {PROVIDERS}")
    prompts = [render_prompt(template, name) for name in vocab.names]
    if provider == "one_hot":
        vecs = np.eye(vocab.size)
    elif provider == "hash_fallback":
        vecs = np.stack([hash_vector(p, d_t, seed) for p in prompts])
    else:
        if path is None:
            raise ValueError("precomputed_file provider needs a table path")
        table = read_prompt_vectors(path)
        missing = [p for p in prompts if p not in table]
        if missing:
            raise KeyError(f"prompts missing from {path}: {missing}")
        vecs = np.stack([_unit(table[p]) for p in prompts])
    return EmbeddingTable(vocab, vecs, provider, template)


def cosine_similarity_matrix(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise ValueError("need at least two vectors")
    if not np.isfinite(v).all():
        raise ValueError("non-finite embedding")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector")
    u = v / norms[:, None]
    h = np.clip(u @ u.T, -1.0, 1.0)
    h = (h + h.T) / 2.0
    np.fill_diagonal(h, 1.0)
    return h


class ClassEmbedder(TransformerMixin, BaseEstimator):
    """Map class ids to condition vectors.

    ``fit`` takes a :class:`ClassVocabulary` (or a list of class names) and
    builds the table; ``transform`` maps an array of class ids to rows.
    """

    def __init__(self, provider="one_hot", template=PLACEHOLDER, path=None, d_t=64, seed=0):
        self.provider = provider
        self.template = template
        self.path = path
        self.d_t = d_t
        self.seed = seed

    def fit(self, X, y=None):
        vocab = X if isinstance(X, ClassVocabulary) else ClassVocabulary.from_names(list(X))
        self.table_ = embed_classes(vocab, self.provider, self.template, self.path, self.d_t, self.seed)
        self.n_features_out_ = self.table_.d_t
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return self.table_.lookup(np.asarray(X).ravel())
