"""Embedding index with volume-to-volume and report-to-volume ranking and
the MAP@K / Recall@K evaluation stack.

Ranking is exact exhaustive cosine search (scores non-increasing, ties
broken by ascending study_id). Relevance for MAP@K is the graded
intersection-over-union of true-label sets; precision counts IoU above a
configurable threshold (default: anything > 0) as a hit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import RetrievalError

INDEX_MAGIC = b"VCIX"
INDEX_VERSION = 1


@dataclass
class IndexEntry:
    study_id: str
    embedding: np.ndarray
    labels: Optional[np.ndarray] = None


@dataclass
class EmbeddingIndex:
    """Unit-normalized embeddings keyed by study_id; immutable after build."""

    study_ids: list
    embeddings: np.ndarray              # (n, D), rows normalized
    labels: Optional[np.ndarray] = None  # (n, V) binary
    label_names: tuple = ()
    encoder_tag: str = ""
    _pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.study_ids) != len(set(self.study_ids)):
            raise RetrievalError("duplicate study_ids in index")
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.study_ids):
            raise RetrievalError("one embedding row per study_id required")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(norms == 0):
            raise RetrievalError("zero-norm embedding in index")
        self.embeddings = self.embeddings / norms[:, None]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape[0] != len(self.study_ids):
                raise RetrievalError("one label row per study_id required")
            if not np.isin(self.labels, (0.0, 1.0)).all():
                raise RetrievalError("index labels must be binary")
        self._pos = {sid: i for i, sid in enumerate(self.study_ids)}

    def __len__(self) -> int:
        return len(self.study_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def position(self, study_id: str) -> int:
        try:
            return self._pos[study_id]
        except KeyError:
            raise RetrievalError(f"unknown study_id {study_id!r}") from None


@dataclass
class RetrievalResult:
    ranked: list          # [(study_id, score)], scores non-increasing
    query_kind: str       # "volume" | "text"


def save_index(index: EmbeddingIndex, path) -> None:
    """Manifest JSON + packed little-endian float32 payload in one file."""
    header = {
        "encoder_tag": index.encoder_tag,
        "count": len(index),
        "dim": index.dim,
        "study_ids": list(index.study_ids),
        "label_names": list(index.label_names),
        "labels": index.labels.astype(int).tolist() if index.labels is not None else None,
        "dtype": "float32",
    }
    blob = json.dumps(header).encode("utf-8")
    payload = index.embeddings.astype("<f4").tobytes()
    with Path(path).open("wb") as handle:
        handle.write(INDEX_MAGIC)
        handle.write(struct.pack("<II", INDEX_VERSION, len(blob)))
        handle.write(blob)
        handle.write(payload)


def load_index(path) -> EmbeddingIndex:
    with Path(path).open("rb") as handle:
        magic = handle.read(4)
        if magic != INDEX_MAGIC:
            raise RetrievalError(f"{path}: not an index file (magic {magic!r})")
        version, header_len = struct.unpack("<II", handle.read(8))
        if version != INDEX_VERSION:
            raise RetrievalError(f"{path}: unsupported index version {version}")
        header = json.loads(handle.read(header_len).decode("utf-8"))
        count, dim = header["count"], header["dim"]
        payload = handle.read(count * dim * 4)
        embeddings = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    labels = np.array(header["labels"], dtype=np.float64) if header["labels"] is not None else None
    return EmbeddingIndex(
        study_ids=list(header["study_ids"]),
        embeddings=np.array(embeddings, dtype=np.float64),
        labels=labels,
        label_names=tuple(header.get("label_names", ())),
        encoder_tag=header.get("encoder_tag", ""),
    )


def _rank(index: EmbeddingIndex, query: np.ndarray, exclude: Optional[int],
          k: Optional[int]) -> list:
    norm = np.linalg.norm(query)
    if norm == 0:
        raise RetrievalError("zero-norm query embedding")
    scores = index.embeddings @ (np.asarray(query, dtype=np.float64) / norm)
    candidates = [
        (index.study_ids[i], float(scores[i]))
        for i in range(len(index))
        if i != exclude
    ]
    candidates.sort(key=lambda item: (-item[1], item[0]))
    if k is not None:
        candidates = candidates[:k]
    return candidates


def query_by_volume(index: EmbeddingIndex, query, k: int) -> RetrievalResult:
    """Rank all entries against a query volume.

    `query` is either an in-index study_id (the query itself is excluded
    from its own results) or an external embedding array (no exclusion).
    """
    if len(index) == 0:
        raise RetrievalError("index is empty")
    if k <= 0:
        raise RetrievalError(f"k must be positive, got {k}")
    if isinstance(query, str):
        pos = index.position(query)
        embedding = index.embeddings[pos]
        ranked = _rank(index, embedding, exclude=pos, k=k)
    else:
        ranked = _rank(index, np.asarray(query, dtype=np.float64), exclude=None, k=k)
    return RetrievalResult(ranked, "volume")


def query_by_text(index: EmbeddingIndex, text: str, k: int,
                  text_encoder: Callable[[str], np.ndarray]) -> RetrievalResult:
    """Embed the report text and rank every volume entry (no exclusion)."""
    if len(index) == 0:
        raise RetrievalError("index is empty")
    if k <= 0:
        raise RetrievalError(f"k must be positive, got {k}")
    if not text or not text.strip():
        raise RetrievalError("empty query text")
    embedding = np.asarray(text_encoder(text), dtype=np.float64)
    return RetrievalResult(_rank(index, embedding, exclude=None, k=k), "text")


def relevance(query_labels, candidate_labels) -> float:
    """IoU of the two true-label sets; defined as 0 when both are empty."""
    q = np.asarray(query_labels, dtype=np.float64)
    c = np.asarray(candidate_labels, dtype=np.float64)
    if q.shape != c.shape:
        raise RetrievalError(f"label length mismatch: {q.shape} vs {c.shape}")
    if not np.isin(q, (0.0, 1.0)).all() or not np.isin(c, (0.0, 1.0)).all():
        raise RetrievalError("relevance requires binary labels")
    intersection = float(np.sum((q == 1) & (c == 1)))
    union = float(np.sum((q == 1) | (c == 1)))
    if union == 0:
        return 0.0
    return intersection / union


def ap_at_k(query_labels, ranked_candidate_labels: Sequence, k: int,
            relevant_above: float = 0.0) -> float:
    """AP@K = (1/K) * sum_{i<=K} P_i * R_i.

    R_i is the graded IoU relevance at rank i; P_i is the precision at i,
    counting relevance > relevant_above as a hit. When fewer than K
    candidates exist the sum runs over the available ranks but K stays the
    divisor.
    """
    if k <= 0:
        raise RetrievalError(f"k must be positive, got {k}")
    total = 0.0
    hits = 0
    for i, cand in enumerate(ranked_candidate_labels[:k], start=1):
        r_i = relevance(query_labels, cand)
        if r_i > relevant_above:
            hits += 1
        p_i = hits / i
        total += p_i * r_i
    return total / k


@dataclass
class MapResult:
    value: float
    random_baseline: float
    fold_change: float
    k: int
    n_queries: int


def map_at_k(index: EmbeddingIndex, k: int, relevant_above: float = 0.0,
             baseline_seed: int = 0, baseline_repeats: int = 10) -> MapResult:
    """Mean AP@K over all abnormal queries, with a label-shuffled random
    baseline for fold-change reporting.

    Queries are index entries with at least one true label; each is ranked
    against every other entry (self excluded).
    """
    if index.labels is None:
        raise RetrievalError("map_at_k requires a labeled index")
    abnormal = [i for i in range(len(index)) if index.labels[i].sum() > 0]
    if not abnormal:
        raise RetrievalError("no abnormal queries in index")
    rng = np.random.default_rng(baseline_seed)
    ap_values = []
    random_values = []
    for qi in abnormal:
        ranked = _rank(index, index.embeddings[qi], exclude=qi, k=None)
        cand_labels = [index.labels[index.position(sid)] for sid, _ in ranked]
        ap_values.append(ap_at_k(index.labels[qi], cand_labels, k, relevant_above))
        for _ in range(baseline_repeats):
            shuffled = [cand_labels[j] for j in rng.permutation(len(cand_labels))]
            random_values.append(
                ap_at_k(index.labels[qi], shuffled, k, relevant_above)
            )
    value = float(np.mean(ap_values))
    baseline = float(np.mean(random_values)) if random_values else 0.0
    fold = value / baseline if baseline > 0 else float("inf")
    return MapResult(value, baseline, fold, k, len(abnormal))


@dataclass
class RecallResult:
    value: float
    random_baseline: float
    fold_change: float
    k: int
    n_queries: int


def recall_at_k(queries: Sequence, index: EmbeddingIndex, k: int) -> RecallResult:
    """Fraction of queries whose paired volume ranks in the top k.

    queries: (query_embedding, paired_study_id) tuples; every paired volume
    must exist in the index. The random baseline is k/N.
    """
    if k <= 0:
        raise RetrievalError(f"k must be positive, got {k}")
    if not queries:
        raise RetrievalError("no queries given")
    hits = 0
    for embedding, target_id in queries:
        index.position(target_id)  # raises for unpaired queries
        ranked = _rank(index, np.asarray(embedding, dtype=np.float64),
                       exclude=None, k=k)
        if any(sid == target_id for sid, _ in ranked):
            hits += 1
    value = hits / len(queries)
    baseline = min(1.0, k / len(index))
    fold = value / baseline if baseline > 0 else float("inf")
    return RecallResult(value, baseline, fold, k, len(queries))


def build_index(study_ids: Sequence[str], embeddings: np.ndarray,
                labels: Optional[np.ndarray] = None,
                label_names: Sequence[str] = (),
                encoder_tag: str = "") -> EmbeddingIndex:
    return EmbeddingIndex(list(study_ids), embeddings, labels,
                          tuple(label_names), encoder_tag)
