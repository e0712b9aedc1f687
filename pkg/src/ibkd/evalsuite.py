"""Embedding metrics and exact (brute-force) retrieval."""

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp
from scipy.stats import rankdata

from .exceptions import ConfigError, DataError, ShapeError
from .linalg import as_matrix


@dataclass
class RankedResult:
    query_id: str
    hits: List[Tuple[str, float]]

    @property
    def doc_ids(self):
        return [d for d, _ in self.hits]


@dataclass
class MetricReport:
    dataset: str
    dim: int
    metrics: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not math.isfinite(value):
                raise DataError(f"metric {name} is not finite: {value}")

    def to_dict(self):
        d = {"dataset": self.dataset, "dim": self.dim, "metrics": dict(self.metrics)}
        if self.warnings:
            d["warnings"] = list(self.warnings)
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def spearman(a, b) -> float:
    """Spearman rank correlation; ties get average ranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"spearman needs equal lengths, got {a.size} and {b.size}")
    if a.size < 2:
        raise DataError("spearman needs at least 2 observations")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        raise DataError("spearman is undefined when one input has constant ranks")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


def _check_relevance(results, relevant, k):
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not results:
        raise DataError("no ranked results to score")
    for r in results:
        if r.query_id not in relevant:
            raise DataError(f"no relevance entry for query {r.query_id!r}")


def mrr_at_k(results: Sequence[RankedResult], relevant, k: int) -> float:
    _check_relevance(results, relevant, k)
    total = 0.0
    for r in results:
        rel = relevant[r.query_id]
        for rank, doc in enumerate(r.doc_ids[:k], start=1):
            if doc in rel:
                total += 1.0 / rank
                break
    return total / len(results)


def recall_at_k(results: Sequence[RankedResult], relevant, k: int) -> float:
    _check_relevance(results, relevant, k)
    total = 0.0
    for r in results:
        rel = set(relevant[r.query_id])
        if not rel:
            raise DataError(f"query {r.query_id!r} has an empty relevant set")
        total += len(rel.intersection(r.doc_ids[:k])) / len(rel)
    return total / len(results)


def alignment(x, y) -> float:
    """Mean squared distance between paired rows of ``x`` and ``y``."""
    x = as_matrix(x, "x", allow_empty=True)
    y = as_matrix(y, "y", allow_empty=True)
    if x.shape != y.shape:
        raise ShapeError(f"paired embeddings differ in shape: {x.shape} vs {y.shape}")
    if x.shape[0] == 0:
        raise DataError("alignment needs at least one pair")
    return float(np.mean(np.sum((x - y) ** 2, axis=1)))


def uniformity(embeddings) -> float:
    """``log mean exp(-2 ||x - y||^2)`` over unordered distinct pairs."""
    e = as_matrix(embeddings, "embeddings", allow_empty=True)
    if e.shape[0] < 2:
        raise DataError("uniformity needs at least 2 embeddings")
    d2 = pdist(e, "sqeuclidean")
    return float(min(logsumexp(-2.0 * d2) - math.log(d2.size), 0.0))


def covariance_matrix(embeddings) -> np.ndarray:
    e = as_matrix(embeddings, "embeddings", allow_empty=True)
    if e.shape[0] < 2:
        raise DataError("covariance needs at least 2 embeddings")
    centered = e - e.mean(axis=0)
    return centered.T @ centered / (e.shape[0] - 1)


def correlation_from_covariance(cov):
    """Return ``(corr, zero_variance_mask)``; zero-variance dims correlate as 0."""
    cov = np.asarray(cov, dtype=np.float64)
    var = np.diag(cov).copy()
    zero = var <= 0.0
    std = np.sqrt(np.where(zero, 1.0, var))
    corr = cov / np.outer(std, std)
    corr[zero, :] = 0.0
    corr[:, zero] = 0.0
    return corr, zero


def offdiag_mass(cov) -> float:
    """Mean absolute off-diagonal entry of the correlation matrix."""
    corr, _ = correlation_from_covariance(cov)
    d = corr.shape[0]
    if d < 2:
        return 0.0
    off = ~np.eye(d, dtype=bool)
    return float(np.mean(np.abs(corr[off])))


def _normalize(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms == 0.0, 1.0, norms)


def cosine_rows(a, b):
    """Row-wise cosine similarity of paired rows."""
    return np.sum(_normalize(np.asarray(a, float)) * _normalize(np.asarray(b, float)), axis=1)


def exact_retrieve(queries, corpus, k: int, score: str = "dot", query_ids=None, doc_ids=None,
                   chunk_size: int = 256) -> List[RankedResult]:
    """Exhaustive top-k search. Ties go to the doc earlier in ``corpus``."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if score not in ("dot", "cosine"):
        raise ConfigError(f"score must be 'dot' or 'cosine', got {score!r}")
    q = as_matrix(queries, "queries")
    c = as_matrix(corpus, "corpus")
    if q.shape[1] != c.shape[1]:
        raise ShapeError(f"queries have dim {q.shape[1]} but corpus has dim {c.shape[1]}")
    if score == "cosine":
        q, c = _normalize(q), _normalize(c)
    query_ids = [str(i) for i in range(q.shape[0])] if query_ids is None else list(query_ids)
    doc_ids = [str(i) for i in range(c.shape[0])] if doc_ids is None else list(doc_ids)
    if len(query_ids) != q.shape[0] or len(doc_ids) != c.shape[0]:
        raise ShapeError("id lists do not match the number of rows")
    k = min(k, c.shape[0])
    results = []
    for start in range(0, q.shape[0], chunk_size):
        scores = q[start:start + chunk_size] @ c.T
        # stable sort on negated scores keeps ascending doc order among ties
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for row, ranked in enumerate(order):
            qi = start + row
            results.append(RankedResult(query_ids[qi], [(doc_ids[j], float(scores[row, j])) for j in ranked]))
    return results


def write_rankings_tsv(results: Sequence[RankedResult], path):
    with open(path, "w") as fh:
        fh.write("query_id\tdoc_id\trank\tscore\n")
        for r in results:
            for rank, (doc, s) in enumerate(r.hits, start=1):
                fh.write(f"{r.query_id}\t{doc}\t{rank}\t{s!r}\n")
