"""Retrieval metrics (AP, mAP, R@k) and correlation statistics."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .dataset import DataError, FeatureTable, PairSet
from .model import DualEncoder, score_batch

log = logging.getLogger(__name__)


class UndefinedCorrelation(ValueError):
    """Correlation of a constant vector."""


@dataclass(frozen=True)
class RankedList:
    """Items in descending similarity for one query, and the relevant subset."""

    query_id: str
    items: tuple[str, ...]
    relevant: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "relevant", frozenset(self.relevant))
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"query {self.query_id!r}: duplicate items in ranking")
        missing = self.relevant.difference(self.items)
        if missing:
            raise ValueError(f"query {self.query_id!r}: relevant item {sorted(missing)[0]!r} not ranked")

    def relevant_ranks(self) -> np.ndarray:
        """1-based ranks of the relevant items, ascending."""
        return np.array([i + 1 for i, it in enumerate(self.items) if it in self.relevant], dtype=np.int64)


@dataclass(frozen=True)
class CorrelationResult:
    coefficient: float
    p_value: float
    n: int


def average_precision(ranked: RankedList) -> float:
    """Mean of precision@rank taken at each relevant item's rank."""
    if not ranked.relevant:
        raise ValueError(f"query {ranked.query_id!r}: empty relevant set")
    ranks = ranked.relevant_ranks()
    hits = np.arange(1, len(ranks) + 1)
    return float(np.mean(hits / ranks))


def mean_ap(lists: Sequence[RankedList]) -> float:
    if not lists:
        raise ValueError("mean_ap of an empty query set")
    return float(np.mean([average_precision(r) for r in lists]))


def recall_at_k(ranked: RankedList, k: int) -> float:
    """Fraction of relevant items within the top ``k`` (whole pool if ``k`` exceeds it)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not ranked.relevant:
        raise ValueError(f"query {ranked.query_id!r}: empty relevant set")
    ranks = ranked.relevant_ranks()
    return float(np.count_nonzero(ranks <= k) / len(ranks))


# --------------------------------------------------------------------------- correlation


def average_ranks(x) -> np.ndarray:
    """1-based ranks in ascending order; tied values share their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def _t_test_p(r: float, n: int) -> float:
    # two-sided p of t = r sqrt(df / (1 - r^2)); P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2) = I_{1-r^2}(df/2, 1/2)
    df = n - 2
    return float(np.clip(betainc(0.5 * df, 0.5, max(1.0 - r * r, 0.0)), 0.0, 1.0))


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"correlation needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise ValueError(f"correlation needs n >= 3, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("correlation undefined for a constant input")
    return x, y


def _pearson_r(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    r = np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    return float(np.clip(r, -1.0, 1.0))


def pearson(x, y) -> CorrelationResult:
    x, y = _check_pair(x, y)
    r = _pearson_r(x, y)
    return CorrelationResult(r, _t_test_p(r, len(x)), len(x))


def spearman(x, y) -> CorrelationResult:
    x, y = _check_pair(x, y)
    rho = _pearson_r(average_ranks(x), average_ranks(y))
    return CorrelationResult(rho, _t_test_p(rho, len(x)), len(x))


# --------------------------------------------------------------------------- retrieval


def _id_ranks(item_ids):
    order = np.argsort(np.array(item_ids, dtype=object), kind="stable")
    ranks = np.empty(len(item_ids), dtype=np.int64)
    ranks[order] = np.arange(len(item_ids))
    return ranks


def rank_by_similarity(scores, item_ids: Sequence[str]) -> np.ndarray:
    """Indices ordering items by descending score; ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((_id_ranks(item_ids), -scores))


def rank_queries(enc: DualEncoder, audio: FeatureTable, captions: FeatureTable,
                 relevant: Mapping[str, Iterable[str]] | PairSet,
                 chunk: int = 256) -> list[RankedList]:
    """Rank the whole audio pool for each caption in ``relevant``.

    ``relevant`` maps caption ids to their positive audio id (a PairSet) or
    to a collection of relevant audio ids.
    """
    query_ids = list(relevant)
    missing = [c for c in query_ids if c not in captions]
    if missing:
        raise DataError(f"no caption features for query {missing[0]!r}")
    rel_sets = {}
    for c in query_ids:
        r = relevant[c]
        rel_sets[c] = frozenset([r] if isinstance(r, str) else r)
        for a in rel_sets[c]:
            if a not in audio:
                raise DataError(f"no audio features for relevant item {a!r} of query {c!r}")
    pool = audio.ids
    id_rank = _id_ranks(pool)

    out = []
    for start in range(0, len(query_ids), chunk):
        block = query_ids[start:start + chunk]
        sims = score_batch(enc, audio.matrix, captions.rows(block))
        for j, c in enumerate(block):
            order = np.lexsort((id_rank, -sims[:, j]))
            out.append(RankedList(c, tuple(pool[i] for i in order), rel_sets[c]))
    return out


def evaluate_retrieval(enc: DualEncoder, audio: FeatureTable, captions: FeatureTable,
                       pairs, k: int = 10) -> tuple[float, float]:
    """Text-to-audio retrieval over the full audio pool: ``(mAP, mean R@k)``."""
    if k > len(audio):
        log.warning("k=%d exceeds the candidate pool (%d); recall is over the whole pool", k, len(audio))
    ranked = rank_queries(enc, audio, captions, pairs)
    if not ranked:
        raise ValueError("no queries to evaluate")
    return mean_ap(ranked), float(np.mean([recall_at_k(r, k) for r in ranked]))


def write_report(path, report: Mapping[str, object]) -> None:
    """Flat key-value report as one JSON object."""
    Path(path).write_text(json.dumps(dict(report), indent=1) + "\n", encoding="utf-8")
