"""Exact top-K retrieval over labeled nodes by cosine similarity.

One brute-force flat index; no approximate structures. Hits are ordered by
descending score with ties broken by ascending node id, the query node is
never returned as its own candidate, and asking for more hits than exist
returns everything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graphstore import TagGraph


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    hits: tuple[tuple[int, float], ...]
    strategy: str = "topk"

    def node_ids(self) -> list[int]:
        return [h[0] for h in self.hits]

    def scores(self) -> list[float]:
        return [h[1] for h in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


@dataclass(frozen=True)
class Index:
    """Frozen snapshot of labeled node embeddings, rows pre-normalized."""

    ids: np.ndarray
    unit_rows: np.ndarray

    def __post_init__(self) -> None:
        self.ids.setflags(write=False)
        self.unit_rows.setflags(write=False)


def build_index(vectors: np.ndarray, labeled_ids: Iterable[int]) -> Index:
    ids = np.asarray(sorted(set(int(i) for i in labeled_ids)), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot build an index over an empty labeled set")
    if ids.min() < 0 or ids.max() >= vectors.shape[0]:
        raise IndexError("labeled id out of range for the embedding table")
    return Index(ids=ids, unit_rows=_normalize_rows(vectors[ids]))


def retrieve_topk(
    index: Index,
    query_embedding: np.ndarray,
    k: int,
    query_id: int = -1,
    exclude: Sequence[int] = (),
    strategy: str = "topk",
) -> RetrievalResult:
    """The k most cosine-similar labeled nodes, query and exclusions removed."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _normalize_rows(np.asarray(query_embedding, dtype=np.float64).reshape(1, -1))[0]
    scores = index.unit_rows @ q

    drop = set(int(e) for e in exclude)
    drop.add(int(query_id))
    keep = ~np.isin(index.ids, np.array(sorted(drop), dtype=np.int64))
    ids = index.ids[keep]
    scores = scores[keep]

    order = np.lexsort((ids, -scores))[: min(k, ids.size)]
    hits = tuple((int(ids[i]), float(scores[i])) for i in order)
    return RetrievalResult(query_id=int(query_id), hits=hits, strategy=strategy)


def knn_raw_features(
    graph: TagGraph,
    query_id: int,
    k: int,
    labeled_ids: Iterable[int] | None = None,
) -> RetrievalResult:
    """Cosine k-NN over raw bundle features, bypassing the encoder."""
    pool = graph.labeled_node_ids() if labeled_ids is None else labeled_ids
    index = build_index(graph.features, pool)
    return retrieve_topk(
        index, graph.features[query_id], k, query_id=query_id, strategy="few_knn"
    )


def save_results_jsonl(results: Iterable[RetrievalResult], path: str | Path) -> None:
    """One JSON object per query: {"query", "hits": [[id, score], ...], "strategy"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps({
                "query": res.query_id,
                "hits": [[i, s] for i, s in res.hits],
                "strategy": res.strategy,
            }) + "\n")


def load_results_jsonl(path: str | Path) -> list[RetrievalResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                out.append(RetrievalResult(
                    query_id=int(obj["query"]),
                    hits=tuple((int(i), float(s)) for i, s in obj["hits"]),
                    strategy=obj.get("strategy", "topk"),
                ))
    return out


def random_examples(
    labeled_ids: Iterable[int],
    k: int,
    seed: int,
    query_id: int = -1,
) -> RetrievalResult:
    """K distinct uniform draws, deterministic per (seed, query_id); scores 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.asarray(sorted(set(int(i) for i in labeled_ids)), dtype=np.int64)
    ids = ids[ids != int(query_id)]
    rng = np.random.default_rng([seed & 0x7FFFFFFF, (int(query_id) + 1) & 0x7FFFFFFF])
    take = min(k, ids.size)
    picked = rng.choice(ids, size=take, replace=False)
    hits = tuple((int(i), 0.0) for i in picked)
    return RetrievalResult(query_id=int(query_id), hits=hits, strategy="few_rand")
