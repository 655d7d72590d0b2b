"""LLM feedback quantification: per-class perplexity, utility scores, ranking.

Two scorer kinds sit behind one client interface:

* ``http`` — an OpenAI-style completions endpoint. Perplexities come from a
  single request per (prompt, continuation) with prompt echo and token
  log-probabilities enabled and zero generated tokens; the continuation's
  log-probs are the echoed tokens at or beyond the prompt/continuation
  character boundary. The API key is read from the ``GICL_API_KEY``
  environment variable and sent as a bearer token.

* ``oracle`` — a deterministic stand-in for desk-scale tests. Its negative
  log-likelihood for a class is a closed-form function of how much the ICL
  example helps the query: an example with the query's true label and
  cosine-similar features makes the true class cheap, so utility grows
  monotonically with that help.

Every perplexity is cached in an append-only JSONL file keyed by
(scorer id, template hash, query, example, class); warm-cache collection
issues zero scorer calls.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import requests

from .graphstore import UNLABELED, TagGraph
from .prompts import PromptTemplate, render
from .retrieval import RetrievalResult


class ScorerError(Exception):
    """Transport failure, missing log-probs, or unalignable tokenization."""


@dataclass(frozen=True)
class ScorerSpec:
    kind: str = "oracle"  # "http" | "oracle"
    endpoint: str = ""
    model: str = ""
    timeout: float = 30.0
    max_parallel: int = 8
    retries: int = 3
    backoff: float = 0.25
    oracle_alpha: float = 2.0
    oracle_base: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("http", "oracle"):
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http scorer needs an endpoint")

    @property
    def scorer_id(self) -> str:
        payload = f"{self.kind}|{self.endpoint}|{self.model}|{self.oracle_alpha}|{self.oracle_base}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class FeedbackRecord:
    query_id: int
    example_id: int
    ppl_by_class: tuple[float, ...]
    utility: float
    scorer_id: str
    template_hash: str


@dataclass(frozen=True)
class RankedSet:
    """One query's candidates ordered by descending utility (ties by id)."""

    query_id: int
    example_ids: tuple[int, ...]
    utilities: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.example_ids) != len(self.utilities):
            raise ValueError("example_ids and utilities must have equal length")

    def __len__(self) -> int:
        return len(self.example_ids)

    def top(self, m: int) -> tuple[int, ...]:
        return self.example_ids[:m]


def ppl(logprobs: Sequence[float]) -> float:
    """exp(-mean(logprobs)) over continuation tokens."""
    if len(logprobs) == 0:
        raise ValueError("ppl needs at least one token log-probability")
    return math.exp(-sum(logprobs) / len(logprobs))


def utility(ppl_by_class: Sequence[float], gold_class: int) -> float:
    """Normalized inverse perplexity of the gold class (a share in (0,1))."""
    ppls = np.asarray(ppl_by_class, dtype=np.float64)
    if not 0 <= gold_class < len(ppls):
        raise ValueError(f"gold_class {gold_class} out of range for {len(ppls)} classes")
    if np.any(ppls <= 0) or np.any(np.isnan(ppls)):
        raise ValueError("perplexities must be positive")
    inv = np.where(np.isinf(ppls), 0.0, 1.0 / ppls)
    denom = inv.sum()
    if denom == 0:
        raise ValueError("all perplexities are infinite")
    return float(inv[gold_class] / denom)


# ---------------------------------------------------------------------------
# synthetic oracle


def oracle_help(
    query_features: np.ndarray,
    query_class: int,
    example_features: np.ndarray,
    example_class: int,
) -> float:
    """How much one example helps: its label matches and features align.

    Features are expected unit-normalized, so the cosine is a plain dot
    product, clipped at zero.
    """
    if example_class != query_class:
        return 0.0
    return max(0.0, float(np.dot(query_features, example_features)))


def synthetic_oracle_ppl(
    query_features: np.ndarray,
    query_class: int,
    example_features: np.ndarray,
    example_class: int,
    class_index: int,
    alpha: float = 2.0,
    base: float = 0.1,
) -> float:
    """Closed-form perplexity of one class verbalization under the oracle.

    NLL(c) = base + alpha * (1 - h * [c == true class]), with help
    h = [example label == true label] * max(0, cos(query, example)).
    A fully helpful example drives the true class NLL down to ``base``
    while wrong classes stay at base + alpha.
    """
    h = oracle_help(query_features, query_class, example_features, example_class)
    nll = base + alpha * (1.0 - (h if class_index == query_class else 0.0))
    return math.exp(nll)


# ---------------------------------------------------------------------------
# response cache


def cache_key(scorer_id: str, template_hash: str, query_id: int, example_id: int, class_index: int) -> str:
    payload = f"{scorer_id}|{template_hash}|{query_id}|{example_id}|{class_index}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:24]


class FeedbackCache:
    """Append-only JSONL perplexity cache, content-addressed by request key.

    One writer at a time (appends are serialized through a lock); reads are
    plain dict lookups. Pass path=None for a purely in-memory cache.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, float] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.is_file():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        obj = json.loads(line)
                        self._data[obj["k"]] = float(obj["ppl"])

    def __len__(self) -> int:
        return len(self._data)

    def get(self, scorer_id: str, template_hash: str, q: int, e: int, c: int) -> float | None:
        return self._data.get(cache_key(scorer_id, template_hash, q, e, c))

    def put(self, scorer_id: str, template_hash: str, q: int, e: int, c: int, value: float) -> None:
        key = cache_key(scorer_id, template_hash, q, e, c)
        with self._lock:
            if key in self._data:
                return
            self._data[key] = value
            if self.path is not None:
                record = {"k": key, "q": q, "e": e, "c": c, "ppl": value,
                          "sid": scorer_id, "th": template_hash}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# scorer clients


class OracleClient:
    """Deterministic LLM stand-in driven by graph features and labels.

    Needs call metadata (query id, example ids, class index) because its
    closed form is a function of node identity, not prompt text.
    """

    def __init__(self, spec: ScorerSpec, graph: TagGraph):
        self.spec = spec
        self.graph = graph
        self.calls = 0
        feats = graph.features.astype(np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        self._unit = feats / np.where(norms > 0, norms, 1.0)

    def _help(self, query_id: int, example_ids: Sequence[int]) -> float:
        best = 0.0
        for e in example_ids:
            best = max(
                best,
                oracle_help(
                    self._unit[query_id],
                    int(self.graph.labels[query_id]),
                    self._unit[e],
                    int(self.graph.labels[e]),
                ),
            )
        return best

    def _nll(self, query_id: int, example_ids: Sequence[int], class_index: int) -> float:
        h = self._help(query_id, example_ids)
        gold = int(self.graph.labels[query_id])
        return self.spec.oracle_base + self.spec.oracle_alpha * (
            1.0 - (h if class_index == gold else 0.0)
        )

    def token_logprobs(self, prompt: str, continuation: str, meta: dict | None = None) -> list[float]:
        if not continuation:
            raise ScorerError("continuation must be non-empty")
        if not meta or "query_id" not in meta or "class_index" not in meta:
            raise ScorerError("oracle scorer needs query_id/example_ids/class_index metadata")
        self.calls += 1
        nll = self._nll(meta["query_id"], meta.get("example_ids", ()), meta["class_index"])
        return [-nll]

    def complete(self, prompt: str, meta: dict | None = None) -> str:
        if not meta or "query_id" not in meta:
            raise ScorerError("oracle scorer needs query_id/example_ids metadata")
        self.calls += 1
        q = meta["query_id"]
        examples = meta.get("example_ids", ())
        nlls = [self._nll(q, examples, c) for c in range(self.graph.n_classes)]
        return self.graph.label_vocab[int(np.argmin(nlls))]


class HttpClient:
    """Completions-API scorer with bounded retries and echo-logprob parsing.

    Safe to share across the configured number of worker threads; the call
    counters are lock-protected so tests can assert on them exactly.
    """

    def __init__(self, spec: ScorerSpec):
        self.spec = spec
        self.calls = 0
        self.attempts = 0
        self._count_lock = threading.Lock()
        self._session = requests.Session()

    def _bump(self, attr: str) -> None:
        with self._count_lock:
            setattr(self, attr, getattr(self, attr) + 1)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get("GICL_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, body: dict) -> dict:
        url = self.spec.endpoint.rstrip("/") + "/v1/completions"
        last_error: Exception | None = None
        for attempt in range(self.spec.retries + 1):
            self._bump("attempts")
            try:
                resp = self._session.post(
                    url, json=body, headers=self._headers(), timeout=self.spec.timeout
                )
                if resp.status_code == 200:
                    return resp.json()
                last_error = ScorerError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            except requests.RequestException as exc:
                last_error = exc
            if attempt < self.spec.retries:
                time.sleep(self.spec.backoff * (2**attempt))
        raise ScorerError(
            f"transport failure after {self.spec.retries + 1} attempts: {last_error}"
        ) from last_error

    def token_logprobs(self, prompt: str, continuation: str, meta: dict | None = None) -> list[float]:
        if not continuation:
            raise ScorerError("continuation must be non-empty")
        self._bump("calls")
        body = {
            "model": self.spec.model,
            "prompt": prompt + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        data = self._post(body)
        try:
            lp = data["choices"][0]["logprobs"]
            token_logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ScorerError("server response lacks echoed token log-probabilities") from exc
        boundary = len(prompt)
        picked = [
            (off, logp) for off, logp in zip(offsets, token_logprobs) if off >= boundary
        ]
        if not picked:
            raise ScorerError("no echoed tokens at or beyond the continuation boundary")
        if picked[0][0] != boundary:
            raise ScorerError(
                f"tokenizer boundary cannot be aligned: continuation starts at char "
                f"{boundary} but nearest token starts at {picked[0][0]}"
            )
        if any(logp is None for _, logp in picked):
            raise ScorerError("continuation token without a log-probability")
        return [float(logp) for _, logp in picked]

    def complete(self, prompt: str, meta: dict | None = None, max_tokens: int = 16) -> str:
        self._bump("calls")
        body = {
            "model": self.spec.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": 0,
        }
        data = self._post(body)
        try:
            return str(data["choices"][0]["text"])
        except (KeyError, IndexError, TypeError) as exc:
            raise ScorerError("server response lacks completion text") from exc


def make_client(spec: ScorerSpec, graph: TagGraph | None = None):
    if spec.kind == "oracle":
        if graph is None:
            raise ValueError("oracle scorer needs the graph")
        return OracleClient(spec, graph)
    return HttpClient(spec)


def token_logprobs(
    spec: ScorerSpec,
    prompt_text: str,
    continuation_text: str,
    meta: dict | None = None,
    client=None,
    graph: TagGraph | None = None,
) -> list[float]:
    """One log-probability per continuation token under the scoring model."""
    if client is None:
        client = make_client(spec, graph)
    return client.token_logprobs(prompt_text, continuation_text, meta=meta)


# ---------------------------------------------------------------------------
# candidate ranking


class RankOutcome(NamedTuple):
    ranked: RankedSet
    records: list[FeedbackRecord]
    failed: tuple[int, ...]  # example ids that could not be fully scored


def class_verbalization(label: str) -> str:
    """Token sequence whose perplexity stands for a class: space + label."""
    return " " + label


def rank_candidates(
    graph: TagGraph,
    query_id: int,
    candidates: RetrievalResult | Sequence[int],
    spec: ScorerSpec,
    template: PromptTemplate,
    cache: FeedbackCache,
    client=None,
    max_chars_per_doc: int = 1200,
) -> RankOutcome:
    """Score each candidate's per-class perplexity and rank by utility.

    Each candidate is scored in its own single-example prompt. Cache hits
    skip the scorer entirely; candidates with any unscorable class are
    reported in ``failed`` and left out of the ranking.
    """
    ids = list(candidates.node_ids()) if isinstance(candidates, RetrievalResult) else [int(c) for c in candidates]
    if not ids:
        raise ValueError("rank_candidates needs a non-empty candidate set")
    gold = int(graph.labels[query_id])
    if gold == UNLABELED:
        raise ValueError(f"query node {query_id} has no gold label")
    if client is None:
        client = make_client(spec, graph)

    sid, th = spec.scorer_id, template.template_hash
    n_classes = graph.n_classes
    query_text = graph.texts[query_id]

    todo: list[tuple[int, int]] = []
    ppls: dict[tuple[int, int], float] = {}
    for e in ids:
        for c in range(n_classes):
            hit = cache.get(sid, th, query_id, e, c)
            if hit is None:
                todo.append((e, c))
            else:
                ppls[(e, c)] = hit

    def score_one(pair: tuple[int, int]) -> tuple[tuple[int, int], float | None]:
        e, c = pair
        prompt = render(
            template,
            [(graph.texts[e], graph.label_vocab[int(graph.labels[e])])],
            query_text,
            max_chars_per_doc=max_chars_per_doc,
        )
        meta = {"query_id": query_id, "example_ids": [e], "class_index": c}
        try:
            lps = client.token_logprobs(prompt, class_verbalization(graph.label_vocab[c]), meta=meta)
        except ScorerError:
            return pair, None
        return pair, ppl(lps)

    workers = spec.max_parallel if (spec.kind == "http" and spec.max_parallel > 1) else 1
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_one, todo))
    else:
        results = [score_one(pair) for pair in todo]
    for (e, c), value in results:
        if value is not None:
            ppls[(e, c)] = value
            cache.put(sid, th, query_id, e, c, value)

    records: list[FeedbackRecord] = []
    failed: list[int] = []
    for e in ids:
        vector = [ppls.get((e, c)) for c in range(n_classes)]
        if any(v is None for v in vector):
            failed.append(e)
            continue
        records.append(
            FeedbackRecord(
                query_id=query_id,
                example_id=e,
                ppl_by_class=tuple(vector),
                utility=utility(vector, gold),
                scorer_id=sid,
                template_hash=th,
            )
        )

    records_sorted = sorted(records, key=lambda r: (-r.utility, r.example_id))
    ranked = RankedSet(
        query_id=query_id,
        example_ids=tuple(r.example_id for r in records_sorted),
        utilities=tuple(r.utility for r in records_sorted),
    )
    return RankOutcome(ranked=ranked, records=records_sorted, failed=tuple(failed))
