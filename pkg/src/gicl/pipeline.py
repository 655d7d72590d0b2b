"""End-to-end inference, baselines, evaluation, and sweeps.

Every run is described by a RunManifest whose hash covers the config,
seeds, data, template, and scorer identity (but not wall-clock time), so
identical manifests in single-thread mode produce byte-identical reports.
Reports are append-only: a rerun writes a new file, never mutates an old
one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .encoder import classify_logits
from .graphstore import UNLABELED, SplitSpec, TagGraph, neighbors
from .prompts import (
    IclExample,
    PromptTemplate,
    majority_vote,
    parse_answer,
    purify_llm_select,
    purify_minority,
    render,
)
from .retrieval import Index, build_index, random_examples, retrieve_topk
from .scoring import FeedbackCache, ScorerError, ScorerSpec, make_client
from .training import TrainConfig, TrainedModel, train

STRATEGIES = ("askgnn", "zero_shot", "few_rand", "few_knn", "mv_knn", "mv_askgnn", "npg", "npl")


@dataclass(frozen=True)
class RunManifest:
    config: dict
    seed: int
    bundle_hash: str
    template_hash: str
    scorer_id: str
    version: str = __version__
    created_at: float = field(default_factory=time.time)

    @property
    def manifest_hash(self) -> str:
        """Digest of everything that determines the run output; excludes
        the creation timestamp so identical runs share a hash."""
        payload = json.dumps(
            {
                "config": self.config,
                "seed": self.seed,
                "bundle_hash": self.bundle_hash,
                "template_hash": self.template_hash,
                "scorer_id": self.scorer_id,
                "version": self.version,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        obj = {
            "config": self.config,
            "seed": self.seed,
            "bundle_hash": self.bundle_hash,
            "template_hash": self.template_hash,
            "scorer_id": self.scorer_id,
            "version": self.version,
            "created_at": self.created_at,
            "manifest_hash": self.manifest_hash,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(
            config=obj["config"],
            seed=obj["seed"],
            bundle_hash=obj["bundle_hash"],
            template_hash=obj["template_hash"],
            scorer_id=obj["scorer_id"],
            version=obj.get("version", __version__),
            created_at=obj.get("created_at", 0.0),
        )


@dataclass(frozen=True)
class EvalRow:
    query_id: int
    gold: int
    predicted: int | None
    strategy: str
    n_icl: int
    parsed: bool
    note: str = ""


def evaluate_accuracy(rows: Sequence[EvalRow]) -> dict:
    """Accuracy with unparsed rows counted as incorrect, plus confusion counts."""
    if not rows:
        raise ValueError("cannot evaluate an empty report")
    n = len(rows)
    correct = sum(1 for r in rows if r.parsed and r.predicted == r.gold)
    unparsed = sum(1 for r in rows if not r.parsed)
    confusion: dict[str, int] = {}
    for r in rows:
        key = f"{r.gold}->{r.predicted if r.parsed else 'unparsed'}"
        confusion[key] = confusion.get(key, 0) + 1
    return {
        "accuracy": correct / n,
        "n": n,
        "correct": correct,
        "unparsed": unparsed,
        "confusion": confusion,
    }


def write_report(
    rows: Sequence[EvalRow],
    summary: dict,
    csv_path: str | Path,
    json_path: str | Path,
    overwrite: bool = False,
) -> None:
    """Emit the per-query CSV and summary JSON; never clobbers an old report."""
    csv_path, json_path = Path(csv_path), Path(json_path)
    if not overwrite:
        for p in (csv_path, json_path):
            if p.exists():
                raise FileExistsError(f"{p}: reports are append-only, refusing to overwrite")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "gold", "predicted", "strategy", "n_icl", "parsed", "note"])
        for r in rows:
            writer.writerow(
                [r.query_id, r.gold, "" if r.predicted is None else r.predicted,
                 r.strategy, r.n_icl, int(r.parsed), r.note]
            )
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_report(csv_path: str | Path) -> list[EvalRow]:
    rows: list[EvalRow] = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                EvalRow(
                    query_id=int(rec["query_id"]),
                    gold=int(rec["gold"]),
                    predicted=int(rec["predicted"]) if rec["predicted"] != "" else None,
                    strategy=rec["strategy"],
                    n_icl=int(rec["n_icl"]),
                    parsed=bool(int(rec["parsed"])),
                    note=rec["note"],
                )
            )
    return rows


# ---------------------------------------------------------------------------
# strategies


def _examples_from_ids(graph: TagGraph, ids: Sequence[int]) -> list[IclExample]:
    out = []
    for i in ids:
        label_idx = int(graph.labels[i])
        if label_idx == UNLABELED:
            raise ValueError(f"node {i} has no label to use as an ICL example")
        out.append(IclExample(text=graph.texts[i], label=graph.label_vocab[label_idx]))
    return out


def _pseudo_examples(graph: TagGraph, ids: Sequence[int], labels: Sequence[int]) -> list[IclExample]:
    return [
        IclExample(text=graph.texts[i], label=graph.label_vocab[int(lab)])
        for i, lab in zip(ids, labels)
    ]


def _llm_row(
    graph: TagGraph,
    template: PromptTemplate,
    client,
    query_id: int,
    example_ids: Sequence[int],
    examples: Sequence[IclExample],
    strategy: str,
    max_chars_per_doc: int = 1200,
) -> EvalRow:
    """Render, complete, parse; transport failures become Unparsed rows."""
    gold = int(graph.labels[query_id])
    prompt = render(template, examples, graph.texts[query_id], max_chars_per_doc=max_chars_per_doc)
    meta = {"query_id": query_id, "example_ids": list(example_ids)}
    try:
        completion = client.complete(prompt, meta=meta)
    except ScorerError as exc:
        return EvalRow(query_id, gold, None, strategy, len(examples), False, note=str(exc)[:120])
    predicted = parse_answer(completion, graph.label_vocab)
    return EvalRow(
        query_id, gold, predicted, strategy, len(examples), parsed=predicted is not None
    )


def _mv_row(graph: TagGraph, query_id: int, examples: Sequence[IclExample], strategy: str) -> EvalRow:
    gold = int(graph.labels[query_id])
    if not examples:
        return EvalRow(query_id, gold, None, strategy, 0, False, note="no examples to vote on")
    label = majority_vote(examples)
    return EvalRow(query_id, gold, graph.label_vocab.index(label), strategy, len(examples), True)


def _apply_purify(
    ids: list[int],
    examples: list[IclExample],
    purify: str | None,
    budget: int | None,
    client,
) -> tuple[list[int], list[IclExample], str]:
    """Filter (id, example) pairs with the configured purification mode."""
    if purify is None or not examples:
        return ids, examples, ""
    if purify == "minority":
        selected = purify_minority(examples)
        note = ""
    elif purify == "llm_select":
        chosen = budget if budget is not None else max(1, (2 * len(examples)) // 3)
        chosen = min(chosen, len(examples))
        selected, fell_back = purify_llm_select(
            examples, lambda p: client.complete(p, meta=None), chosen
        )
        note = "purify fallback" if fell_back else ""
    else:
        raise ValueError(f"unknown purify mode {purify!r}")
    remaining = list(zip(ids, examples))
    kept_ids: list[int] = []
    kept_examples: list[IclExample] = []
    for sel in selected:
        for j, (node_id, ex) in enumerate(remaining):
            if ex is sel:
                kept_ids.append(node_id)
                kept_examples.append(ex)
                remaining.pop(j)
                break
    return kept_ids, kept_examples, note


def run_strategy(
    strategy: str,
    graph: TagGraph,
    split: SplitSpec,
    spec: ScorerSpec,
    template: PromptTemplate,
    model: TrainedModel | None = None,
    k_icl: int = 30,
    seed: int = 0,
    purify: str | None = None,
    purify_budget: int | None = None,
    client=None,
    single_thread: bool = False,
    query_ids: Sequence[int] | None = None,
) -> list[EvalRow]:
    """Produce one EvalRow per test query under the chosen strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if strategy in ("askgnn", "mv_askgnn", "npg") and model is None:
        raise ValueError(f"strategy {strategy!r} needs a trained model")
    if client is None:
        client = make_client(spec, graph)
    queries = [int(q) for q in (split.test_ids if query_ids is None else query_ids)]

    trained_index: Index | None = None
    raw_index: Index | None = None
    if strategy in ("askgnn", "mv_askgnn"):
        trained_index = build_index(model.embeddings.vectors, split.labeled_ids)
    if strategy in ("few_knn", "mv_knn"):
        raw_index = build_index(graph.features, split.labeled_ids)
    npg_labels = (
        np.argmax(classify_logits(model.embeddings, model.params), axis=1)
        if strategy == "npg"
        else None
    )
    npl_memo: dict[int, int | None] = {}

    def npl_pseudo(node: int) -> int | None:
        if node not in npl_memo:
            prompt = render(template, [], graph.texts[node])
            try:
                completion = client.complete(prompt, meta={"query_id": node, "example_ids": []})
                npl_memo[node] = parse_answer(completion, graph.label_vocab)
            except ScorerError:
                npl_memo[node] = None
        return npl_memo[node]

    def one(q: int) -> EvalRow:
        note = ""
        if strategy == "zero_shot" or (k_icl == 0 and strategy in ("askgnn", "few_rand", "few_knn")):
            return _llm_row(graph, template, client, q, [], [], strategy)
        if strategy == "few_rand":
            res = random_examples(split.labeled_ids, k_icl, seed, query_id=q)
            return _llm_row(graph, template, client, q, res.node_ids(), _examples_from_ids(graph, res.node_ids()), strategy)
        if strategy in ("few_knn", "mv_knn"):
            res = retrieve_topk(raw_index, graph.features[q], k_icl, query_id=q, strategy=strategy)
            examples = _examples_from_ids(graph, res.node_ids())
            if strategy == "mv_knn":
                return _mv_row(graph, q, examples, strategy)
            return _llm_row(graph, template, client, q, res.node_ids(), examples, strategy)
        if strategy in ("askgnn", "mv_askgnn"):
            res = retrieve_topk(
                trained_index, model.embeddings.vectors[q], k_icl, query_id=q, strategy=strategy
            )
            examples = _examples_from_ids(graph, res.node_ids())
            ids = list(res.node_ids())
            if strategy == "mv_askgnn":
                return _mv_row(graph, q, examples, strategy)
            ids, examples, note = _apply_purify(ids, examples, purify, purify_budget, client)
            row = _llm_row(graph, template, client, q, ids, examples, strategy)
            return row if not note else EvalRow(
                row.query_id, row.gold, row.predicted, row.strategy, row.n_icl, row.parsed, note
            )
        if strategy in ("npg", "npl"):
            neigh = [int(v) for v in neighbors(graph, q)]
            if strategy == "npg":
                pseudo = [int(npg_labels[v]) for v in neigh]
            else:
                raw = [(v, npl_pseudo(v)) for v in neigh]
                neigh = [v for v, lab in raw if lab is not None]
                pseudo = [lab for _, lab in raw if lab is not None]
            examples = _pseudo_examples(graph, neigh, pseudo)
            return _llm_row(graph, template, client, q, neigh, examples, strategy)
        raise AssertionError(strategy)

    parallel = (
        not single_thread
        and spec.kind == "http"
        and spec.max_parallel > 1
        and strategy not in ("mv_knn", "mv_askgnn")
    )
    if parallel and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=spec.max_parallel) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]


def sweep(
    axis: str,
    values: Sequence[float],
    graph: TagGraph,
    split: SplitSpec,
    spec: ScorerSpec,
    template: PromptTemplate,
    base_config: TrainConfig,
    cache: FeedbackCache | None = None,
    strategy: str = "askgnn",
) -> list[dict]:
    """One (train+)infer run per value; per-value failures do not stop the sweep.

    A beta sweep shares the feedback cache across runs; a k_icl sweep trains
    once and only re-runs inference.
    """
    if axis not in ("beta", "k_icl"):
        raise ValueError("sweep axis must be 'beta' or 'k_icl'")
    if not values:
        raise ValueError("sweep needs at least one value")
    cache = cache if cache is not None else FeedbackCache()
    results: list[dict] = []

    shared_model: TrainedModel | None = None
    if axis == "k_icl":
        shared_model = train(graph, split, spec, template, base_config, cache=cache)

    for value in values:
        try:
            if axis == "beta":
                cfg = TrainConfig.from_dict({**base_config.to_dict(), "beta": float(value)})
                model = train(graph, split, spec, template, cfg, cache=cache)
                k = cfg.k_icl
            else:
                model, cfg = shared_model, base_config
                k = int(value)
            rows = run_strategy(
                strategy, graph, split, spec, template, model=model,
                k_icl=k, seed=cfg.seed, single_thread=True,
            )
            summary = evaluate_accuracy(rows)
            results.append({"value": value, "accuracy": summary["accuracy"], "error": ""})
        except Exception as exc:  # noqa: BLE001 - sweep must keep going
            results.append({"value": value, "accuracy": float("nan"), "error": str(exc)[:200]})
    return results


def write_sweep_csv(results: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "accuracy", "error"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(results)
