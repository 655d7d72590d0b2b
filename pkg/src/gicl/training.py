"""Retriever optimization: listwise feedback loss + node classification loss.

Each round freezes the encoder, retrieves every training query's top-K
candidates, scores them through the scorer cache, and then runs full-batch
gradient steps on

    L = beta * L_feedback + (1 - beta) * L_clf

where L_feedback is a temperature-scaled listwise softmax over each
query's candidate list (positives chosen by feedback_mode) and L_clf is
softmax cross-entropy of the linear head over the supervised nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore
from .encoder import (
    EmbeddingTable,
    EncoderConfig,
    encode_all,
    encode_on_tape,
    init_params,
    logits_on_tape,
    neighbor_aggregator,
)
from .graphstore import SplitSpec, TagGraph
from .nncore import ParamSet, Tape, Tensor2
from .prompts import PromptTemplate
from .retrieval import build_index, retrieve_topk
from .scoring import FeedbackCache, RankedSet, ScorerSpec, make_client, rank_candidates

FEEDBACK_MODES = ("top_m", "all", "rank_discount")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.2
    k_feedback: int = 20
    k_icl: int = 30
    tau: float = 1.0
    feedback_mode: str = "top_m"
    top_m: int = 1
    rounds: int = 1
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    n_layers: int = 3
    hidden_dim: int = 256
    dropout: float = 0.5
    coverage_floor: float = 0.5

    def __post_init__(self) -> None:
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"feedback_mode must be one of {FEEDBACK_MODES}")
        if self.top_m > self.k_feedback:
            raise ValueError("top_m cannot exceed k_feedback")

    def encoder_config(self, graph: TagGraph) -> EncoderConfig:
        return EncoderConfig(
            input_dim=graph.feature_dim,
            n_classes=graph.n_classes,
            n_layers=self.n_layers,
            hidden_dim=self.hidden_dim,
            dropout=self.dropout,
            epochs=self.epochs,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class FeedbackSet:
    """Per-query ranked candidates collected in one feedback round."""

    by_query: dict[int, RankedSet]
    round_index: int
    n_scored: int
    n_unscored: int

    @property
    def coverage(self) -> float:
        total = self.n_scored + self.n_unscored
        return self.n_scored / total if total else 0.0


@dataclass
class TrainedModel:
    params: ParamSet
    config: TrainConfig
    embeddings: EmbeddingTable
    log: list[dict] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["epoch", "round", "loss_total", "loss_feedback", "loss_clf", "lr"],
                lineterminator="\n",
            )
            writer.writeheader()
            writer.writerows(self.log)


def positive_weights(ranked: RankedSet, mode: str, top_m: int) -> np.ndarray:
    """Per-candidate positive weight, aligned with the ranked order."""
    n = len(ranked)
    if mode == "top_m":
        w = np.zeros(n)
        w[: min(top_m, n)] = 1.0
    elif mode == "all":
        w = np.ones(n)
    elif mode == "rank_discount":
        w = 1.0 / np.log2(np.arange(1, n + 1) + 1.0)
    else:
        raise ValueError(f"unknown feedback mode {mode!r}")
    return w


def feedback_loss(
    tape: Tape,
    embeddings: Tensor2,
    feedback: FeedbackSet | dict[int, RankedSet],
    config: TrainConfig,
) -> Tensor2:
    """Listwise softmax loss over each query's candidates at temperature tau.

    For every query the full candidate set forms the softmax denominator;
    positives (by feedback_mode) supply the numerators. Normalized by the
    total positive weight. Embedding rows must already be L2-normalized so
    the similarity is a cosine.
    """
    by_query = feedback.by_query if isinstance(feedback, FeedbackSet) else feedback
    queries = [q for q, r in sorted(by_query.items()) if len(r) > 0]
    if not queries:
        raise ValueError("feedback_loss: no query has a scored candidate")

    q_flat: list[int] = []
    c_flat: list[int] = []
    weights: list[float] = []
    segments: list[tuple[int, int]] = []
    for q in queries:
        ranked = by_query[q]
        start = len(c_flat)
        q_flat.extend([q] * len(ranked))
        c_flat.extend(ranked.example_ids)
        weights.extend(positive_weights(ranked, config.feedback_mode, config.top_m))
        segments.append((start, len(c_flat)))

    q_rows = nncore.gather_rows(tape, embeddings, q_flat)
    c_rows = nncore.gather_rows(tape, embeddings, c_flat)
    sims = nncore.rowwise_dot(tape, q_rows, c_rows)
    if config.tau != 1.0:
        sims = nncore.scale(tape, sims, 1.0 / config.tau)
    return nncore.listwise_xent(tape, sims, segments, np.asarray(weights))


def clf_loss(
    tape: Tape,
    embeddings: Tensor2,
    params: ParamSet,
    labels: np.ndarray,
    labeled_ids: Sequence[int],
) -> Tensor2:
    """Mean softmax cross-entropy of the head over the supervised nodes."""
    ids = np.asarray(labeled_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("clf_loss needs a non-empty labeled set")
    rows = nncore.gather_rows(tape, embeddings, ids)
    logits = logits_on_tape(tape, rows, params)
    return nncore.softmax_xent(tape, logits, labels[ids])


def combined_loss(tape: Tape, lf: Tensor2, lc: Tensor2, beta: float) -> Tensor2:
    return nncore.combine_scalars(tape, lf, lc, beta, 1.0 - beta)


class ScorerCoverageError(Exception):
    """Feedback collection fell below the configured scored-pair floor."""


def collect_feedback_round(
    graph: TagGraph,
    split: SplitSpec,
    params: ParamSet,
    config: TrainConfig,
    spec: ScorerSpec,
    template: PromptTemplate,
    cache: FeedbackCache,
    client=None,
    round_index: int = 0,
) -> FeedbackSet:
    """Retrieve each query's top-K candidates under the frozen encoder and
    rank them by scored utility. Aborts when scored coverage falls below the
    configured floor (partial results stay cached)."""
    enc = config.encoder_config(graph)
    table = encode_all(graph, params, enc, training=False)
    index = build_index(table.vectors, split.labeled_ids)
    if client is None:
        client = make_client(spec, graph)

    by_query: dict[int, RankedSet] = {}
    n_scored = 0
    n_unscored = 0
    for q in split.query_train_ids:
        q = int(q)
        hits = retrieve_topk(index, table.vectors[q], config.k_feedback, query_id=q)
        if len(hits) == 0:
            continue
        outcome = rank_candidates(graph, q, hits, spec, template, cache, client=client)
        n_scored += len(outcome.ranked)
        n_unscored += len(outcome.failed)
        if len(outcome.ranked):
            by_query[q] = outcome.ranked

    feedback = FeedbackSet(
        by_query=by_query, round_index=round_index, n_scored=n_scored, n_unscored=n_unscored
    )
    if feedback.coverage < config.coverage_floor:
        raise ScorerCoverageError(
            f"round {round_index}: only {n_scored}/{n_scored + n_unscored} candidate pairs "
            f"scored, below the {config.coverage_floor:.0%} floor"
        )
    return feedback


def train(
    graph: TagGraph,
    split: SplitSpec,
    spec: ScorerSpec,
    template: PromptTemplate,
    config: TrainConfig,
    cache: FeedbackCache | None = None,
    client=None,
) -> TrainedModel:
    """Alternate feedback collection and full-batch gradient epochs.

    Feedback is collected once per round against frozen embeddings; the
    gradient loop is single-threaded and deterministic for a given seed.
    """
    cache = cache if cache is not None else FeedbackCache()
    enc = config.encoder_config(graph)
    params = init_params(enc, config.seed)
    dropout_rng = np.random.default_rng([config.seed & 0x7FFFFFFF, 0xD0])
    aggregator = neighbor_aggregator(graph)
    features = Tensor2(graph.features.astype(params.dtype))
    labels = graph.labels

    log: list[dict] = []
    for round_index in range(config.rounds):
        feedback = collect_feedback_round(
            graph, split, params, config, spec, template, cache,
            client=client, round_index=round_index,
        )
        for epoch in range(config.epochs):
            try:
                tape = Tape()
                emb = encode_on_tape(
                    tape, features, aggregator, params, enc, training=True, rng=dropout_rng
                )
                lf = feedback_loss(tape, emb, feedback, config)
                lc = clf_loss(tape, emb, params, labels, split.labeled_ids)
                loss = combined_loss(tape, lf, lc, config.beta)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"non-finite loss at round {round_index} epoch {epoch}: {exc}"
                ) from exc
            grads = nncore.backward(tape, loss, params)
            nncore.adam_step(params, grads, lr=config.lr)
            log.append(
                {
                    "epoch": epoch,
                    "round": round_index,
                    "loss_total": loss.item(),
                    "loss_feedback": lf.item(),
                    "loss_clf": lc.item(),
                    "lr": config.lr,
                }
            )

    final = encode_all(graph, params, enc, training=False)
    return TrainedModel(params=params, config=config, embeddings=final, log=log)
