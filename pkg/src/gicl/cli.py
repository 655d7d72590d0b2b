"""Command line entry points.

    gicl synth     generate a synthetic block-model bundle
    gicl prepare   validate a bundle and print its stats
    gicl train     train the retriever against a scorer
    gicl feedback  run one feedback-collection round standalone
    gicl infer     run trained-retriever inference over the test split
    gicl baseline  run a non-learned strategy
    gicl eval      recompute a summary from a report CSV
    gicl sweep     sweep beta or k_icl and emit a CSV

Config files are JSON objects mirroring TrainConfig plus a "scorer"
sub-object mirroring ScorerSpec and optional "fraction"/"template" keys;
command-line flags override file values. The HTTP scorer reads its API key
from the GICL_API_KEY environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import EmbeddingTable
from .graphstore import (
    TagGraph,
    bundle_hash,
    load_bundle,
    load_split_file,
    sample_label_fraction,
    synth_sbm,
    write_bundle,
)
from .nncore import ParamSet
from .pipeline import (
    RunManifest,
    evaluate_accuracy,
    read_report,
    run_strategy,
    sweep,
    write_report,
    write_sweep_csv,
)
from .prompts import DEFAULT_TEMPLATE, PromptTemplate, load_template
from .scoring import FeedbackCache, ScorerSpec
from .training import TrainConfig, TrainedModel, collect_feedback_round, train


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _scorer_from_config(cfg: dict, args: argparse.Namespace) -> ScorerSpec:
    raw = dict(cfg.get("scorer", {}))
    if getattr(args, "scorer_kind", None):
        raw["kind"] = args.scorer_kind
    if getattr(args, "endpoint", None):
        raw["endpoint"] = args.endpoint
    if getattr(args, "model_name", None):
        raw["model"] = args.model_name
    if getattr(args, "single_thread", False):
        raw["max_parallel"] = 1
    known = {f for f in ScorerSpec.__dataclass_fields__}
    return ScorerSpec(**{k: v for k, v in raw.items() if k in known})


def _train_config(cfg: dict, args: argparse.Namespace) -> TrainConfig:
    raw = {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__}
    for name in ("beta", "epochs", "rounds", "seed", "k_feedback", "k_icl", "lr",
                 "hidden_dim", "n_layers", "tau"):
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    return TrainConfig(**raw)


def _template(cfg: dict, args: argparse.Namespace) -> PromptTemplate:
    name = getattr(args, "template", None) or cfg.get("template")
    return load_template(name) if name else DEFAULT_TEMPLATE


def _split_for(graph: TagGraph, bundle: str, cfg: dict, args: argparse.Namespace):
    fraction = getattr(args, "fraction", None)
    if fraction is None:
        fraction = cfg.get("fraction", 0.1)
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = cfg.get("seed", 0)
    preset = load_split_file(bundle)
    test_ids = preset["test"] if preset is not None and preset["test"].size else None
    return sample_label_fraction(graph, float(fraction), int(seed), test_ids=test_ids)


def _manifest(config: TrainConfig, spec: ScorerSpec, template: PromptTemplate,
              bundle: str, extra: dict | None = None) -> RunManifest:
    cfg = config.to_dict()
    if extra:
        cfg.update(extra)
    return RunManifest(
        config=cfg,
        seed=config.seed,
        bundle_hash=bundle_hash(bundle),
        template_hash=template.template_hash,
        scorer_id=spec.scorer_id,
    )


def _load_model(model_dir: str, graph: TagGraph) -> tuple[TrainedModel, RunManifest]:
    mdir = Path(model_dir)
    manifest = RunManifest.load(mdir / "manifest.json")
    config = TrainConfig.from_dict(manifest.config)
    params = ParamSet.load(mdir / "params.bin")
    embeddings = EmbeddingTable.load(mdir / "embeddings")
    return TrainedModel(params=params, config=config, embeddings=embeddings, log=[]), manifest


def _save_model(model: TrainedModel, manifest: RunManifest, out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.params.save(out / "params.bin")
    model.embeddings.save(out / "embeddings")
    model.write_log(out / "train_log.csv")
    manifest.save(out / "manifest.json")


def cmd_synth(args: argparse.Namespace) -> int:
    graph = synth_sbm(
        n_nodes=args.n, n_classes=args.classes, p_in=args.pin, p_out=args.pout,
        d=args.dim, noise=args.noise, seed=args.seed,
    )
    write_bundle(graph, args.out)
    print(json.dumps({"nodes": graph.n_nodes, "edges": graph.n_edges // 2,
                      "classes": graph.n_classes, "out": str(args.out)}))
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    graph = load_bundle(args.bundle, symmetrize=not args.directed)
    labeled = graph.labeled_node_ids()
    stats = {
        "nodes": graph.n_nodes,
        "stored_edges": graph.n_edges,
        "feature_dim": graph.feature_dim,
        "classes": graph.n_classes,
        "labeled": int(labeled.size),
        "label_counts": {
            graph.label_vocab[c]: int(n)
            for c, n in enumerate(np.bincount(graph.labels[labeled], minlength=graph.n_classes))
        },
    }
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg_file = _load_config(args.config)
    config = _train_config(cfg_file, args)
    spec = _scorer_from_config(cfg_file, args)
    template = _template(cfg_file, args)
    graph = load_bundle(args.bundle)
    split = _split_for(graph, args.bundle, cfg_file, args)
    cache = FeedbackCache(args.cache) if args.cache else FeedbackCache()
    model = train(graph, split, spec, template, config, cache=cache)
    manifest = _manifest(config, spec, template, args.bundle,
                         extra={"fraction": float(split.fraction)})
    _save_model(model, manifest, args.out)
    print(json.dumps({
        "out": str(args.out),
        "manifest_hash": manifest.manifest_hash,
        "final_loss": model.log[-1]["loss_total"] if model.log else None,
    }))
    return 0


def cmd_feedback(args: argparse.Namespace) -> int:
    cfg_file = _load_config(args.config)
    config = _train_config(cfg_file, args)
    spec = _scorer_from_config(cfg_file, args)
    template = _template(cfg_file, args)
    graph = load_bundle(args.bundle)
    split = _split_for(graph, args.bundle, cfg_file, args)
    if args.model:
        model, _ = _load_model(args.model, graph)
        params = model.params
        config = model.config
        if args.k_feedback is not None:
            config = TrainConfig.from_dict({**config.to_dict(), "k_feedback": args.k_feedback})
    else:
        from .encoder import init_params

        params = init_params(config.encoder_config(graph), config.seed)
    cache = FeedbackCache(args.cache) if args.cache else FeedbackCache()
    feedback = collect_feedback_round(graph, split, params, config, spec, template, cache)
    payload = {
        "round": feedback.round_index,
        "coverage": feedback.coverage,
        "queries": {
            str(q): {"examples": list(r.example_ids), "utilities": list(r.utilities)}
            for q, r in sorted(feedback.by_query.items())
        },
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
    print(json.dumps({"queries": len(feedback.by_query), "coverage": feedback.coverage,
                      "cache_entries": len(cache)}))
    return 0


def _run_and_report(strategy: str, args: argparse.Namespace, needs_model: bool) -> int:
    cfg_file = _load_config(args.config)
    spec = _scorer_from_config(cfg_file, args)
    template = _template(cfg_file, args)
    graph = load_bundle(args.bundle)

    model = None
    if needs_model:
        if not getattr(args, "model", None):
            raise ValueError(f"strategy {strategy!r} needs --model")
        model, manifest = _load_model(args.model, graph)
        config = model.config
        # default the split to whatever the model was trained with
        cfg_file.setdefault("fraction", manifest.config.get("fraction", 0.1))
        cfg_file.setdefault("seed", config.seed)
    else:
        config = _train_config(cfg_file, args)
        manifest = _manifest(config, spec, template, args.bundle)
    split = _split_for(graph, args.bundle, cfg_file, args)
    k_icl = args.k_icl if args.k_icl is not None else config.k_icl

    manifest = RunManifest(
        config={**manifest.config, "strategy": strategy, "k_icl": k_icl,
                "purify": getattr(args, "purify", None)},
        seed=manifest.seed,
        bundle_hash=manifest.bundle_hash,
        template_hash=template.template_hash,
        scorer_id=spec.scorer_id,
    )
    rows = run_strategy(
        strategy, graph, split, spec, template, model=model, k_icl=k_icl,
        seed=config.seed, purify=getattr(args, "purify", None),
        purify_budget=getattr(args, "purify_budget", None),
        single_thread=args.single_thread,
    )
    summary = evaluate_accuracy(rows)
    summary = {
        "accuracy": summary["accuracy"],
        "n": summary["n"],
        "unparsed": summary["unparsed"],
        "manifest_hash": manifest.manifest_hash,
        "strategy": strategy,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"report-{strategy}-{manifest.manifest_hash}"
    write_report(rows, summary, out / f"{stem}.csv", out / f"{stem}.json",
                 overwrite=args.force)
    manifest.save(out / f"{stem}-manifest.json")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    return _run_and_report(args.strategy, args, needs_model=True)


def cmd_baseline(args: argparse.Namespace) -> int:
    needs_model = args.strategy in ("mv_askgnn", "npg")
    return _run_and_report(args.strategy, args, needs_model=needs_model)


def cmd_eval(args: argparse.Namespace) -> int:
    rows = read_report(args.report)
    print(json.dumps(evaluate_accuracy(rows), sort_keys=True))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg_file = _load_config(args.config)
    config = _train_config(cfg_file, args)
    spec = _scorer_from_config(cfg_file, args)
    template = _template(cfg_file, args)
    graph = load_bundle(args.bundle)
    split = _split_for(graph, args.bundle, cfg_file, args)
    cache = FeedbackCache(args.cache) if args.cache else FeedbackCache()
    values = [float(v) for v in args.values.split(",") if v != ""]
    results = sweep(args.axis, values, graph, split, spec, template, config, cache=cache)
    write_sweep_csv(results, args.out)
    print(json.dumps({"axis": args.axis, "rows": len(results), "out": str(args.out)}))
    return 0


def _add_common(p: argparse.ArgumentParser, with_model: bool = False) -> None:
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--template", default=None, help="template name or path")
    p.add_argument("--fraction", type=float, default=None, help="labeled fraction")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scorer-kind", dest="scorer_kind", choices=["http", "oracle"], default=None)
    p.add_argument("--endpoint", default=None, help="http scorer base URL")
    p.add_argument("--model-name", dest="model_name", default=None, help="scoring model name")
    p.add_argument("--single-thread", dest="single_thread", action="store_true",
                   help="force fully serial execution for byte-reproducibility")
    if with_model:
        p.add_argument("--model", required=True, help="trained model directory")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gicl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"gicl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bundle")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--pin", type=float, required=True)
    p.add_argument("--pout", type=float, required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="validate a bundle and print stats")
    p.add_argument("bundle")
    p.add_argument("--directed", action="store_true", help="do not symmetrize edges")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train the retriever")
    _add_common(p)
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--cache", default=None, help="feedback cache JSONL path")
    for name, typ in (("beta", float), ("epochs", int), ("rounds", int), ("k-feedback", int),
                      ("k-icl", int), ("lr", float), ("hidden-dim", int), ("n-layers", int),
                      ("tau", float)):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("feedback", help="run one feedback collection round")
    _add_common(p)
    p.add_argument("--model", default=None, help="trained model directory (else fresh init)")
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default=None, help="write the feedback set as JSON")
    p.add_argument("--k-feedback", dest="k_feedback", type=int, default=None)
    p.set_defaults(fn=cmd_feedback)

    p = sub.add_parser("infer", help="trained-retriever inference on the test split")
    _add_common(p, with_model=True)
    p.add_argument("--strategy", default="askgnn", choices=["askgnn"])
    p.add_argument("--k-icl", dest="k_icl", type=int, default=None)
    p.add_argument("--purify", choices=["minority", "llm_select"], default=None)
    p.add_argument("--purify-budget", dest="purify_budget", type=int, default=None)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--force", action="store_true", help="allow overwriting a report")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("baseline", help="run a non-learned strategy")
    _add_common(p)
    p.add_argument("--strategy", required=True,
                   choices=["zero_shot", "few_rand", "few_knn", "mv_knn", "mv_askgnn", "npg", "npl"])
    p.add_argument("--model", default=None, help="trained model directory (mv_askgnn, npg)")
    p.add_argument("--k-icl", dest="k_icl", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("eval", help="recompute a summary from a report CSV")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="sweep beta or k_icl")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=["beta", "k_icl"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--cache", default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    for name, typ in (("epochs", int), ("rounds", int), ("k-feedback", int),
                      ("lr", float), ("hidden-dim", int), ("n-layers", int), ("tau", float)):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ, default=None)
    p.set_defaults(fn=cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"gicl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
