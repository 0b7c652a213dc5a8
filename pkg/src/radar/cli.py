"""Command-line entry point for the full tagging pipeline.

Subcommands: synth, build-ontology, build-graph, train, eval, infer.
Logs go to stderr; machine-readable outputs go to files only. Exit
codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from radar import ValidationError, __version__

log = logging.getLogger("radar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="radar", description=__doc__)
    parser.add_argument("--version", action="version", version=f"radar {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="JSON file mirroring the synth config fields")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-ontology", help="induce the tag ontology")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--labels", required=True, help="labeled subtopic pairs (jsonl)")
    p.add_argument("--precision", type=float, default=0.9, help="precision target for the keep threshold")
    p.add_argument("--recall", type=float, default=0.9, help="recall target for the relaxation floor")
    p.add_argument("--out", required=True, help="output ontology jsonl path")
    p.add_argument("--seed", type=int, default=0, help="classifier seed")
    p.set_defaults(func=cmd_build_ontology)

    p = sub.add_parser("build-graph", help="assemble the video-tag network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--out", required=True, help="output graph directory")
    p.add_argument("--r3-cap", type=int, default=64, help="max influence edges per destination video")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train the tagging model")
    p.add_argument("--graph", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True, help="JSON file mirroring the train config fields")
    p.add_argument("--out", required=True, help="output directory (model, caches, metrics, figures)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a split")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--graph", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "validate", "test"))
    p.add_argument("--report", required=True, help="output report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="rank tags for one new video record")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--graph", required=True)
    p.add_argument("--video", required=True, help="JSON file with one video record")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_infer)
    return parser


def cmd_synth(args):
    from radar.synthgen import SynthConfig, gen_synth

    config = SynthConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    result = gen_synth(config, args.out)
    log.info(
        "wrote %d videos, %d follows, %d tags, %d labeled pairs to %s",
        len(result.corpus.videos),
        len(result.corpus.follows),
        len(result.corpus.vocab),
        len(result.labels),
        args.out,
    )


def cmd_build_ontology(args):
    from radar.corpus import load_corpus
    from radar.ontology import (
        all_entropies,
        build_dag,
        compute_cooc_stats,
        load_labels,
        pair_features,
        save_ontology,
        score_pairs,
        select_thresholds,
        train_subtopic_classifier,
        verify_dag,
    )

    corpus = load_corpus(args.corpus)
    stats = compute_cooc_stats(corpus)
    entropies = all_entropies(stats)
    labeled = load_labels(args.labels)
    if not labeled:
        raise ValidationError(f"no labeled pairs in {args.labels}")
    feats = []
    labels = []
    for u, v, label in labeled:
        if stats.cooc_count(u, v) == 0:
            raise ValidationError(f"labeled pair ({u!r}, {v!r}) never co-occurs")
        feats.append(pair_features(stats, u, v, entropies))
        labels.append(label)
    classifier = train_subtopic_classifier(np.stack(feats), labels, seed=args.seed)
    scored = score_pairs(classifier, stats, entropies)
    labeled_scores = [(scored[(u, v)], label) for (u, v, label) in labeled]
    thresholds = select_thresholds(labeled_scores, args.precision, args.recall)
    log.info("thresholds: keep >= %.4f, relax floor %.4f", thresholds.delta_r, thresholds.epsilon_r)
    dag = build_dag(scored, entropies, thresholds)
    if not verify_dag(dag):
        raise RuntimeError("constructed ontology is not acyclic")
    save_ontology(dag, args.out)
    log.info("wrote %d relations over %d tags to %s", len(dag.edges), len(dag.nodes), args.out)


def cmd_build_graph(args):
    from radar.corpus import load_corpus
    from radar.hetgraph import build_graph, save_graph
    from radar.ontology import load_ontology

    corpus = load_corpus(args.corpus)
    ontology = load_ontology(args.ontology, tags=[e.tag for e in corpus.vocab])
    graph = build_graph(corpus, ontology, r3_cap=args.r3_cap)
    save_graph(graph, args.out)
    log.info(
        "graph: %d videos, %d tags, edges r1=%d r2=%d r3=%d -> %s",
        graph.n_videos,
        graph.n_tags,
        graph.num_edges("r1"),
        graph.num_edges("r2"),
        graph.num_edges("r3"),
        args.out,
    )


def cmd_train(args):
    from radar.corpus import load_corpus
    from radar.hetgraph import load_graph
    from radar.model import save_caches, save_model
    from radar.report import plot_training_curves, write_metrics_log
    from radar.trainer import TrainConfig, train_and_cache

    corpus = load_corpus(args.corpus)
    graph = load_graph(args.graph)
    config = TrainConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    model, rows, caches = train_and_cache(
        config,
        corpus,
        graph,
        checkpoint_dir=os.path.join(args.out, "checkpoint"),
        resume_from=args.resume,
    )
    save_model(model, os.path.join(args.out, "model"))
    save_caches(caches, os.path.join(args.out, "caches"))
    with open(os.path.join(args.out, "train_config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.__dict__, fh, indent=1, sort_keys=True)
    write_metrics_log(rows, os.path.join(args.out, "metrics.jsonl"))
    if rows:
        plot_training_curves(rows, os.path.join(args.out, "training_curves.png"))
    log.info("training done: %d epochs logged -> %s", len(rows), args.out)


def _load_run(model_dir):
    """Model + train config from a training output directory."""
    from radar.model import load_model
    from radar.trainer import TrainConfig

    inner = os.path.join(model_dir, "model")
    model = load_model(inner if os.path.exists(os.path.join(inner, "manifest.json")) else model_dir)
    config = None
    cfg_path = os.path.join(model_dir, "train_config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path, encoding="utf-8") as fh:
            config = TrainConfig(**json.load(fh))
    return model, config


def cmd_eval(args):
    from radar.corpus import load_corpus
    from radar.evaluation import evaluate
    from radar.hetgraph import load_graph
    from radar.report import write_eval_report
    from radar.trainer import apply_variant

    corpus = load_corpus(args.corpus)
    graph = load_graph(args.graph)
    model, config = _load_run(args.model)
    if config is not None:
        graph = apply_variant(config, graph)
    report = evaluate(model, graph, corpus, split=args.split)
    write_eval_report(report, args.report)
    log.info("split %s: %s -> %s", args.split, report.to_dict(), args.report)


def cmd_infer(args):
    from radar.corpus import VideoRecord
    from radar.evaluation import rank_tags
    from radar.hetgraph import load_graph
    from radar.model import inductive_infer, load_caches
    from radar.trainer import apply_variant

    graph = load_graph(args.graph)
    model, config = _load_run(args.model)
    if config is not None:
        graph = apply_variant(config, graph)
    caches = load_caches(os.path.join(args.model, "caches"))
    with open(args.video, encoding="utf-8") as fh:
        obj = json.load(fh)
    for field in ("id", "user_id", "timestamp"):
        if field not in obj:
            raise ValidationError(f"video record missing {field!r}")
    if "frames" in obj:
        frames = np.asarray(obj["frames"], dtype=np.float32)
    elif "feature" in obj:
        frames = np.asarray(obj["feature"], dtype=np.float32).reshape(1, -1)
    else:
        raise ValidationError("video record needs 'frames' or 'feature'")
    record = VideoRecord(
        id=str(obj["id"]),
        user_id=str(obj["user_id"]),
        timestamp=int(obj["timestamp"]),
        tags=frozenset(obj.get("tags", [])),
        frame_features=frames,
    )
    scores = inductive_infer(model, graph, record, caches)
    ranked = rank_tags(graph.tag_ids, scores)
    by_tag = dict(zip(graph.tag_ids, scores))
    out = {
        "video_id": record.id,
        "tags": [{"tag": t, "score": float(np.float32(by_tag[t]))} for t in ranked[: args.top_k]],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
    log.info("top-%d tags for %s -> %s", args.top_k, record.id, args.out)


def main(argv=None):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        args.func(args)
        return 0
    except (ValidationError, UsageError) as exc:
        log.error("%s", exc)
        return 1
    except Exception:
        log.exception("command failed")
        return 2


if __name__ == "__main__":
    sys.exit(main())
