"""Command line entry point: ``kgfeedback {ingest,run,eval,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from kgfeedback.graph import GraphError, KnowledgeGraph
from kgfeedback.harness import (
    Annotations,
    Engine,
    IngestError,
    RunConfig,
    ingest,
    load_queries,
    write_reports,
)
from kgfeedback.llm import LLMError
from kgfeedback.synth import SynthParams, generate

logger = logging.getLogger("kgfeedback")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    p.add_argument("--snapshot", required=True, help="graph snapshot to load")
    p.add_argument("--annotations", help="planted-truth annotations (scripted judge, problematic ratio)")
    p.add_argument("--fixture-dir", help="recorded LLM/judge/embedding fixtures for offline replay")
    p.add_argument("--n-entities", type=int, default=d.n_entities)
    p.add_argument("--m-paths", type=int, default=d.m_paths)
    p.add_argument("--k-hop", type=int, default=d.k_hop)
    p.add_argument("--max-fusion-hop", type=int, default=d.max_fusion_hop)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--noise-rate", type=float, default=d.noise_rate)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--judge", choices=("llm", "scripted", "replay"), default=d.judge)
    p.add_argument("--labeler", choices=("llm", "fallback"), default=d.labeler)
    p.add_argument("--embedding", choices=("local", "remote"), default=d.embedding)
    p.add_argument("--generator", choices=("synthetic", "llm"), default=d.generator)
    p.add_argument("--model", default=d.model)
    p.add_argument("--hard-archive", action="store_true", help="exclude persistently low triplets from retrieval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgfeedback", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a graph snapshot from a JSONL triplet file")
    p.add_argument("triplets")
    p.add_argument("--snapshot", required=True, help="output snapshot path")
    p.add_argument("--alpha-init", type=float, default=RunConfig.alpha_init)

    p = sub.add_parser("run", help="train on queries and write reports plus the updated snapshot")
    p.add_argument("queries")
    _add_run_flags(p)
    p.add_argument("--report-dir", required=True)
    p.add_argument("--output", help="where to save the trained snapshot (default: <report-dir>/snapshot.json)")

    p = sub.add_parser("eval", help="answer test queries with learning disabled")
    p.add_argument("queries")
    _add_run_flags(p)
    p.add_argument("--report-dir", help="also write eval.json here")

    p = sub.add_parser("synth", help="generate a synthetic graph with planted chains and bad facts")
    p.add_argument("out_dir")
    for f in fields(SynthParams):
        p.add_argument("--" + f.name.replace("_", "-"), type=int, default=f.default)
    return parser


def _config(args: argparse.Namespace, kg: KnowledgeGraph) -> RunConfig:
    return RunConfig(
        n_entities=args.n_entities,
        m_paths=args.m_paths,
        k_hop=args.k_hop,
        max_fusion_hop=args.max_fusion_hop,
        alpha_init=kg.alpha,
        lr=args.lr,
        iterations=args.iterations,
        batch_size=args.batch_size,
        noise_rate=args.noise_rate,
        seed=args.seed,
        judge=args.judge,
        labeler=args.labeler,
        embedding=args.embedding,
        generator=args.generator,
        model=args.model,
        fixture_dir=args.fixture_dir,
        hard_archive=args.hard_archive,
    )


def _engine(args: argparse.Namespace) -> tuple[KnowledgeGraph, Engine]:
    kg = KnowledgeGraph.load(args.snapshot)
    ann = Annotations.load(args.annotations) if args.annotations else None
    return kg, Engine.from_config(kg, _config(args, kg), ann)


def cmd_ingest(args: argparse.Namespace) -> int:
    kg, summary = ingest(args.triplets, args.alpha_init)
    kg.save(args.snapshot)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    kg, engine = _engine(args)
    queries = load_queries(args.queries)
    reports = []
    for _ in range(engine.config.iterations):
        rep = engine.run_iteration(queries)
        reports.append(rep)
        ratio = "" if rep.problematic_ratio is None else f" problematic={rep.problematic_ratio:.4f}"
        logger.info("iteration %d loss=%.4f alpha=%.3f acc=%.3f%s",
                    rep.iteration, rep.mean_loss, rep.alpha, rep.train_accuracy, ratio)
    write_reports(reports, args.report_dir)
    out = Path(args.output) if args.output else Path(args.report_dir, "snapshot.json")
    kg.save(out)
    print(f"{len(reports)} iteration(s); snapshot written to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _, engine = _engine(args)
    result = engine.evaluate(load_queries(args.queries))
    summary = {"acc": result.acc, "em": result.em, "f1": result.f1, "alpha": engine.kg.alpha}
    print(json.dumps(summary, sort_keys=True))
    if args.report_dir:
        Path(args.report_dir).mkdir(parents=True, exist_ok=True)
        Path(args.report_dir, "eval.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    params = SynthParams(**{f.name: getattr(args, f.name) for f in fields(SynthParams)})
    written = generate(params).write(args.out_dir)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


COMMANDS = {"ingest": cmd_ingest, "run": cmd_run, "eval": cmd_eval, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (IngestError, GraphError, LLMError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
