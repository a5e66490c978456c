"""Closed-loop training and evaluation over a knowledge graph."""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from kgfeedback import backprop
from kgfeedback.embedding import HashEmbedder, RelevanceScorer, RemoteEmbedder
from kgfeedback.evolution import EvolutionConfig, FallbackLabeler, LLMLabeler, evolve
from kgfeedback.feedback import (
    DEFAULT_CONFLICT_MAX,
    DEFAULT_FIDELITY_MIN,
    JudgeUnavailable,
    LLMJudge,
    ReplayJudge,
    ScriptedJudge,
    flip_feedback,
    gate_utility,
    oracle_feedback,
)
from kgfeedback.graph import KnowledgeGraph
from kgfeedback.llm import DEFAULT_MODEL, ChatClient, LLMError, generate_response, template_hashes
from kgfeedback.metrics import EvalResult, accuracy_contains
from kgfeedback.retrieval import Query, RankedPath, Retriever, format_context, retrieved_triplets

logger = logging.getLogger(__name__)

UNKNOWN_ANSWER = "unknown"


class IngestError(ValueError):
    pass


@dataclass
class RunConfig:
    n_entities: int = 10
    m_paths: int = 10
    k_hop: int = 2
    max_fusion_hop: int = 3
    alpha_init: float = 0.5
    lr: float = backprop.DEFAULT_LR
    iterations: int = 10
    batch_size: int = 20
    noise_rate: float = 0.0
    seed: int = 0
    judge: str = "scripted"
    labeler: str = "fallback"
    embedding: str = "local"
    generator: str = "synthetic"
    model: str = DEFAULT_MODEL
    fixture_dir: str | None = None
    grad_mode: str = backprop.EXACT
    fidelity_min: float = DEFAULT_FIDELITY_MIN
    conflict_max: float = DEFAULT_CONFLICT_MAX
    suppression_window: int = 3
    hard_archive: bool = False
    token_budget: int = 2048

    def __post_init__(self) -> None:
        counts = (self.n_entities, self.m_paths, self.k_hop, self.batch_size)
        if min(counts) < 1 or self.iterations < 0:
            raise ValueError("N, M, k and batch size must be >= 1; iterations >= 0")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise ValueError("alpha_init must be in [0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.grad_mode not in backprop.MODES:
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")

    def evolution(self) -> EvolutionConfig:
        return EvolutionConfig(self.max_fusion_hop, self.suppression_window, self.hard_archive)


@dataclass
class IterationReport:
    iteration: int
    mean_loss: float
    mean_expected_utility: float
    alpha: float
    train_accuracy: float
    problematic_ratio: float | None
    n_queries: int
    n_skipped: int
    n_triplets: int
    evolution: dict
    templates: dict
    forward_seconds: float = 0.0
    backward_seconds: float = 0.0

    def record(self) -> dict:
        """Deterministic part of the report (wall-clock fields excluded)."""
        d = asdict(self)
        d.pop("forward_seconds")
        d.pop("backward_seconds")
        return d

    def timing(self) -> dict:
        total = self.forward_seconds + self.backward_seconds
        return {
            "iteration": self.iteration,
            "forward_seconds": self.forward_seconds,
            "backward_seconds": self.backward_seconds,
            "backward_share": self.backward_seconds / total if total > 0 else 0.0,
        }


@dataclass
class Annotations:
    targets: dict[str, list[tuple[str, str, str]]] = field(default_factory=dict)
    problematic: set[tuple[str, str, str]] = field(default_factory=set)
    chains: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> Annotations:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            targets={qid: [tuple(k) for k in chain] for qid, chain in data.get("targets", {}).items()},
            problematic={tuple(p["triplet"]) for p in data.get("problematic", [])},
            chains=data.get("chains", []),
        )


# -- file formats -------------------------------------------------------------

def read_triplet_file(path: str | Path) -> tuple[list[tuple[str, str, str]], int]:
    """Parse a JSONL triplet file; returns (unique records, duplicate count)."""
    records: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    dupes = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise IngestError(f"{path}:{lineno}: expected an object")
            for fld in ("head", "relation", "tail"):
                val = rec.get(fld)
                if not isinstance(val, str) or not val.strip():
                    raise IngestError(f"{path}:{lineno}: missing or empty field {fld!r}")
            key = (rec["head"], rec["relation"], rec["tail"])
            if key in seen:
                dupes += 1
                continue
            seen.add(key)
            records.append(key)
    return records, dupes


def ingest(path: str | Path, alpha_init: float = 0.5) -> tuple[KnowledgeGraph, dict]:
    records, dupes = read_triplet_file(path)
    kg = KnowledgeGraph(alpha=alpha_init)
    for h, r, t in records:
        kg.add_triplet(h, r, t)
    summary = {"triplets": len(kg), "entities": len(kg.entities), "duplicates": dupes}
    return kg, summary


def load_queries(path: str | Path) -> list[Query]:
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                queries.append(
                    Query(
                        id=str(rec["id"]),
                        text=rec["question"],
                        answers=tuple(rec.get("answers") or ()),
                        feedback=rec.get("feedback"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: bad query record ({exc})") from None
    return queries


# -- providers ----------------------------------------------------------------

class SyntheticGenerator:
    """Offline stand-in for the LLM: answers with the top path's final entity."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg

    def respond(self, query: Query, paths: Sequence[RankedPath]) -> str:
        if not paths:
            return UNKNOWN_ANSWER
        return self.kg.entities[paths[0].path.end].name


class LLMGenerator:
    def __init__(self, kg: KnowledgeGraph, client: ChatClient, token_budget: int = 2048):
        self.kg = kg
        self.client = client
        self.token_budget = token_budget

    def respond(self, query: Query, paths: Sequence[RankedPath]) -> str:
        context = format_context(paths, self.kg)
        return generate_response(self.client, query.text, context, token_budget=self.token_budget)


def make_client(config: RunConfig) -> ChatClient:
    if config.fixture_dir:
        return ChatClient(model=config.model, mode="replay", fixture_dir=config.fixture_dir)
    return ChatClient(model=config.model)


def build_providers(kg: KnowledgeGraph, config: RunConfig, annotations: Annotations | None = None) -> dict:
    """Judge, generator, labeler and relevance scorer selected by ``config``."""
    client = None

    def llm() -> ChatClient:
        nonlocal client
        if client is None:
            client = make_client(config)
        return client

    if config.embedding == "local":
        embedder = HashEmbedder()
    elif config.embedding == "remote":
        fixture = Path(config.fixture_dir, "embeddings.json") if config.fixture_dir else None
        embedder = RemoteEmbedder(mode="replay" if fixture else "live", fixture_path=fixture)
    else:
        raise ValueError(f"unknown embedding provider {config.embedding!r}")

    if config.judge == "scripted":
        if annotations is None:
            raise ValueError("the scripted judge needs an annotation file")
        judge = ScriptedJudge(kg, annotations.targets, annotations.problematic)
    elif config.judge == "llm":
        judge = LLMJudge(kg, llm())
    elif config.judge == "replay":
        if not config.fixture_dir:
            raise ValueError("the replay judge needs --fixture-dir")
        judge = ReplayJudge(kg, Path(config.fixture_dir, "judgments.json"))
    else:
        raise ValueError(f"unknown judge {config.judge!r}")

    if config.generator == "synthetic":
        generator = SyntheticGenerator(kg)
    elif config.generator == "llm":
        generator = LLMGenerator(kg, llm(), config.token_budget)
    else:
        raise ValueError(f"unknown generator {config.generator!r}")

    if config.labeler == "fallback":
        labeler = FallbackLabeler(kg)
    elif config.labeler == "llm":
        labeler = LLMLabeler(kg, llm())
    else:
        raise ValueError(f"unknown labeler {config.labeler!r}")

    return {
        "judge": judge,
        "generator": generator,
        "labeler": labeler,
        "scorer": RelevanceScorer(kg, embedder),
    }


def problematic_ratio(retrievals: Sequence[Sequence[RankedPath]], problematic_tids: set[str]) -> float:
    """Mean over queries of the share of retrieved triplets that are problematic."""
    ratios = []
    for paths in retrievals:
        tids = retrieved_triplets(paths)
        ratios.append(len(tids & problematic_tids) / len(tids) if tids else 0.0)
    return sum(ratios) / len(ratios) if ratios else 0.0


# -- the loop -----------------------------------------------------------------

@dataclass
class QueryOutcome:
    query: Query
    paths: list[RankedPath]
    response: str
    feedback: int | None = None
    record: backprop.QueryRecord | None = None
    skipped: str | None = None


class Engine:
    def __init__(self, kg: KnowledgeGraph, config: RunConfig, *, judge, generator, labeler=None,
                 scorer: RelevanceScorer | None = None, annotations: Annotations | None = None):
        self.kg = kg
        self.config = config
        self.judge = judge
        self.generator = generator
        self.labeler = labeler or FallbackLabeler(kg)
        self.scorer = scorer or RelevanceScorer(kg)
        self.annotations = annotations
        self.retriever = Retriever(
            kg, self.scorer, n_entities=config.n_entities, m_paths=config.m_paths, k_hop=config.k_hop
        )
        self.shuffle_rng = random.Random(config.seed)
        self.noise_rng = random.Random(config.seed + 7919)

    @classmethod
    def from_config(cls, kg: KnowledgeGraph, config: RunConfig, annotations: Annotations | None = None) -> Engine:
        return cls(kg, config, annotations=annotations, **build_providers(kg, config, annotations))

    def problematic_tids(self) -> set[str]:
        if self.annotations is None:
            return set()
        return {t.tid for t in self.kg.triplets.values() if t.key in self.annotations.problematic}

    def answer(self, query: Query) -> QueryOutcome:
        paths = self.retriever.retrieve(query)
        try:
            response = self.generator.respond(query, paths)
        except LLMError as exc:
            return QueryOutcome(query, paths, "", skipped=f"generation failed: {exc}")
        return QueryOutcome(query, paths, response)

    def feedback_for(self, out: QueryOutcome) -> int | None:
        if out.query.feedback is not None:
            fs = int(out.query.feedback)
        elif out.query.answers:
            fs = oracle_feedback(out.response, out.query.answers)
        else:
            return None
        if self.config.noise_rate > 0:
            fs = flip_feedback(fs, self.config.noise_rate, self.noise_rng)
        return fs

    def process(self, query: Query) -> QueryOutcome:
        out = self.answer(query)
        if out.skipped:
            return out
        if not out.paths:
            out.skipped = "no paths retrieved"
            return out
        fs = self.feedback_for(out)
        if fs is None:
            out.skipped = "no feedback available"
            return out
        out.feedback = fs
        try:
            judgments = self.judge.judge(query, out.paths, out.response, fs)
        except JudgeUnavailable as exc:
            out.skipped = f"unjudged: {exc}"
            return out
        utilities = [gate_utility(j, self.config.fidelity_min, self.config.conflict_max) for j in judgments]
        out.record = backprop.QueryRecord(query.id, out.paths, utilities, self.kg.alpha)
        return out

    def run_iteration(self, queries: Sequence[Query]) -> IterationReport:
        order = list(queries)
        self.shuffle_rng.shuffle(order)
        fwd = bwd = 0.0
        losses, utils, correct, retrievals = [], [], [], []
        skipped = 0
        for start in range(0, len(order), self.config.batch_size):
            batch = sorted(order[start: start + self.config.batch_size], key=lambda q: q.id)
            t0 = time.perf_counter()
            outcomes = [self.process(q) for q in batch]
            t1 = time.perf_counter()
            records = [o.record for o in outcomes if o.record is not None]
            if records:
                report = backprop.compute_gradients(records, self.config.grad_mode)
                backprop.apply_updates(self.kg, report, self.config.lr)
                losses.extend(backprop.loss(r) for r in records)
                utils.extend(backprop.expected_utility(r) for r in records)
            t2 = time.perf_counter()
            fwd += t1 - t0
            bwd += t2 - t1
            for o in outcomes:
                if o.skipped:
                    skipped += 1
                    logger.info("query %s skipped: %s", o.query.id, o.skipped)
                if o.query.answers:
                    correct.append(accuracy_contains(o.response, o.query.answers))
                retrievals.append(o.paths)
        bad = self.problematic_tids()
        ratio = problematic_ratio(retrievals, bad) if self.annotations is not None else None
        evo = evolve(self.kg, self.config.evolution(), self.labeler, self.scorer)
        evo_summary = {
            "tau_low": evo.tau_low,
            "tau_high": evo.tau_high,
            "proposals": evo.n_proposals,
            "inserted": len(evo.inserted),
            "shortcuts": [[s["head"], s["relation"], s["tail"], s["score"]] for s in evo.inserted],
            "flagged": len(evo.flagged),
        }
        n = len(losses)
        return IterationReport(
            iteration=self.kg.iteration,
            mean_loss=sum(losses) / n if n else 0.0,
            mean_expected_utility=sum(utils) / n if n else 0.0,
            alpha=self.kg.alpha,
            train_accuracy=sum(correct) / len(correct) if correct else 0.0,
            problematic_ratio=ratio,
            n_queries=len(order),
            n_skipped=skipped,
            n_triplets=len(self.kg),
            evolution=evo_summary,
            templates=template_hashes(),
            forward_seconds=fwd,
            backward_seconds=bwd,
        )

    def train(self, queries: Sequence[Query], iterations: int | None = None) -> list[IterationReport]:
        n = self.config.iterations if iterations is None else iterations
        return [self.run_iteration(queries) for _ in range(n)]

    def evaluate(self, queries: Sequence[Query]) -> EvalResult:
        """Answer each query with learning disabled."""
        if not queries:
            raise ValueError("empty test set")
        items = []
        for q in queries:
            out = self.answer(q)
            items.append((q.id, out.response, q.answers))
        return EvalResult.from_responses(items)


def write_reports(reports: Sequence[IterationReport], report_dir: str | Path) -> None:
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "reports.jsonl").open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")
    with (out / "timing.jsonl").open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.timing(), sort_keys=True) + "\n")
