"""Forward pass: seed recognition, subgraph extraction and hybrid path ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from kgfeedback.embedding import RelevanceScorer
from kgfeedback.graph import KnowledgeGraph, Triplet

DEFAULT_N = 10
DEFAULT_M = 10
DEFAULT_K = 2


@dataclass
class Query:
    id: str
    text: str
    answers: tuple[str, ...] = ()
    # pre-scored feedback (e.g. human ratings), used instead of oracle feedback
    feedback: int | None = None

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError(f"query {self.id!r} has empty text")
        self.answers = tuple(self.answers)


@dataclass(frozen=True)
class ReasoningPath:
    start: str
    triplets: tuple[str, ...]
    entities: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.triplets)

    @property
    def end(self) -> str:
        return self.entities[-1]


@dataclass
class RankedPath:
    path: ReasoningPath
    triplet_probs: tuple[float, ...]
    relevances: tuple[float, ...]
    contributions: tuple[float, ...]
    log_avg: float
    priority: float = 0.0

    @property
    def tids(self) -> tuple[str, ...]:
        return self.path.triplets


class SubgraphView:
    """Read-only view over a subset of a graph's triplets.

    Scores are read through to the parent graph.
    """

    def __init__(self, kg: KnowledgeGraph, tids: Iterable[str]):
        self.kg = kg
        self.tids = frozenset(tids)
        self._out: dict[str, list[Triplet]] = {}

    def __contains__(self, tid: str) -> bool:
        return tid in self.tids

    def __len__(self) -> int:
        return len(self.tids)

    def outgoing(self, entity_id: str) -> list[Triplet]:
        out = self._out.get(entity_id)
        if out is None:
            out = [t for t in self.kg.outgoing(entity_id) if t.tid in self.tids]
            self._out[entity_id] = out
        return out

    def entities(self) -> set[str]:
        ents = set()
        for tid in self.tids:
            t = self.kg.triplets[tid]
            ents.add(t.head)
            ents.add(t.tail)
        return ents


def triplet_probability(relevance: float, contribution: float, alpha: float) -> float:
    """Selection probability mixing semantic relevance and learned contribution."""
    return (1.0 - alpha) * relevance + alpha * contribution


def log_average(probs: Sequence[float]) -> float:
    return math.fsum(math.log(p) for p in probs) / len(probs)


def softmax(scores: Sequence[float]) -> np.ndarray:
    arr = np.asarray(scores, dtype=float)
    if arr.size == 0:
        raise ValueError("softmax of an empty sequence")
    ex = np.exp(arr - arr.max())
    return ex / ex.sum()


def path_priorities(prob_lists: Sequence[Sequence[float]]) -> list[float]:
    """Softmax over paths of the log-average of their triplet probabilities."""
    if not prob_lists:
        raise ValueError("cannot rank an empty path list")
    return softmax([log_average(p) for p in prob_lists]).tolist()


def extract_subgraph(kg: KnowledgeGraph, seeds: Iterable[str], k: int = DEFAULT_K) -> SubgraphView:
    """All triplets whose head lies within k-1 directed hops of a seed."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seen = set(seeds)
    frontier = [e for e in seen if e in kg.entities]
    tids: set[str] = set()
    for _ in range(k):
        nxt = []
        for ent in frontier:
            for tid in kg.out_index.get(ent, ()):
                if not kg.is_retrievable(tid):
                    continue
                tids.add(tid)
                tail = kg.triplets[tid].tail
                if tail not in seen:
                    seen.add(tail)
                    nxt.append(tail)
        frontier = nxt
    return SubgraphView(kg, tids)


def enumerate_paths(sub: SubgraphView, start: str, max_hop: int = DEFAULT_K) -> list[ReasoningPath]:
    """Simple directed paths of 1..max_hop triplets from ``start``, depth first."""
    paths: list[ReasoningPath] = []

    def walk(entity: str, tids: list[str], ents: list[str]) -> None:
        if len(tids) == max_hop:
            return
        for t in sub.outgoing(entity):
            if t.tail in ents:
                continue
            tids.append(t.tid)
            ents.append(t.tail)
            paths.append(ReasoningPath(start, tuple(tids), tuple(ents)))
            walk(t.tail, tids, ents)
            tids.pop()
            ents.pop()

    walk(start, [], [start])
    return paths


def rank_key(rp: RankedPath) -> tuple:
    return (-rp.priority, len(rp.path), rp.path.triplets)


class Retriever:
    def __init__(
        self,
        kg: KnowledgeGraph,
        scorer: RelevanceScorer | None = None,
        *,
        n_entities: int = DEFAULT_N,
        m_paths: int = DEFAULT_M,
        k_hop: int = DEFAULT_K,
        max_hop: int | None = None,
    ):
        if min(n_entities, m_paths, k_hop) < 1:
            raise ValueError("N, M and k must be >= 1")
        self.kg = kg
        self.scorer = scorer or RelevanceScorer(kg)
        self.n_entities = n_entities
        self.m_paths = m_paths
        self.k_hop = k_hop
        self.max_hop = max_hop or k_hop

    def recognize_entities(self, query: Query | np.ndarray, n: int | None = None) -> list[str]:
        """Top-n entities by name relevance to the query (ties by entity id)."""
        n = self.n_entities if n is None else n
        if n < 1:
            raise ValueError("n must be >= 1")
        qvec = self._qvec(query)
        ids, rel = self.scorer.entity_relevances(qvec)
        # ids are sorted, so a stable sort breaks ties lexicographically
        order = np.argsort(-rel, kind="stable")[:n]
        return [ids[i] for i in order]

    def _qvec(self, query: Query | np.ndarray) -> np.ndarray:
        return self.scorer.embed_query(query.text) if isinstance(query, Query) else query

    def rank(
        self, paths: Sequence[ReasoningPath], query: Query | np.ndarray, alpha: float | None = None
    ) -> list[RankedPath]:
        """Score paths against the query; priorities form one softmax over ``paths``."""
        if not paths:
            raise ValueError("cannot rank an empty path list")
        alpha = self.kg.alpha if alpha is None else alpha
        qvec = self._qvec(query)
        tids = {tid for p in paths for tid in p.triplets}
        rel = self.scorer.relevances(qvec, sorted(tids))
        prob = {tid: triplet_probability(rel[tid], self.kg.score(tid), alpha) for tid in tids}
        ranked = []
        for p in paths:
            probs = tuple(prob[tid] for tid in p.triplets)
            ranked.append(
                RankedPath(
                    path=p,
                    triplet_probs=probs,
                    relevances=tuple(rel[tid] for tid in p.triplets),
                    contributions=tuple(self.kg.score(tid) for tid in p.triplets),
                    log_avg=log_average(probs),
                )
            )
        _assign_priorities(ranked)
        return ranked

    def retrieve(
        self,
        query: Query,
        *,
        n_entities: int | None = None,
        m_paths: int | None = None,
        k_hop: int | None = None,
        alpha: float | None = None,
    ) -> list[RankedPath]:
        """Top-M paths per recognized entity, best first.

        Candidates from all start entities are ranked together; the returned
        paths carry priorities renormalized over the retained set, so they
        describe exactly the distribution the generator saw.
        """
        n = n_entities or self.n_entities
        m = m_paths or self.m_paths
        k = k_hop or self.k_hop
        max_hop = self.max_hop if k_hop is None else k_hop
        qvec = self._qvec(query)
        seeds = self.recognize_entities(qvec, n)
        if not seeds:
            return []
        sub = extract_subgraph(self.kg, seeds, k)
        if not sub.tids:
            return []
        alpha = self.kg.alpha if alpha is None else alpha
        rel = self.scorer.relevances(qvec, sorted(sub.tids))
        contrib = {tid: self.kg.score(tid) for tid in rel}
        prob = {tid: triplet_probability(rel[tid], contrib[tid], alpha) for tid in rel}
        logp = {tid: math.log(p) for tid, p in prob.items()}
        # ranking on the log-average equals ranking on the shared softmax
        kept: list[ReasoningPath] = []
        for s in seeds:
            cands = enumerate_paths(sub, s, max_hop)
            cands.sort(key=lambda p: (-math.fsum(logp[t] for t in p.triplets) / len(p), len(p), p.triplets))
            kept.extend(cands[:m])
        if not kept:
            return []
        ranked = []
        for p in kept:
            probs = tuple(prob[tid] for tid in p.triplets)
            ranked.append(
                RankedPath(
                    path=p,
                    triplet_probs=probs,
                    relevances=tuple(rel[tid] for tid in p.triplets),
                    contributions=tuple(contrib[tid] for tid in p.triplets),
                    log_avg=log_average(probs),
                )
            )
        _assign_priorities(ranked)
        ranked.sort(key=rank_key)
        return ranked


def _assign_priorities(ranked: list[RankedPath]) -> None:
    pri = softmax([rp.log_avg for rp in ranked])
    for rp, p in zip(ranked, pri.tolist()):
        rp.priority = p


def format_context(paths: Sequence[RankedPath], kg: KnowledgeGraph) -> str:
    """One line per path, ``e0 -[r1]-> e1 -[r2]-> e2``, highest priority first."""
    lines = []
    for rp in sorted(paths, key=rank_key):
        parts = [kg.entities[rp.path.start].name]
        for tid in rp.path.triplets:
            t = kg.triplets[tid]
            parts.append(f"-[{t.relation}]-> {kg.entities[t.tail].name}")
        lines.append(" ".join(parts))
    return "\n".join(lines)


def retrieved_triplets(paths: Iterable[RankedPath]) -> set[str]:
    return {tid for rp in paths for tid in rp.path.triplets}
