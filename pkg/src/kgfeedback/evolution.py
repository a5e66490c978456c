"""Relation-centric graph evolution: shortcut fusion and suppression tracking."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from kgfeedback.graph import EPS_SCORE, SHORTCUT, KnowledgeGraph
from kgfeedback.llm import ChatClient, CompletionRequest, LLMError, load_template

logger = logging.getLogger(__name__)

CHAIN_SEP = "→"


@dataclass(frozen=True)
class EvolutionConfig:
    max_hop: int = 3
    suppression_window: int = 3
    hard_archive: bool = False

    def __post_init__(self) -> None:
        if self.max_hop < 2:
            raise ValueError("max fusion hop must be >= 2")
        if self.suppression_window < 1:
            raise ValueError("suppression window must be >= 1")


@dataclass
class ShortcutProposal:
    head: str
    tail: str
    score: float
    source_path: tuple[str, ...]
    label: str = ""


@dataclass
class EvolutionReport:
    iteration: int
    tau_low: float
    tau_high: float
    n_proposals: int
    inserted: list[dict] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "tau_low": self.tau_low,
            "tau_high": self.tau_high,
            "n_proposals": self.n_proposals,
            "inserted": self.inserted,
            "flagged": self.flagged,
        }


def compute_thresholds(kg: KnowledgeGraph) -> tuple[float, float]:
    """(tau_low, tau_high) = (mu - sigma, mu + sigma); tau_low floored at EPS_SCORE."""
    mu, sigma = kg.contribution_stats()
    return max(EPS_SCORE, mu - sigma), mu + sigma


def _seed_shortcuts(kg: KnowledgeGraph, seed_tid: str, tau_high: float, max_hop: int) -> list[ShortcutProposal]:
    """Layered chain-BFS from one seed triplet.

    Frontier entries carry their full path and running score sum. Each
    node's neighbours are visited best-first and the loop stops at the
    first neighbour whose extended path fails a condition.
    """
    seed = kg.triplets[seed_tid]
    out: list[ShortcutProposal] = []
    frontier = [((seed_tid,), kg.score(seed_tid), (seed.head, seed.tail))]
    for _ in range(max_hop - 1):
        if not frontier:
            break
        nxt = []
        for path, total, ents in frontier:
            for nbr in kg.chain_successors(path[-1]):
                if nbr.tail in ents:
                    continue
                new_total = total + kg.score(nbr.tid)
                mean = new_total / (len(path) + 1)
                if mean >= tau_high and not kg.has_edge(seed.head, nbr.tail):
                    new_path = path + (nbr.tid,)
                    out.append(ShortcutProposal(seed.head, nbr.tail, mean, new_path))
                    nxt.append((new_path, new_total, ents + (nbr.tail,)))
                else:
                    break
        frontier = nxt
    return out


def propose_shortcuts(
    kg: KnowledgeGraph,
    max_hop: int = 3,
    tau_high: float | None = None,
    *,
    workers: int = 1,
) -> list[ShortcutProposal]:
    """Candidate shortcut edges over high-contribution chains of up to ``max_hop`` triplets.

    Seeds are all triplets scoring at least tau_high. The result is sorted
    by (head, tail, source path) whatever the worker count.
    """
    if tau_high is None:
        tau_high = compute_thresholds(kg)[1]
    seeds = sorted(tid for tid, st in kg.scores.items() if st.s >= tau_high)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda tid: _seed_shortcuts(kg, tid, tau_high, max_hop), seeds))
    else:
        chunks = [_seed_shortcuts(kg, tid, tau_high, max_hop) for tid in seeds]
    proposals = [p for chunk in chunks for p in chunk]
    proposals.sort(key=lambda p: (p.head, p.tail, p.source_path))
    return proposals


class FallbackLabeler:
    """Joins the constituent relation labels, e.g. ``HasBrother→WorksAt``."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg

    def label(self, proposal: ShortcutProposal) -> str:
        return CHAIN_SEP.join(self.kg.triplets[tid].relation for tid in proposal.source_path)


class LLMLabeler:
    """Asks the model for a label; any failure falls back to the joined chain."""

    def __init__(self, kg: KnowledgeGraph, client: ChatClient, max_tokens: int = 16):
        self.kg = kg
        self.client = client
        self.max_tokens = max_tokens
        self.fallback = FallbackLabeler(kg)

    def label(self, proposal: ShortcutProposal) -> str:
        names = self.kg.entities
        chain = "\n".join(
            f"{names[t.head].name} -[{t.relation}]-> {names[t.tail].name}"
            for t in (self.kg.triplets[tid] for tid in proposal.source_path)
        )
        prompt = load_template("label").format(
            head=names[proposal.head].name, tail=names[proposal.tail].name, chain=chain
        )
        try:
            reply = self.client.complete(
                CompletionRequest(prompt, max_tokens=self.max_tokens, temperature=0.0, purpose="label")
            )
        except LLMError as exc:
            logger.warning("shortcut labeler failed, using fallback: %s", exc)
            return self.fallback.label(proposal)
        lines = [ln.strip().strip("`\"'") for ln in reply.strip().splitlines() if ln.strip()]
        return lines[0] if lines and lines[0] else self.fallback.label(proposal)


def label_shortcuts(proposals: list[ShortcutProposal], labeler) -> list[ShortcutProposal]:
    for p in proposals:
        p.label = labeler.label(p)
    return proposals


def dedupe_proposals(proposals: list[ShortcutProposal]) -> list[ShortcutProposal]:
    """One proposal per (head, tail): highest score, then smallest label."""
    best: dict[tuple[str, str], ShortcutProposal] = {}
    for p in proposals:
        key = (p.head, p.tail)
        cur = best.get(key)
        if cur is None or (-p.score, p.label, p.source_path) < (-cur.score, cur.label, cur.source_path):
            best[key] = p
    return [best[k] for k in sorted(best)]


def apply_evolution(kg: KnowledgeGraph, proposals: list[ShortcutProposal], scorer=None) -> list[str]:
    """Insert labeled proposals as shortcut triplets and advance the iteration.

    Returns the new triplet ids.
    """
    kept = dedupe_proposals(proposals)
    new_tids = []
    with kg._lock:
        kg.iteration += 1
        for p in kept:
            if not p.label:
                raise ValueError(f"proposal {p.head}->{p.tail} is not labeled")
            t = kg.add_triplet(
                p.head, p.label, p.tail, SHORTCUT,
                score=p.score, created_iteration=kg.iteration, source=p.source_path,
            )
            new_tids.append(t.tid)
    if scorer is not None:
        scorer.invalidate(new_tids)
    return new_tids


def track_suppression(kg: KnowledgeGraph, tau_low: float, config: EvolutionConfig) -> list[str]:
    """Update consecutive-low counters; return ids flagged for suppression.

    With hard archival on, flagged triplets are hidden from retrieval until
    their score recovers to tau_low.
    """
    flagged = []
    kg.hard_archive = config.hard_archive
    with kg._lock:
        for tid in sorted(kg.scores):
            st = kg.scores[tid]
            if st.s < tau_low:
                st.consecutive_low += 1
            else:
                st.consecutive_low = 0
            is_flagged = st.consecutive_low >= config.suppression_window
            st.archived = config.hard_archive and is_flagged
            if is_flagged:
                flagged.append(tid)
    return flagged


def evolve(kg: KnowledgeGraph, config: EvolutionConfig, labeler=None, scorer=None) -> EvolutionReport:
    """One evolution step: thresholds, fusion, insertion, suppression tracking."""
    tau_low, tau_high = compute_thresholds(kg)
    proposals = propose_shortcuts(kg, config.max_hop, tau_high)
    label_shortcuts(proposals, labeler or FallbackLabeler(kg))
    new_tids = apply_evolution(kg, proposals, scorer)
    flagged = track_suppression(kg, tau_low, config)
    inserted = []
    for tid in new_tids:
        t = kg.triplets[tid]
        inserted.append(
            {"tid": tid, "head": t.head, "relation": t.relation, "tail": t.tail,
             "score": kg.score(tid), "source": list(t.source)}
        )
    return EvolutionReport(kg.iteration, tau_low, tau_high, len(proposals), inserted, flagged)
