"""Random instance builders and exhaustive oracles shared by the tests."""

from __future__ import annotations

import itertools
import math
import random

from kgfeedback.backprop import QueryRecord, forward_loss
from kgfeedback.graph import KnowledgeGraph
from kgfeedback.retrieval import RankedPath, ReasoningPath, log_average, path_priorities, triplet_probability


# -- backprop instances ---------------------------------------------------------

def random_record(rng: random.Random, max_paths: int = 10, max_hops: int = 4, n_triplets: int = 12):
    """A query record over random paths drawn from a small triplet pool.

    Returns (record, relevance, contribution, path tid lists).
    """
    pool = [f"t{i}" for i in range(n_triplets)]
    rel = {t: rng.uniform(0.05, 1.0) for t in pool}
    con = {t: rng.uniform(0.05, 0.95) for t in pool}
    alpha = rng.uniform(0.05, 0.95)
    n_paths = rng.randint(1, max_paths)
    tid_lists = [rng.sample(pool, rng.randint(1, max_hops)) for _ in range(n_paths)]
    utilities = [rng.uniform(-1.0, 1.0) for _ in range(n_paths)]
    return build_record("q", tid_lists, rel, con, alpha, utilities), rel, con, tid_lists


def build_record(qid, tid_lists, rel, con, alpha, utilities) -> QueryRecord:
    prob_lists = [[triplet_probability(rel[t], con[t], alpha) for t in tids] for tids in tid_lists]
    pri = path_priorities(prob_lists)
    paths = []
    for tids, probs, p in zip(tid_lists, prob_lists, pri):
        ents = tuple(f"e{i}" for i in range(len(tids) + 1))
        paths.append(
            RankedPath(
                path=ReasoningPath(ents[0], tuple(tids), ents),
                triplet_probs=tuple(probs),
                relevances=tuple(rel[t] for t in tids),
                contributions=tuple(con[t] for t in tids),
                log_avg=log_average(probs),
                priority=p,
            )
        )
    return QueryRecord(qid, paths, list(utilities), alpha)


def fd_contribution(tid_lists, rel, con, alpha, utilities, tid, h=1e-6) -> float:
    up, down = dict(con), dict(con)
    up[tid] += h
    down[tid] -= h
    return (forward_loss(tid_lists, rel, up, alpha, utilities)
            - forward_loss(tid_lists, rel, down, alpha, utilities)) / (2 * h)


def fd_alpha(tid_lists, rel, con, alpha, utilities, h=1e-6) -> float:
    return (forward_loss(tid_lists, rel, con, alpha + h, utilities)
            - forward_loss(tid_lists, rel, con, alpha - h, utilities)) / (2 * h)


def close(a: float, b: float, rel_tol: float = 1e-5, floor: float = 1e-8) -> bool:
    # the floor absorbs cancellation noise of the central difference near zero
    return abs(a - b) <= rel_tol * max(abs(a), abs(b)) + floor


# -- random graphs --------------------------------------------------------------

def random_graph(rng: random.Random, n_entities: int = 12, n_triplets: int = 40, n_relations: int = 3,
                 scored: bool = True) -> KnowledgeGraph:
    kg = KnowledgeGraph()
    ents = [f"E{i:02d}" for i in range(n_entities)]
    rels = [f"r{i}" for i in range(n_relations)]
    for _ in range(n_triplets * 3):
        if len(kg) >= n_triplets:
            break
        kg.add_triplet(rng.choice(ents), rng.choice(rels), rng.choice(ents))
    if scored:
        for tid in kg.triplets:
            # coarse grid so ties in the ordering get exercised too
            kg.set_score(tid, rng.choice([0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0]))
    return kg


def oracle_subgraph(kg: KnowledgeGraph, seeds, k: int) -> set[str]:
    """Triplets whose head is within k-1 hops, by Bellman-Ford style relaxation."""
    inf = math.inf
    dist = {e: inf for e in kg.entities}
    for s in seeds:
        if s in dist:
            dist[s] = 0
    for _ in range(len(kg.entities)):
        for t in kg.triplets.values():
            if kg.is_retrievable(t.tid) and dist[t.head] + 1 < dist[t.tail]:
                dist[t.tail] = dist[t.head] + 1
    return {tid for tid, t in kg.triplets.items() if kg.is_retrievable(tid) and dist[t.head] <= k - 1}


def oracle_paths(kg: KnowledgeGraph, tids: set[str], start: str, max_hop: int) -> set[tuple[str, ...]]:
    """Every sequence of distinct triplets that chains from ``start`` without revisiting an entity."""
    pool = sorted(tids)
    firsts = [t for t in pool if kg.triplets[t].head == start]
    found = set()
    for n in range(1, max_hop + 1):
        for first in firsts:
            rest = [t for t in pool if t != first]
            for tail_seq in itertools.permutations(rest, n - 1):
                found.update(_chained(kg, start, (first,) + tail_seq))
    return found


def _chained(kg: KnowledgeGraph, start: str, seq: tuple[str, ...]) -> list[tuple[str, ...]]:
    trips = [kg.triplets[t] for t in seq]
    if any(a.tail != b.head for a, b in zip(trips, trips[1:])):
        return []
    ents = [start] + [t.tail for t in trips]
    return [seq] if len(set(ents)) == len(ents) else []


def oracle_shortcuts(kg: KnowledgeGraph, tau_high: float, max_hop: int) -> set[tuple[str, str, tuple[str, ...]]]:
    """Declarative statement of the fusion rule, checked over every simple chain.

    A chain (seed, n1, ..., nj) with 1 <= j < max_hop is proposed iff
      * its mean score reaches tau_high and no edge joins its endpoints,
      * its prefix is the seed or itself a proposed chain, and
      * every earlier sibling of nj (in best-first order, ignoring siblings
        that would revisit an entity) also satisfies the first condition.
    """
    def ok(chain):
        mean = sum(kg.score(t) for t in chain) / len(chain)
        head = kg.triplets[chain[0]].head
        return mean >= tau_high and not kg.has_edge(head, kg.triplets[chain[-1]].tail)

    def ents(chain):
        return [kg.triplets[chain[0]].head] + [kg.triplets[t].tail for t in chain]

    proposed = set()
    alive = {(tid,) for tid, st in kg.scores.items() if st.s >= tau_high}
    for _ in range(max_hop - 1):
        nxt = set()
        for chain in alive:
            seen = ents(chain)
            siblings = [t.tid for t in kg.outgoing(seen[-1]) if t.tail not in seen]
            for i, tid in enumerate(siblings):
                cand = chain + (tid,)
                if ok(cand) and all(ok(chain + (s,)) for s in siblings[:i]):
                    nxt.add(cand)
        proposed |= nxt
        alive = nxt
    return {(kg.triplets[c[0]].head, kg.triplets[c[-1]].tail, c) for c in proposed}
