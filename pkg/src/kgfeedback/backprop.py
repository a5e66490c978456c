"""Expected-utility loss over retrieved paths and its gradients.

Gradients are taken with respect to each triplet's contribution score and
the relevance/contribution mixing weight ``alpha``, using the probabilities
frozen at retrieval time.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from kgfeedback.graph import KnowledgeGraph
from kgfeedback.retrieval import RankedPath, log_average, softmax, triplet_probability

EPS_E = 1e-6
DEFAULT_LR = 0.5

EXACT = "exact"
PRODUCT_FORM = "paper_literal"
MODES = (EXACT, PRODUCT_FORM)


class BackpropError(Exception):
    pass


@dataclass
class QueryRecord:
    """Forward state of one query, replayed by the backward pass."""

    query_id: str
    paths: list[RankedPath]
    utilities: list[float]
    alpha: float

    def __post_init__(self) -> None:
        if len(self.paths) != len(self.utilities):
            raise ValueError("utilities must align 1:1 with paths")


@dataclass
class GradientReport:
    grads: dict[str, float] = field(default_factory=dict)
    alpha_grad: float = 0.0
    loss: float = 0.0
    expected_utility: float = 0.0
    n_queries: int = 0

    def top(self, k: int = 10) -> list[tuple[str, float]]:
        return sorted(self.grads.items(), key=lambda kv: (-abs(kv[1]), kv[0]))[:k]

    def to_dict(self, top_k: int = 10) -> dict:
        return {
            "loss": self.loss,
            "expected_utility": self.expected_utility,
            "alpha_grad": self.alpha_grad,
            "n_queries": self.n_queries,
            "n_triplets": len(self.grads),
            "top_gradients": [[tid, g] for tid, g in self.top(top_k)],
        }


def raw_expected_utility(rec: QueryRecord) -> float:
    return math.fsum(rp.priority * (u + 1.0) / 2.0 for rp, u in zip(rec.paths, rec.utilities))


def expected_utility(rec: QueryRecord) -> float:
    """Priority-weighted mean of (U+1)/2, clamped to [EPS_E, 1]."""
    return min(1.0, max(EPS_E, raw_expected_utility(rec)))


def loss(rec: QueryRecord) -> float:
    return -math.log(expected_utility(rec))


def _triplet_factors(rec: QueryRecord, mode: str) -> dict[str, tuple[float, float, float]]:
    """Per triplet: (factor, S_r, S_c) with dL/dS_c = -alpha * factor."""
    if mode not in MODES:
        raise ValueError(f"unknown gradient mode {mode!r}")
    if not rec.paths:
        raise BackpropError(f"query {rec.query_id!r} has no paths")
    raw_e = raw_expected_utility(rec)
    e = min(1.0, max(EPS_E, raw_e))
    mean_u = math.fsum(rp.priority * u for rp, u in zip(rec.paths, rec.utilities))
    scale = 1.0 / (2.0 * e)
    # loss is flat where the clamp is active
    if raw_e < EPS_E:
        scale = 0.0
    acc: dict[str, float] = defaultdict(float)
    info: dict[str, tuple[float, float]] = {}
    for rp, u in zip(rec.paths, rec.utilities):
        v = rp.priority / len(rp.path) * (u - mean_u)
        if mode == PRODUCT_FORM:
            v *= math.prod(rp.triplet_probs)
        for tid, p, sr, sc in zip(rp.path.triplets, rp.triplet_probs, rp.relevances, rp.contributions):
            acc[tid] += v / p
            info.setdefault(tid, (sr, sc))
    return {tid: (scale * acc[tid], *info[tid]) for tid in acc}


def grad_contribution(rec: QueryRecord, mode: str = EXACT) -> dict[str, float]:
    """dL/dS_c for every triplet on a retrieved path of this query."""
    return {tid: -rec.alpha * f for tid, (f, _, _) in _triplet_factors(rec, mode).items()}


def grad_alpha(rec: QueryRecord, mode: str = EXACT) -> float:
    factors = _triplet_factors(rec, mode)
    return math.fsum((sr - sc) * f for f, sr, sc in (factors[tid] for tid in sorted(factors)))


def compute_gradients(records: Iterable[QueryRecord], mode: str = EXACT) -> GradientReport:
    """Sum per-query gradients over a batch (fixed query-id order)."""
    records = sorted(records, key=lambda r: r.query_id)
    per_tid: dict[str, list[float]] = defaultdict(list)
    alpha_terms: list[float] = []
    losses: list[float] = []
    utils: list[float] = []
    for rec in records:
        factors = _triplet_factors(rec, mode)
        for tid in sorted(factors):
            f, sr, sc = factors[tid]
            per_tid[tid].append(-rec.alpha * f)
            alpha_terms.append((sr - sc) * f)
        e = expected_utility(rec)
        utils.append(e)
        losses.append(-math.log(e))
    n = len(records)
    return GradientReport(
        grads={tid: math.fsum(gs) for tid, gs in sorted(per_tid.items())},
        alpha_grad=math.fsum(alpha_terms),
        loss=math.fsum(losses) / n if n else 0.0,
        expected_utility=math.fsum(utils) / n if n else 0.0,
        n_queries=n,
    )


def apply_updates(kg: KnowledgeGraph, report: GradientReport, lr: float = DEFAULT_LR) -> dict[str, float]:
    """One clamped gradient-descent step on scores and alpha, committed atomically.

    Returns the new scores of the updated triplets.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    bad = [tid for tid, g in report.grads.items() if not math.isfinite(g)]
    if bad or not math.isfinite(report.alpha_grad):
        raise BackpropError(f"non-finite gradient (triplets {bad[:5]}, alpha {report.alpha_grad}); update aborted")
    updates = {tid: kg.score(tid) - lr * g for tid, g in sorted(report.grads.items())}
    kg.commit_scores(updates, alpha=kg.alpha - lr * report.alpha_grad)
    return {tid: kg.score(tid) for tid in updates}


def forward_loss(
    paths: Sequence[Sequence[str]],
    relevance: dict[str, float],
    contribution: dict[str, float],
    alpha: float,
    utilities: Sequence[float],
) -> float:
    """Loss recomputed from raw inputs, for re-evaluating perturbed states."""
    scores = [
        log_average([triplet_probability(relevance[t], contribution[t], alpha) for t in p]) for p in paths
    ]
    pri = softmax(scores)
    e = math.fsum(float(pi) * (u + 1.0) / 2.0 for pi, u in zip(pri, utilities))
    return -math.log(min(1.0, max(EPS_E, e)))
