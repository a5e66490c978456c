"""QA metrics: containment accuracy, exact match and token F1."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", s.lower()).split())


def accuracy_contains(response: str, answers: Sequence[str]) -> int:
    resp = normalize_answer(response)
    for ans in answers:
        norm = normalize_answer(ans)
        if norm in resp:
            return 1
    return 0


def exact_match(response: str, answers: Sequence[str]) -> int:
    resp = normalize_answer(response)
    return int(any(resp == normalize_answer(a) for a in answers))


def _f1(pred: str, truth: str) -> float:
    p, t = normalize_answer(pred).split(), normalize_answer(truth).split()
    if not p or not t:
        return float(p == t)
    common = sum((Counter(p) & Counter(t)).values())
    if common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(t)
    return 2 * precision * recall / (precision + recall)


def token_f1(response: str, answers: Sequence[str] | str) -> float:
    """Best multiset token F1 of the response against any answer."""
    if isinstance(answers, str):
        answers = [answers]
    if not answers:
        return 0.0
    return max(_f1(response, a) for a in answers)


@dataclass
class EvalResult:
    acc: float
    em: float
    f1: float
    per_query: list[dict] = field(default_factory=list)

    @classmethod
    def from_responses(cls, items: Sequence[tuple[str, str, Sequence[str]]]) -> EvalResult:
        """Aggregate ``(query_id, response, answers)`` triples."""
        if not items:
            raise ValueError("no queries to evaluate")
        rows = []
        for qid, response, answers in items:
            rows.append(
                {
                    "id": qid,
                    "response": response,
                    "acc": accuracy_contains(response, answers),
                    "em": exact_match(response, answers),
                    "f1": token_f1(response, answers),
                }
            )
        n = len(rows)
        return cls(
            acc=sum(r["acc"] for r in rows) / n,
            em=sum(r["em"] for r in rows) / n,
            f1=sum(r["f1"] for r in rows) / n,
            per_query=rows,
        )
