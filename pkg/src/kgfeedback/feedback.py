"""Response feedback and per-path utility judging."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from kgfeedback.graph import KnowledgeGraph
from kgfeedback.llm import ChatClient, CompletionRequest, LLMError, load_template
from kgfeedback.metrics import token_f1
from kgfeedback.retrieval import Query, RankedPath, format_context

logger = logging.getLogger(__name__)

NEUTRAL_FEEDBACK = 3
DEFAULT_FIDELITY_MIN = 0.3
DEFAULT_CONFLICT_MAX = 0.0

TripletKey = tuple[str, str, str]


class JudgeUnavailable(Exception):
    """The judge could not produce judgments; the query is skipped by backprop."""


def _clip(x: float) -> float:
    return min(1.0, max(-1.0, float(x)))


@dataclass(frozen=True)
class PathJudgment:
    supportiveness: float
    fidelity: float
    conflict: float

    def __post_init__(self) -> None:
        for name in ("supportiveness", "fidelity", "conflict"):
            object.__setattr__(self, name, _clip(getattr(self, name)))


NEUTRAL_JUDGMENT = PathJudgment(0.0, 0.0, 1.0)


def check_feedback(fs: int) -> int:
    if isinstance(fs, bool) or int(fs) != fs or not 1 <= fs <= 5:
        raise ValueError(f"feedback score must be an integer in 1..5, got {fs!r}")
    return int(fs)


def oracle_feedback(response: str, answers: Sequence[str]) -> int:
    """Ground-truth feedback: token F1 against the best answer, binned to 1..5."""
    if not answers:
        raise ValueError("oracle feedback needs at least one answer")
    f1 = token_f1(response, answers)
    if f1 <= 0.0:
        return 1
    if f1 <= 0.25:
        return 2
    if f1 <= 0.5:
        return 3
    if f1 <= 0.75:
        return 4
    return 5


def gate_utility(
    j: PathJudgment,
    fidelity_min: float = DEFAULT_FIDELITY_MIN,
    conflict_max: float = DEFAULT_CONFLICT_MAX,
) -> float:
    """Supportiveness if the judgment is cross-validated, else 0."""
    if j.fidelity >= fidelity_min and j.conflict <= conflict_max:
        return j.supportiveness
    return 0.0


def flip_feedback(fs: int, rate: float, rng) -> int:
    """With probability ``rate`` mirror a non-neutral score (1<->5, 2<->4).

    ``rng`` is anything with a ``random()`` method returning [0, 1).
    """
    fs = check_feedback(fs)
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    if fs == NEUTRAL_FEEDBACK:
        return fs
    # one draw per non-neutral score, whatever the rate
    if rng.random() < rate:
        return 6 - fs
    return fs


class Judge(Protocol):
    def judge(self, query: Query, paths: Sequence[RankedPath], response: str, fs: int) -> list[PathJudgment]:
        ...


def path_lines(kg: KnowledgeGraph, paths: Sequence[RankedPath]) -> list[str]:
    return [format_context([rp], kg) for rp in paths]


class ScriptedJudge:
    """Rule-based judge driven by planted ground-truth annotations.

    ``targets`` maps a query id to the triplet-key chain that answers it;
    ``problematic`` holds keys of planted distractor/outdated triplets.
    Shortcut triplets are expanded into the base triplets they abstract.
    """

    SUPPORTING = PathJudgment(1.0, 1.0, -1.0)
    MISLEADING = PathJudgment(-1.0, 1.0, -1.0)
    OTHER = PathJudgment(0.0, 1.0, -1.0)

    def __init__(self, kg: KnowledgeGraph, targets: dict[str, Sequence[TripletKey]],
                 problematic: Iterable[TripletKey]):
        self.kg = kg
        self.targets = {qid: tuple(tuple(k) for k in chain) for qid, chain in targets.items()}
        self.problematic = {tuple(k) for k in problematic}

    def expand(self, tids: Iterable[str]) -> list[TripletKey]:
        keys: list[TripletKey] = []
        for tid in tids:
            t = self.kg.triplets[tid]
            if t.source:
                keys.extend(self.expand(t.source))
            else:
                keys.append(t.key)
        return keys

    def supports(self, keys: Sequence[TripletKey], target: Sequence[TripletKey]) -> bool:
        """True if the path ends by walking the whole target chain."""
        n = len(target)
        return n > 0 and len(keys) >= n and tuple(keys[-n:]) == tuple(target)

    def judge_one(self, qid: str, rp: RankedPath, fs: int) -> PathJudgment:
        keys = self.expand(rp.path.triplets)
        target = self.targets.get(qid, ())
        if self.supports(keys, target):
            return self.SUPPORTING
        if fs <= 2 and any(k in self.problematic for k in keys):
            return self.MISLEADING
        return self.OTHER

    def judge(self, query: Query, paths: Sequence[RankedPath], response: str, fs: int) -> list[PathJudgment]:
        fs = check_feedback(fs)
        return [self.judge_one(query.id, rp, fs) for rp in paths]


_LINE_RE = re.compile(
    r"^\s*\[?(\d+)\]?\s*[:.)\-]?\s+([-+]?\d*\.?\d+)[\s,;]+([-+]?\d*\.?\d+)[\s,;]+([-+]?\d*\.?\d+)\s*$"
)


def parse_judgments(text: str, n_paths: int) -> list[PathJudgment]:
    """Parse ``<index> <s> <f> <c>`` lines (1-based index).

    Paths without a well-formed line get the neutral judgment, which the
    gate always suppresses.
    """
    out: list[PathJudgment | None] = [None] * n_paths
    for line in text.splitlines():
        m = _LINE_RE.match(line)
        if not m:
            continue
        idx = int(m.group(1)) - 1
        if 0 <= idx < n_paths and out[idx] is None:
            out[idx] = PathJudgment(float(m.group(2)), float(m.group(3)), float(m.group(4)))
    return [j if j is not None else NEUTRAL_JUDGMENT for j in out]


def render_judge_prompt(question: str, lines: Sequence[str], response: str, fs: int) -> str:
    numbered = "\n".join(f"[{i}] {line}" for i, line in enumerate(lines, 1))
    return load_template("judge").format(question=question, response=response, feedback=fs, paths=numbered)


class LLMJudge:
    """Judges all paths of one query in a single completion call."""

    def __init__(self, kg: KnowledgeGraph, client: ChatClient, max_tokens: int = 512):
        self.kg = kg
        self.client = client
        self.max_tokens = max_tokens

    def judge(self, query: Query, paths: Sequence[RankedPath], response: str, fs: int) -> list[PathJudgment]:
        fs = check_feedback(fs)
        if not paths:
            return []
        prompt = render_judge_prompt(query.text, path_lines(self.kg, paths), response, fs)
        try:
            reply = self.client.complete(
                CompletionRequest(prompt, max_tokens=self.max_tokens, temperature=0.0, purpose="judge")
            )
        except LLMError as exc:
            raise JudgeUnavailable(str(exc)) from exc
        return parse_judgments(reply, len(paths))


def judge_digest(question: str, lines: Sequence[str], response: str, fs: int) -> str:
    body = {"question": question, "paths": list(lines), "response": response, "feedback": fs}
    return hashlib.sha256(json.dumps(body, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


class ReplayJudge:
    """Fixture-backed judge: a JSON file of digest -> [[s, f, c], ...].

    With ``record_from`` set, misses are delegated to that judge and saved.
    """

    def __init__(self, kg: KnowledgeGraph, fixture_path: str | os.PathLike, record_from: Judge | None = None):
        self.kg = kg
        self.fixture_path = Path(fixture_path)
        self.record_from = record_from
        self.records: dict[str, list[list[float]]] = {}
        if self.fixture_path.exists():
            self.records = json.loads(self.fixture_path.read_text(encoding="utf-8"))

    def judge(self, query: Query, paths: Sequence[RankedPath], response: str, fs: int) -> list[PathJudgment]:
        fs = check_feedback(fs)
        digest = judge_digest(query.text, path_lines(self.kg, paths), response, fs)
        rec = self.records.get(digest)
        if rec is None:
            if self.record_from is None:
                raise JudgeUnavailable(f"no judge fixture for request {digest}")
            judgments = self.record_from.judge(query, paths, response, fs)
            self.records[digest] = [[j.supportiveness, j.fidelity, j.conflict] for j in judgments]
            self.fixture_path.write_text(json.dumps(self.records, sort_keys=True), encoding="utf-8")
            return judgments
        if len(rec) != len(paths):
            raise JudgeUnavailable(f"fixture {digest} has {len(rec)} judgments for {len(paths)} paths")
        return [PathJudgment(*triple) for triple in rec]
