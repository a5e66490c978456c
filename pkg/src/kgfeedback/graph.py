"""Knowledge graph store with per-triplet contribution scores."""

from __future__ import annotations

import json
import math
import os
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS_SCORE = 1e-4
INITIAL_SCORE = 0.5
RAW_SCALE = 200.0

SNAPSHOT_FORMAT = "kgfeedback.snapshot"
SNAPSHOT_VERSION = 1

BASE = "base"
SHORTCUT = "shortcut"
ORIGINS = (BASE, SHORTCUT)


class GraphError(Exception):
    pass


class TripletNotFound(GraphError, KeyError):
    pass


class SnapshotError(GraphError):
    pass


@dataclass(frozen=True)
class Entity:
    id: str
    name: str


@dataclass(frozen=True)
class Triplet:
    tid: str
    head: str
    relation: str
    tail: str
    origin: str = BASE
    created_iteration: int = 0
    # tids of the path a shortcut abstracts; empty for base triplets
    source: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)


@dataclass
class ScoreState:
    s: float = INITIAL_SCORE
    consecutive_low: int = 0
    archived: bool = False

    @property
    def raw(self) -> float:
        """Display score; the initial 0.5 shows as 100."""
        return RAW_SCALE * self.s


def clamp_score(s: float) -> float:
    if not math.isfinite(s):
        raise ValueError(f"non-finite score: {s!r}")
    return min(1.0, max(EPS_SCORE, float(s)))


@dataclass
class KnowledgeGraph:
    entities: dict[str, Entity] = field(default_factory=dict)
    triplets: dict[str, Triplet] = field(default_factory=dict)
    scores: dict[str, ScoreState] = field(default_factory=dict)
    out_index: dict[str, list[str]] = field(default_factory=lambda: defaultdict(list))
    in_index: dict[str, list[str]] = field(default_factory=lambda: defaultdict(list))
    iteration: int = 0
    alpha: float = 0.5
    hard_archive: bool = False

    def __post_init__(self) -> None:
        self._by_key: dict[tuple[str, str, str], str] = {
            t.key: tid for tid, t in self.triplets.items()
        }
        self._next_id = len(self.triplets)
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.triplets)

    # -- mutation ---------------------------------------------------------

    def add_entity(self, entity_id: str, name: str | None = None) -> Entity:
        name = entity_id if name is None else name
        if not entity_id or not name:
            raise ValueError("entity id and name must be non-empty")
        existing = self.entities.get(entity_id)
        if existing is not None:
            return existing
        ent = Entity(entity_id, name)
        self.entities[entity_id] = ent
        return ent

    def add_triplet(
        self,
        head: str,
        relation: str,
        tail: str,
        origin: str = BASE,
        *,
        score: float | None = None,
        created_iteration: int | None = None,
        source: tuple[str, ...] = (),
    ) -> Triplet:
        """Insert a triplet, auto-registering its entities.

        Re-adding an existing (head, relation, tail) returns the stored
        triplet untouched.
        """
        if not relation or not relation.strip():
            raise ValueError("relation label must be non-empty")
        if origin not in ORIGINS:
            raise ValueError(f"unknown origin {origin!r}")
        with self._lock:
            tid = self._by_key.get((head, relation, tail))
            if tid is not None:
                return self.triplets[tid]
            if created_iteration is None:
                created_iteration = self.iteration if origin == SHORTCUT else 0
            if origin == SHORTCUT:
                if head == tail:
                    raise ValueError("shortcut cannot be a self-loop")
                if created_iteration < 1:
                    raise ValueError("shortcut must be created at iteration >= 1")
            self.add_entity(head)
            self.add_entity(tail)
            tid = f"t{self._next_id:07d}"
            self._next_id += 1
            trip = Triplet(tid, head, relation, tail, origin, created_iteration, tuple(source))
            self.triplets[tid] = trip
            self.scores[tid] = ScoreState(clamp_score(INITIAL_SCORE if score is None else score))
            self._by_key[trip.key] = tid
            self.out_index[head].append(tid)
            self.in_index[tail].append(tid)
            return trip

    def set_score(self, tid: str, s: float) -> ScoreState:
        state = self._state(tid)
        state.s = clamp_score(s)
        return state

    def commit_scores(self, updates: dict[str, float], alpha: float | None = None) -> None:
        """Apply a batch of score updates (and optionally alpha) atomically."""
        clamped = {tid: clamp_score(s) for tid, s in updates.items()}
        for tid in clamped:
            self._state(tid)
        with self._lock:
            for tid, s in clamped.items():
                self.scores[tid].s = s
            if alpha is not None:
                self.alpha = min(1.0, max(0.0, alpha))

    # -- queries ----------------------------------------------------------

    def _state(self, tid: str) -> ScoreState:
        try:
            return self.scores[tid]
        except KeyError:
            raise TripletNotFound(tid) from None

    def get(self, tid: str) -> Triplet:
        try:
            return self.triplets[tid]
        except KeyError:
            raise TripletNotFound(tid) from None

    def score(self, tid: str) -> float:
        return self._state(tid).s

    def find(self, head: str, relation: str, tail: str) -> Triplet | None:
        tid = self._by_key.get((head, relation, tail))
        return None if tid is None else self.triplets[tid]

    def has_edge(self, head: str, tail: str) -> bool:
        """True if any relation links head to tail."""
        return any(self.triplets[tid].tail == tail for tid in self.out_index.get(head, ()))

    def is_retrievable(self, tid: str) -> bool:
        return not (self.hard_archive and self.scores[tid].archived)

    def chain_order(self, tid: str) -> tuple[float, str, str, str]:
        t = self.triplets[tid]
        return (-self.scores[tid].s, t.relation, t.tail, tid)

    def outgoing(self, entity_id: str) -> list[Triplet]:
        """Outgoing triplets of an entity, best contribution score first."""
        tids = sorted(self.out_index.get(entity_id, ()), key=self.chain_order)
        return [self.triplets[tid] for tid in tids]

    def chain_successors(self, tid: str) -> list[Triplet]:
        """Triplets continuing ``tid``'s chain (their head is its tail).

        Sorted by score descending, ties by (relation, tail id).
        """
        return self.outgoing(self.get(tid).tail)

    def contribution_stats(self) -> tuple[float, float]:
        """Mean and population standard deviation of all scores."""
        if not self.scores:
            raise GraphError("contribution statistics of an empty graph")
        arr = np.fromiter((st.s for st in self.scores.values()), dtype=float, count=len(self.scores))
        return float(arr.mean()), float(arr.std())

    def audit_indices(self) -> bool:
        out: dict[str, list[str]] = defaultdict(list)
        inn: dict[str, list[str]] = defaultdict(list)
        for tid, t in self.triplets.items():
            if t.head not in self.entities or t.tail not in self.entities:
                return False
            out[t.head].append(tid)
            inn[t.tail].append(tid)

        def norm(idx):
            return {k: sorted(v) for k, v in idx.items() if v}

        return norm(out) == norm(self.out_index) and norm(inn) == norm(self.in_index)

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "alpha": self.alpha,
            "iteration": self.iteration,
            "hard_archive": self.hard_archive,
            "entities": [[e.id, e.name] for e in self.entities.values()],
            "triplets": [
                {
                    "tid": t.tid,
                    "head": t.head,
                    "relation": t.relation,
                    "tail": t.tail,
                    "origin": t.origin,
                    "created_iteration": t.created_iteration,
                    "source": list(t.source),
                    "score": self.scores[t.tid].s,
                    "consecutive_low": self.scores[t.tid].consecutive_low,
                    "archived": self.scores[t.tid].archived,
                }
                for t in self.triplets.values()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> KnowledgeGraph:
        if not isinstance(data, dict) or data.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotError("not a knowledge-graph snapshot")
        if data.get("version") != SNAPSHOT_VERSION:
            raise SnapshotError(
                f"unsupported snapshot version {data.get('version')!r} (expected {SNAPSHOT_VERSION})"
            )
        try:
            entities = {eid: Entity(eid, name) for eid, name in data["entities"]}
            triplets: dict[str, Triplet] = {}
            scores: dict[str, ScoreState] = {}
            out_index: dict[str, list[str]] = defaultdict(list)
            in_index: dict[str, list[str]] = defaultdict(list)
            for rec in data["triplets"]:
                t = Triplet(
                    rec["tid"],
                    rec["head"],
                    rec["relation"],
                    rec["tail"],
                    rec["origin"],
                    int(rec["created_iteration"]),
                    tuple(rec.get("source", ())),
                )
                if t.origin not in ORIGINS:
                    raise SnapshotError(f"triplet {t.tid}: unknown origin {t.origin!r}")
                s = float(rec["score"])
                if not (EPS_SCORE <= s <= 1.0):
                    raise SnapshotError(f"triplet {t.tid}: score {s} out of range")
                triplets[t.tid] = t
                scores[t.tid] = ScoreState(s, int(rec["consecutive_low"]), bool(rec.get("archived", False)))
                out_index[t.head].append(t.tid)
                in_index[t.tail].append(t.tid)
            kg = cls(
                entities=entities,
                triplets=triplets,
                scores=scores,
                out_index=out_index,
                in_index=in_index,
                iteration=int(data["iteration"]),
                alpha=float(data["alpha"]),
                hard_archive=bool(data.get("hard_archive", False)),
            )
        except SnapshotError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt snapshot: {exc!r}") from exc
        if len(kg._by_key) != len(triplets):
            raise SnapshotError("corrupt snapshot: duplicate (head, relation, tail)")
        if not kg.audit_indices():
            raise SnapshotError("corrupt snapshot: triplet references unknown entity")
        kg._next_id = 1 + max((int(tid[1:]) for tid in triplets if tid[1:].isdigit()), default=-1)
        return kg

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> KnowledgeGraph:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SnapshotError(f"{path}: corrupt snapshot ({exc})") from exc
        return cls.from_dict(data)

    def state_equals(self, other: KnowledgeGraph) -> bool:
        return self.to_dict() == other.to_dict()


snapshot_save = KnowledgeGraph.save
snapshot_load = KnowledgeGraph.load
