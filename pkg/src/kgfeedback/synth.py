"""Synthetic knowledge graphs with planted supporting chains and bad facts.

Each planted chain is a "hotspot": its full path forms one test query, and
train queries are drawn from other paths of at most two hops that start on
the chain.  Outdated triplets reuse a chain triplet's head and relation
with a stale tail; distractors do the same but their tail's name repeats a
word of the head's name, so they look more relevant to the query than the
true fact.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

RELATIONS = (
    "worksAt", "bornIn", "livesIn", "memberOf", "foundedBy", "locatedIn",
    "ownedBy", "marriedTo", "studiedAt", "managedBy", "partnerOf", "supplies",
    "hasBrother", "colleagueOf", "authorOf", "investsIn", "mentorOf", "rivalOf",
    "sponsoredBy", "headquarteredIn", "advisedBy", "neighborOf", "playsFor", "curatedBy",
)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthParams:
    n_entities: int = 450
    branching: int = 4
    n_chains: int = 50
    min_chain_hops: int = 2
    max_chain_hops: int = 3
    n_distractors: int = 50
    n_outdated: int = 50
    n_train: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.n_entities < 2 or self.branching < 1:
            raise ValueError("need at least 2 entities and branching >= 1")
        if self.branching >= min(self.n_entities, len(RELATIONS)):
            raise ValueError(f"branching must be below min(n_entities, {len(RELATIONS)})")
        if not 1 <= self.min_chain_hops <= self.max_chain_hops:
            raise ValueError("chain hop bounds must satisfy 1 <= min <= max")
        if self.max_chain_hops >= self.n_entities:
            raise ValueError("chains cannot be longer than the graph diameter")
        if self.n_chains < 1:
            raise ValueError("need at least one planted chain")
        # chain entities are disjoint across chains; stale tails come from the rest
        if self.n_chains * (self.max_chain_hops + 1) + 1 > self.n_entities:
            raise ValueError("not enough entities for disjoint planted chains")
        if min(self.n_distractors, self.n_outdated, self.n_train) < 0:
            raise ValueError("counts must be non-negative")
        if self.n_distractors + self.n_outdated > self.n_chains * self.min_chain_hops * 2:
            raise ValueError("more problematic triplets than chain positions can hold")


@dataclass
class SynthCorpus:
    triplets: list[dict]
    train: list[dict]
    test: list[dict]
    annotations: dict

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "triplets": out / "triplets.jsonl",
            "train": out / "train.jsonl",
            "test": out / "test.jsonl",
            "annotations": out / "annotations.json",
        }
        _write_jsonl(paths["triplets"], self.triplets)
        _write_jsonl(paths["train"], self.train)
        _write_jsonl(paths["test"], self.test)
        paths["annotations"].write_text(json.dumps(self.annotations, indent=1, sort_keys=True), encoding="utf-8")
        return paths


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


class _Words:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set()

    def __call__(self) -> str:
        while True:
            n = self.rng.choice((2, 2, 3))
            w = "".join(self.rng.choice(_CONSONANTS) + self.rng.choice(_VOWELS) for _ in range(n))
            w = w + self.rng.choice(_CONSONANTS)
            if w not in self.used:
                self.used.add(w)
                return w.capitalize()


def question_for(head_name: str, relations: list[str]) -> str:
    text = head_name
    for rel in relations:
        text = f"the {rel} of {text}"
    return f"What is {text}?"


def generate(params: SynthParams) -> SynthCorpus:
    params.validate()
    rng = random.Random(params.seed)
    word = _Words(rng)
    names = [f"{word()} {word()}" for _ in range(params.n_entities)]

    triplets: list[tuple[str, str, str]] = []
    keys: set[tuple[str, str, str]] = set()
    used_rel: dict[str, set[str]] = {n: set() for n in names}

    def add(h: str, r: str, t: str) -> tuple[str, str, str]:
        key = (h, r, t)
        if key not in keys:
            keys.add(key)
            triplets.append(key)
            used_rel.setdefault(h, set()).add(r)
        return key

    order = names[:]
    rng.shuffle(order)
    chain_pool = order[: params.n_chains * (params.max_chain_hops + 1)]
    rest = order[len(chain_pool):]

    # background: each entity gets `branching` edges with distinct relations
    for h in names:
        rels = rng.sample(RELATIONS, params.branching)
        tails = rng.sample([n for n in names if n != h], params.branching)
        for r, t in zip(rels, tails):
            add(h, r, t)

    chains = []
    pos = 0
    for c in range(params.n_chains):
        hops = rng.randint(params.min_chain_hops, params.max_chain_hops)
        ents = chain_pool[pos: pos + hops + 1]
        pos += params.max_chain_hops + 1
        chain = []
        for h, t in zip(ents, ents[1:]):
            free = [r for r in RELATIONS if r not in used_rel[h]]
            chain.append(add(h, rng.choice(free), t))
        chains.append({"id": f"c{c:03d}", "entities": ents, "triplets": chain})

    # problematic triplets share (head, relation) with a chain triplet
    positions = [(ci, hi) for ci, ch in enumerate(chains) for hi in range(len(ch["triplets"]))]
    problematic = []
    plan = ["outdated"] * params.n_outdated + ["distractor"] * params.n_distractors
    slots = _spread(positions, len(plan), rng)
    for role, (ci, hi) in zip(plan, slots):
        ch = chains[ci]
        h, r, _ = ch["triplets"][hi]
        if role == "outdated":
            t = rng.choice([n for n in rest if n != h and (h, r, n) not in keys])
        else:
            t = f"{h.split()[-1]} {word()}"
        key = add(h, r, t)
        problematic.append({"triplet": list(key), "role": role, "chain": ch["id"]})

    out_edges: dict[str, list[tuple[str, str, str]]] = {}
    for key in triplets:
        out_edges.setdefault(key[0], []).append(key)
    bad = {tuple(p["triplet"]) for p in problematic}

    test, targets = [], {}
    for i, ch in enumerate(chains):
        qid = f"test-{i:03d}"
        ch["test_query"] = qid
        rels = [k[1] for k in ch["triplets"]]
        test.append({"id": qid, "question": question_for(ch["entities"][0], rels), "answers": [ch["entities"][-1]]})
        targets[qid] = [list(k) for k in ch["triplets"]]

    train = []
    per_chain = [params.n_train // len(chains) + (1 if i < params.n_train % len(chains) else 0)
                 for i in range(len(chains))]
    for ci, (ch, quota) in enumerate(zip(chains, per_chain)):
        for path in _train_paths(ch, out_edges, bad, quota, rng):
            qid = f"train-{len(train):04d}"
            train.append({
                "id": qid,
                "question": question_for(path[0][0], [k[1] for k in path]),
                "answers": [path[-1][2]],
            })
            targets[qid] = [list(k) for k in path]

    rows = [{"head": h, "relation": r, "tail": t} for h, r, t in triplets]
    rng.shuffle(rows)
    annotations = {
        "params": asdict(params),
        "chains": [{"id": c["id"], "triplets": [list(k) for k in c["triplets"]], "test_query": c["test_query"]}
                   for c in chains],
        "problematic": problematic,
        "targets": targets,
    }
    return SynthCorpus(rows, train, test, annotations)


def _spread(positions: list, n: int, rng: random.Random) -> list:
    """n slots cycling over shuffled positions so chains share load evenly."""
    if not positions:
        return []
    by_chain: dict[int, list] = {}
    for p in positions:
        by_chain.setdefault(p[0], []).append(p)
    for v in by_chain.values():
        rng.shuffle(v)
    out = []
    rnd = 0
    while len(out) < n:
        for ci in sorted(by_chain):
            if len(out) == n:
                break
            opts = by_chain[ci]
            out.append(opts[rnd % len(opts)])
        rnd += 1
    return out


def _train_paths(chain: dict, out_edges: dict, bad: set, quota: int, rng: random.Random) -> list[list[tuple]]:
    """Alternative <=2-hop paths starting on the chain, never the test path itself."""
    trip = chain["triplets"]
    test_path = tuple(trip)
    preferred = []
    for n in (1, 2):
        for i in range(len(trip) - n + 1):
            sub = tuple(trip[i: i + n])
            if sub != test_path:
                preferred.append(sub)
    others = set()
    for ent in chain["entities"][:-1]:
        for k1 in out_edges.get(ent, ()):
            if k1 in bad:
                continue
            others.add((k1,))
            for k2 in out_edges.get(k1[2], ()):
                if k2 in bad or k2[2] == ent:
                    continue
                others.add((k1, k2))
    others -= set(preferred)
    others.discard(test_path)
    pool = preferred[:]
    rng.shuffle(pool)
    rest = sorted(others)
    rng.shuffle(rest)
    pool += rest
    if not pool:
        return []
    return [list(pool[i % len(pool)]) for i in range(quota)]
