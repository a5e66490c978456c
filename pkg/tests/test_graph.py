import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfeedback.graph import (
    EPS_SCORE,
    GraphError,
    KnowledgeGraph,
    SnapshotError,
    TripletNotFound,
    clamp_score,
)


def test_duplicate_triplet_is_idempotent():
    kg = KnowledgeGraph()
    a = kg.add_triplet("e1", "worksAt", "e2")
    b = kg.add_triplet("e1", "worksAt", "e2")
    assert a.tid == b.tid
    assert len(kg) == 1


def test_new_base_triplet_starts_at_half_raw_hundred():
    kg = KnowledgeGraph()
    t = kg.add_triplet("e1", "worksAt", "e2")
    assert kg.score(t.tid) == 0.5
    assert kg.scores[t.tid].raw == 100


def test_empty_relation_rejected():
    kg = KnowledgeGraph()
    with pytest.raises(ValueError):
        kg.add_triplet("e1", "", "e2")
    with pytest.raises(ValueError):
        kg.add_triplet("e1", "   ", "e2")


def test_shortcut_invariants():
    kg = KnowledgeGraph()
    with pytest.raises(ValueError):
        kg.add_triplet("a", "x", "a", "shortcut", created_iteration=1)
    with pytest.raises(ValueError):
        kg.add_triplet("a", "x", "b", "shortcut", created_iteration=0)
    t = kg.add_triplet("a", "x", "b", "shortcut", score=0.8, created_iteration=2, source=("t1", "t2"))
    assert kg.score(t.tid) == 0.8
    assert t.source == ("t1", "t2")


def test_chain_successors_sorted_by_score():
    kg = KnowledgeGraph()
    ab = kg.add_triplet("A", "r", "B")
    bc = kg.add_triplet("B", "r", "C")
    bd = kg.add_triplet("B", "r", "D")
    kg.set_score(bc.tid, 0.9)
    kg.set_score(bd.tid, 0.3)
    assert [t.tid for t in kg.chain_successors(ab.tid)] == [bc.tid, bd.tid]
    assert kg.chain_successors(bc.tid) == []


def test_chain_successors_tie_break_is_lexicographic():
    kg = KnowledgeGraph()
    ab = kg.add_triplet("A", "r", "B")
    kg.add_triplet("B", "zeta", "C")
    kg.add_triplet("B", "alpha", "D")
    kg.add_triplet("B", "alpha", "C")
    order = [(t.relation, t.tail) for t in kg.chain_successors(ab.tid)]
    assert order == [("alpha", "C"), ("alpha", "D"), ("zeta", "C")]


def test_chain_successors_unknown_triplet():
    with pytest.raises(TripletNotFound):
        KnowledgeGraph().chain_successors("t9999999")


def test_contribution_stats_examples():
    kg = KnowledgeGraph()
    for i, s in enumerate([0.9, 0.9, 0.1, 0.1]):
        kg.set_score(kg.add_triplet(f"a{i}", "r", f"b{i}").tid, s)
    mu, sigma = kg.contribution_stats()
    assert mu == pytest.approx(0.5, abs=1e-15)
    assert sigma == pytest.approx(0.4, abs=1e-15)

    single = KnowledgeGraph()
    single.add_triplet("a", "r", "b")
    assert single.contribution_stats() == (0.5, 0.0)

    with pytest.raises(GraphError):
        KnowledgeGraph().contribution_stats()


def test_contribution_stats_against_two_pass():
    rng = random.Random(3)
    kg = KnowledgeGraph()
    for i in range(1000):
        kg.set_score(kg.add_triplet(f"h{i}", "r", f"t{i}").tid, rng.random())
    vals = [st.s for st in kg.scores.values()]
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    mu, sigma = kg.contribution_stats()
    assert abs(mu - mean) < 1e-12
    assert abs(sigma - math.sqrt(var)) < 1e-12


@pytest.mark.parametrize("value, stored", [(1.7, 1.0), (-0.2, EPS_SCORE), (0.42, 0.42)])
def test_set_score_clamps(value, stored):
    kg = KnowledgeGraph()
    t = kg.add_triplet("a", "r", "b")
    assert kg.set_score(t.tid, value).s == stored


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_set_score_rejects_non_finite(bad):
    kg = KnowledgeGraph()
    t = kg.add_triplet("a", "r", "b")
    with pytest.raises(ValueError):
        kg.set_score(t.tid, bad)
    assert kg.score(t.tid) == 0.5


def test_commit_scores_is_all_or_nothing():
    kg = KnowledgeGraph()
    t = kg.add_triplet("a", "r", "b")
    with pytest.raises(TripletNotFound):
        kg.commit_scores({t.tid: 0.9, "t9999999": 0.1})
    assert kg.score(t.tid) == 0.5
    kg.commit_scores({t.tid: 0.9}, alpha=1.4)
    assert kg.score(t.tid) == 0.9 and kg.alpha == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.floats(-10, 10, allow_nan=False)), max_size=40))
def test_scores_always_in_range(ops):
    kg = KnowledgeGraph()
    tids = [kg.add_triplet(f"h{i}", "r", f"t{i}").tid for i in range(6)]
    for idx, value in ops:
        kg.set_score(tids[idx], value)
    assert all(EPS_SCORE <= st.s <= 1.0 for st in kg.scores.values())
    assert all(EPS_SCORE <= clamp_score(v) <= 1.0 for _, v in ops)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.sampled_from(["r", "s"]), st.sampled_from("ABCDE")),
                max_size=30))
def test_index_audit_after_random_inserts(edges):
    kg = KnowledgeGraph()
    for h, r, t in edges:
        kg.add_triplet(h, r, t)
    assert kg.audit_indices()
    assert len(kg) == len(set(edges))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABCD"), st.sampled_from(["p", "q", "r"]), st.sampled_from("ABCD"),
                          st.sampled_from([0.2, 0.5, 0.8])), min_size=1, max_size=25))
def test_successor_order_is_total(edges):
    kg = KnowledgeGraph()
    for h, r, t, s in edges:
        kg.set_score(kg.add_triplet(h, r, t).tid, s)
    keys = [kg.chain_order(tid) for tid in kg.triplets]
    assert len(set(keys)) == len(keys)
    for tid in kg.triplets:
        succ = kg.chain_successors(tid)
        assert [kg.chain_order(t.tid) for t in succ] == sorted(kg.chain_order(t.tid) for t in succ)


def _sample_graph() -> KnowledgeGraph:
    kg = KnowledgeGraph(alpha=0.37)
    kg.add_entity("e1", "Ada Lovelace")
    a = kg.add_triplet("e1", "worksAt", "e2")
    b = kg.add_triplet("e2", "locatedIn", "e3")
    kg.set_score(a.tid, 0.1 + 0.2)
    kg.iteration = 1
    kg.add_triplet("e1", "worksAt→locatedIn", "e3", "shortcut", score=0.65, created_iteration=1,
                   source=(a.tid, b.tid))
    kg.scores[b.tid].consecutive_low = 2
    return kg


def test_snapshot_round_trip(tmp_path):
    kg = _sample_graph()
    path = tmp_path / "g.json"
    kg.save(path)
    back = KnowledgeGraph.load(path)
    assert back.state_equals(kg)
    assert back.entities["e1"].name == "Ada Lovelace"
    assert back.alpha == 0.37 and back.iteration == 1
    # new ids continue after the restored ones
    assert back.add_triplet("x", "r", "y").tid not in kg.triplets


def test_snapshot_unknown_version(tmp_path):
    kg = _sample_graph()
    data = kg.to_dict()
    data["version"] = 99
    path = tmp_path / "g.json"
    path.write_text(json.dumps(data))
    with pytest.raises(SnapshotError, match="version"):
        KnowledgeGraph.load(path)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("triplets"),
    lambda d: d["triplets"][0].update(score=3.0),
    lambda d: d["triplets"][0].update(head="nobody"),
    lambda d: d["triplets"].append(dict(d["triplets"][0], tid="t0000099")),
    lambda d: d.update(format="something-else"),
])
def test_snapshot_corruption_detected(tmp_path, mutate):
    data = _sample_graph().to_dict()
    mutate(data)
    path = tmp_path / "g.json"
    path.write_text(json.dumps(data))
    with pytest.raises(SnapshotError):
        KnowledgeGraph.load(path)


def test_snapshot_truncated_file(tmp_path):
    path = tmp_path / "g.json"
    _sample_graph().save(path)
    path.write_text(path.read_text()[:50])
    with pytest.raises(SnapshotError):
        KnowledgeGraph.load(path)


def test_large_snapshot_scores_bit_identical(tmp_path):
    rng = random.Random(11)
    kg = KnowledgeGraph()
    for i in range(10_000):
        t = kg.add_triplet(f"e{rng.randrange(3000)}", f"r{rng.randrange(20)}", f"e{rng.randrange(3000)}")
        kg.set_score(t.tid, rng.random())
    path = tmp_path / "big.json"
    kg.save(path)
    back = KnowledgeGraph.load(path)
    assert len(back) == len(kg)
    for tid, st_ in kg.scores.items():
        assert back.scores[tid].s.hex() == st_.s.hex()
        assert back.triplets[tid] == kg.triplets[tid]
    assert back.audit_indices()
