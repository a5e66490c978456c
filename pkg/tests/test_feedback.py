import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfeedback.feedback import (
    NEUTRAL_JUDGMENT,
    JudgeUnavailable,
    LLMJudge,
    PathJudgment,
    ReplayJudge,
    ScriptedJudge,
    check_feedback,
    flip_feedback,
    gate_utility,
    oracle_feedback,
    parse_judgments,
)
from kgfeedback.graph import KnowledgeGraph
from kgfeedback.llm import ChatClient
from kgfeedback.retrieval import Query, RankedPath, ReasoningPath


@pytest.mark.parametrize("response, answers, fs", [
    ("Google", ["Google"], 5),
    ("Microsoft", ["Google"], 1),
    ("Google Inc", ["Google"], 4),
    ("alpha beta gamma delta", ["alpha"], 3),
    ("a b c d e f g h i", ["a"], 2),
])
def test_oracle_feedback_bins(response, answers, fs):
    assert oracle_feedback(response, answers) == fs


def test_oracle_feedback_uses_best_answer():
    assert oracle_feedback("Google", ["Alphabet", "Google"]) == 5
    with pytest.raises(ValueError):
        oracle_feedback("x", [])


@pytest.mark.parametrize("bad", [0, 6, 2.5, True, -1])
def test_feedback_range_check(bad):
    with pytest.raises(ValueError):
        check_feedback(bad)


@pytest.mark.parametrize("j, u", [
    (PathJudgment(0.9, 0.8, -0.5), 0.9),
    (PathJudgment(0.9, 0.1, -0.5), 0.0),
    (PathJudgment(-0.7, 0.8, 0.4), 0.0),
    (PathJudgment(-0.7, 0.3, 0.0), -0.7),
])
def test_gate(j, u):
    assert gate_utility(j) == u


def test_judgment_components_are_clipped():
    j = PathJudgment(3.0, -2.0, 0.5)
    assert (j.supportiveness, j.fidelity, j.conflict) == (1.0, -1.0, 0.5)


# -- noise injection --------------------------------------------------------------

class _Always:
    def random(self):
        return 0.0


def test_flip_examples():
    assert flip_feedback(2, 1.0, _Always()) == 4
    assert flip_feedback(1, 1.0, _Always()) == 5
    assert flip_feedback(3, 1.0, _Always()) == 3
    rng = random.Random(0)
    assert all(flip_feedback(fs, 0.0, rng) == fs for fs in range(1, 6))
    with pytest.raises(ValueError):
        flip_feedback(2, 1.5, rng)


@given(st.sampled_from([1, 2, 4, 5]))
def test_flip_is_an_involution(fs):
    rng = random.Random(0)
    assert flip_feedback(flip_feedback(fs, 1.0, rng), 1.0, rng) == fs


def test_flip_frequency():
    rng = random.Random(12345)
    n = 100_000
    flips = 0
    for _ in range(n):
        fs = rng.choice((1, 2, 4, 5))
        flips += flip_feedback(fs, 0.1, rng) != fs
    assert abs(flips / n - 0.1) <= 0.01


# -- scripted judge ---------------------------------------------------------------

def _scripted_setup():
    kg = KnowledgeGraph()
    good1 = kg.add_triplet("ada", "worksAt", "lab")
    good2 = kg.add_triplet("lab", "locatedIn", "london")
    stale = kg.add_triplet("ada", "worksAt", "mill")
    other = kg.add_triplet("ada", "bornIn", "paris")
    kg.iteration = 1
    short = kg.add_triplet("ada", "worksAt→locatedIn", "london", "shortcut", score=0.9,
                           created_iteration=1, source=(good1.tid, good2.tid))
    judge = ScriptedJudge(kg, {"q": [good1.key, good2.key]}, [stale.key])
    return kg, judge, {"good1": good1, "good2": good2, "stale": stale, "other": other, "short": short}


def _rp(kg, *tids):
    n = len(tids)
    trips = [kg.triplets[t] for t in tids]
    ents = (trips[0].head,) + tuple(t.tail for t in trips)
    return RankedPath(ReasoningPath(ents[0], tuple(tids), ents),
                      (0.5,) * n, (0.5,) * n, (0.5,) * n, 0.0, 1.0 / max(n, 1))


def test_scripted_judge_rules():
    kg, judge, t = _scripted_setup()
    q = Query("q", "where does ada work")
    paths = [_rp(kg, t["good1"].tid, t["good2"].tid), _rp(kg, t["short"].tid), _rp(kg, t["stale"].tid),
             _rp(kg, t["other"].tid), _rp(kg, t["good1"].tid)]
    got = judge.judge(q, paths, "london", 5)
    assert got == [ScriptedJudge.SUPPORTING, ScriptedJudge.SUPPORTING, ScriptedJudge.OTHER,
                   ScriptedJudge.OTHER, ScriptedJudge.OTHER]
    low = judge.judge(q, paths, "mill", 1)
    assert low[2] == ScriptedJudge.MISLEADING
    assert low[3] == ScriptedJudge.OTHER
    assert gate_utility(ScriptedJudge.SUPPORTING) == 1.0
    assert gate_utility(ScriptedJudge.MISLEADING) == -1.0


def test_scripted_judge_unknown_query_never_supports():
    kg, judge, t = _scripted_setup()
    got = judge.judge(Query("zzz", "what"), [_rp(kg, t["good1"].tid, t["good2"].tid)], "x", 5)
    assert got == [ScriptedJudge.OTHER]


# -- parsing and LLM-backed judges ------------------------------------------------

def test_parse_judgments():
    text = "[1] 0.9 0.8 -0.5\n2: -1, 1, -1\ngarbage line\n[1] 0 0 0\n[7] 1 1 1"
    got = parse_judgments(text, 3)
    assert got[0] == PathJudgment(0.9, 0.8, -0.5)
    assert got[1] == PathJudgment(-1.0, 1.0, -1.0)
    assert got[2] == NEUTRAL_JUDGMENT == PathJudgment(0.0, 0.0, 1.0)
    assert gate_utility(got[2]) == 0.0


def _chat_reply(text):
    return {"choices": [{"message": {"content": text}}]}


def test_llm_judge_round_trip(stub_server):
    kg, _, t = _scripted_setup()
    stub_server.handler = lambda path, body: (200, _chat_reply("[1] 1 0.9 -1\n[2] -0.5 0.6 -0.2"))
    judge = LLMJudge(kg, ChatClient(stub_server.url, backoff=0.0))
    got = judge.judge(Query("q", "where"), [_rp(kg, t["good1"].tid), _rp(kg, t["stale"].tid)], "lab", 4)
    assert [gate_utility(j) for j in got] == [1.0, -0.5]
    body = stub_server.requests[0]["body"]
    assert body["temperature"] == 0.0
    prompt = body["messages"][0]["content"]
    assert "ada -[worksAt]-> lab" in prompt and "ada -[worksAt]-> mill" in prompt
    assert judge.judge(Query("q", "where"), [], "lab", 4) == []


def test_llm_judge_transport_failure(stub_server):
    kg, _, t = _scripted_setup()
    stub_server.handler = lambda path, body: (500, {})
    judge = LLMJudge(kg, ChatClient(stub_server.url, retries=2, backoff=0.0))
    with pytest.raises(JudgeUnavailable):
        judge.judge(Query("q", "where"), [_rp(kg, t["good1"].tid)], "lab", 4)


def test_replay_judge_records_then_replays(tmp_path):
    kg, scripted, t = _scripted_setup()
    fixture = tmp_path / "judge.json"
    q = Query("q", "where does ada work")
    paths = [_rp(kg, t["good1"].tid, t["good2"].tid), _rp(kg, t["stale"].tid)]
    recorder = ReplayJudge(kg, fixture, record_from=scripted)
    first = recorder.judge(q, paths, "london", 5)
    assert len(json.loads(fixture.read_text())) == 1
    replay = ReplayJudge(kg, fixture)
    assert replay.judge(q, paths, "london", 5) == first
    with pytest.raises(JudgeUnavailable):
        replay.judge(q, paths, "london", 4)
