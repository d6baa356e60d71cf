import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentadapt.data import Triplet
from sentadapt.evaluation import (
    EvaluationError,
    RetrievalTask,
    average_precision,
    compare,
    evaluate,
    rank_candidates,
    triplets_to_tasks,
)

from .oracles import average_precision_oracle


class LookupModel:
    """Embeds texts from a fixed table; unknown texts get a seeded random vector."""

    def __init__(self, table=None, dim=3, seed=0):
        self.table = dict(table or {})
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def embed(self, texts):
        for t in texts:
            if t not in self.table:
                self.table[t] = self.rng.normal(size=self.dim)
        return np.stack([self.table[t] for t in texts])


@pytest.mark.parametrize("ranking, expected", [
    ([1, 0, 1], (1 + 2 / 3) / 2),
    ([1], 1.0),
    ([0, 1], 0.5),
    ([0, 0, 1], 1 / 3),
    ([1, 1, 0], 1.0),
    ([0, 1, 0, 1], (1 / 2 + 2 / 4) / 2),
])
def test_average_precision_fixtures(ranking, expected):
    assert average_precision(ranking) == pytest.approx(expected, abs=1e-10)


def test_average_precision_requires_a_relevant_item():
    with pytest.raises(EvaluationError):
        average_precision([0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30).filter(any))
def test_average_precision_matches_oracle(labels):
    assert average_precision(labels) == pytest.approx(average_precision_oracle(labels), abs=1e-12)


def test_rank_ties_keep_pool_order():
    q = np.array([1.0, 0.0])
    cands = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    assert rank_candidates(q, cands).tolist() == [1, 2, 0, 3]


def triplets(n):
    return [Triplet(f"a{i}", f"p{i}", f"n{i}", {"anchor_id": f"a{i}"}) for i in range(n)]


def test_pool_sizes():
    (task,) = triplets_to_tasks(triplets(1), k=0)
    assert len(task.candidates) == 2 and sum(r for _, r in task.candidates) == 1
    tasks = triplets_to_tasks(triplets(10), k=8)
    assert all(len(t.candidates) == 10 for t in tasks)
    assert triplets_to_tasks(triplets(10), k=8, seed=3) == triplets_to_tasks(triplets(10), k=8, seed=3)


def test_pool_members_and_relevance():
    ts = triplets(12)
    for t, task in zip(ts, triplets_to_tasks(ts, k=5, seed=1)):
        texts = [c for c, _ in task.candidates]
        assert task.query_text == t.anchor
        assert dict(task.candidates)[t.positive] is True and dict(task.candidates)[t.negative] is False
        assert len(set(texts)) == len(texts) == 7
        assert all(c.startswith("p") for c in texts if c not in (t.positive, t.negative))


def test_distractors_skip_same_anchor():
    ts = [Triplet("a", "p1", "n1"), Triplet("a", "p2", "n2"), Triplet("b", "p3", "n3")]
    task = triplets_to_tasks(ts, k=8)[0]
    assert {c for c, _ in task.candidates} == {"p1", "n1", "p3"}


def test_empty_test_set_rejected():
    with pytest.raises(EvaluationError):
        triplets_to_tasks([])


def test_perfect_and_inverted_models():
    tasks = [RetrievalTask("q", [("x", False), ("y", True), ("z", False)])]
    good = LookupModel({"q": np.array([1.0, 0, 0]), "y": np.array([1.0, 0, 0]),
                        "x": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])})
    assert evaluate(good, tasks).map_score == 1.0
    bad = LookupModel({"q": np.array([1.0, 0, 0]), "y": np.array([-1.0, 0, 0]),
                       "x": np.array([1.0, 0.1, 0]), "z": np.array([1.0, 0, 0.1])})
    assert evaluate(bad, tasks).map_score == pytest.approx(1 / 3)


def test_zero_norm_embedding_rejected():
    tasks = [RetrievalTask("q", [("x", True)])]
    with pytest.raises(EvaluationError, match="zero-norm"):
        evaluate(LookupModel({"q": np.zeros(3), "x": np.ones(3)}), tasks)


def test_random_model_map_within_monte_carlo_band():
    # oracle: expected AP of one relevant item among m under uniform random ranking = H_m / m
    m = 10
    rng = np.random.default_rng(0)
    aps = [average_precision(list(rng.permutation([True] + [False] * (m - 1)))) for _ in range(1000)]
    expected, spread = float(np.mean(aps)), float(np.std(aps) / np.sqrt(400))
    assert expected == pytest.approx(sum(1 / k for k in range(1, m + 1)) / m, abs=0.02)
    tasks = triplets_to_tasks(triplets(400), k=8, seed=1)
    score = evaluate(LookupModel(dim=16, seed=5), tasks).map_score
    assert abs(score - expected) < 4 * spread


def test_report_serialization():
    tasks = triplets_to_tasks(triplets(6), k=2)
    rep = evaluate(LookupModel(), tasks, label="m", protocol={"k": 2})
    d = json.loads(rep.to_json())
    assert d["model"] == "m" and d["map"] == rep.map_score and len(d["per_query"]) == 6
    assert rep.to_markdown().startswith("| model | MAP |")


def test_comparison_table_marks_best_per_column():
    tasks = triplets_to_tasks(triplets(8), k=3)
    table_good = {}
    for t in triplets(8):
        v = np.random.default_rng(len(table_good)).normal(size=3)
        table_good[t.anchor] = table_good[t.positive] = v
    good = LookupModel(table_good, seed=1)
    table = compare([("random", LookupModel(seed=2)), ("oracle", good)], {"cite": tasks, "again": tasks})
    assert table.best() == {"cite": "oracle", "again": "oracle"}
    assert "**100.00**" in table.to_markdown()
    assert json.loads(table.to_json())["rows"][1]["map"]["cite"] == 1.0
    with pytest.raises(EvaluationError):
        compare([("one", good)], {"cite": tasks})
    with pytest.raises(EvaluationError):
        compare([("a", good), ("b", LookupModel(dim=4))], {"cite": tasks})


def test_exhaustive_rankings_agree_with_oracle():
    for m in range(1, 6):
        for labels in itertools.product([False, True], repeat=m):
            if any(labels):
                assert average_precision(labels) == pytest.approx(average_precision_oracle(labels), abs=1e-12)
