import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layoutsgg.metrics import match_triplets, mean_recall_at_k, per_class_recall, recall_at_k
from oracles import oracle_metrics, random_fixture


def hits_of(fixture, task):
    return [match_triplets(preds, gt, labels, task) for preds, gt, labels in fixture]


class TestOracle:
    @pytest.mark.parametrize("task", ["predcls", "sgcls"])
    def test_matches_bipartite_oracle(self, task):
        rng = np.random.default_rng(0)
        for _ in range(50):
            fixture = random_fixture(rng)
            hits = hits_of(fixture, task)
            for k in (1, 2, 3, 5, 20):
                r, mr = oracle_metrics(fixture, k, task)
                assert recall_at_k(hits, k) == r
                assert mean_recall_at_k(hits, k) == mr


class TestExamples:
    def test_two_class_example(self):
        gt = [(0, i, 0) for i in range(1, 11)] + [(0, 11, 1)]
        preds = np.array([(0, 0, i, 0, 0) for i in range(1, 11)])
        hits = [match_triplets(preds, gt)]
        assert recall_at_k(hits, 50) == 10 / 11
        assert mean_recall_at_k(hits, 50) == 0.5
        assert per_class_recall(hits, 50) == {0: 1.0, 1: 0.0}

    def test_perfect_and_empty_predictions(self):
        gt = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
        perfect = np.array([(s, p, o) for s, o, p in gt])
        hits = [match_triplets(perfect, gt)]
        assert hits[0].ranks.tolist() == [1, 2, 3]
        assert recall_at_k(hits, 3) == 1.0 and mean_recall_at_k(hits, 3) == 1.0
        none = [match_triplets(np.zeros((0, 3)), gt)]
        assert recall_at_k(none, 100) == 0.0 and mean_recall_at_k(none, 100) == 0.0

    def test_duplicate_predictions_hit_once(self):
        gt = [(0, 1, 2), (0, 1, 2)]
        preds = np.array([(0, 2, 1)] * 3)
        assert match_triplets(preds, gt).ranks.tolist() == [1, 2]
        preds = np.array([(0, 2, 1)])
        assert recall_at_k([match_triplets(preds, gt)], 10) == 0.5

    def test_sgcls_needs_correct_labels(self):
        gt = [(0, 1, 0)]
        preds = np.array([(0, 0, 1, 2, 1)])
        assert recall_at_k([match_triplets(preds, gt, [2, 1], "predcls")], 1) == 1.0
        assert recall_at_k([match_triplets(preds, gt, [2, 0], "sgcls")], 1) == 0.0

    def test_errors(self):
        hits = [match_triplets(np.zeros((0, 3)), [(0, 1, 0)])]
        with pytest.raises(ValueError):
            recall_at_k(hits, 0)
        with pytest.raises(ValueError):
            mean_recall_at_k(hits, 0)
        with pytest.raises(ValueError):
            mean_recall_at_k([match_triplets(np.zeros((0, 3)), [])], 5)


class TestInvariants:
    @given(st.integers(0, 2**31))
    def test_doubled_split_is_unchanged(self, seed):
        fixture = random_fixture(np.random.default_rng(seed))
        hits = hits_of(fixture, "sgcls")
        for k in (1, 5, 20):
            assert recall_at_k(hits * 2, k) == recall_at_k(hits, k)
            assert mean_recall_at_k(hits * 2, k) == mean_recall_at_k(hits, k)

    @given(st.integers(0, 2**31))
    def test_monotone_in_k(self, seed):
        hits = hits_of(random_fixture(np.random.default_rng(seed)), "predcls")
        r = [recall_at_k(hits, k) for k in range(1, 20)]
        m = [mean_recall_at_k(hits, k) for k in range(1, 20)]
        assert all(a <= b for a, b in zip(r, r[1:])) and all(a <= b for a, b in zip(m, m[1:]))
        assert all(0.0 <= v <= 1.0 for v in r + m)
