import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glta.data import SyntheticConfig, generate_synthetic
from glta.graph import InteractionGraph
from glta.metrics import (EmptyTestSetError, InvariantError, MetricReport, evaluate, exclusion_masks, ndcg_at_k,
                          precision_at_k, random_expectation, random_ranker, score_ranker, split_dataset)


def brute_precision(ranked, relevant, k):
    top = list(ranked)[:k]
    hits = 0
    for x in top:
        if x in relevant:
            hits += 1
    return hits / k


def brute_ndcg(ranked, relevant, k):
    dcg = 0.0
    for r in range(1, k + 1):
        if r <= len(ranked) and ranked[r - 1] in relevant:
            dcg += 1 / math.log2(r + 1)
    idcg = sum(1 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


class TestPrecision:
    def test_count(self):
        assert precision_at_k([10, 11, 12, 13, 14], {10, 12}, 5) == 0.4

    def test_no_overlap(self):
        assert precision_at_k([1, 2, 3], {7}, 3) == 0.0

    def test_all_hits(self):
        assert precision_at_k([1, 2, 3, 4], {1, 2, 3, 4, 5}, 4) == 1.0

    def test_short_list_counts_misses(self):
        assert precision_at_k([1], {1}, 5) == 0.2


class TestNdcg:
    def test_ideal(self):
        assert ndcg_at_k([3, 1, 9, 8], {1, 3}, 4) == pytest.approx(1.0)

    def test_no_hits(self):
        assert ndcg_at_k([3, 4], {1}, 2) == 0.0

    def test_rank_two(self):
        assert ndcg_at_k([0, 1, 2, 3, 4], {1}, 5) == pytest.approx(1 / math.log2(3), abs=1e-15)

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            ndcg_at_k([1, 2], set(), 2)


def test_brute_force_oracle_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        ranked = [int(x) for x in rng.permutation(40)[:n]]
        relevant = set(int(x) for x in rng.choice(40, size=int(rng.integers(1, 10)), replace=False))
        k = int(rng.integers(1, 15))
        assert precision_at_k(ranked, relevant, k) == brute_precision(ranked, relevant, k)
        assert ndcg_at_k(ranked, relevant, k) == brute_ndcg(ranked, relevant, k)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 30), unique=True, max_size=15),
       st.sets(st.integers(0, 30), min_size=1, max_size=10), st.integers(1, 12))
def test_bounds_and_monotonicity(ranked, relevant, k):
    p, n = precision_at_k(ranked, relevant, k), ndcg_at_k(ranked, relevant, k)
    assert 0 <= p <= 1 and 0 <= n <= 1 + 1e-12
    # turn the first miss inside the top k into a hit
    misses = [j for j, x in enumerate(ranked[:k]) if x not in relevant]
    if misses:
        better = set(relevant) | {ranked[misses[0]]}
        assert precision_at_k(ranked, better, k) >= p
        # NDCG: compare against the same ideal by swapping a relevant item into the slot
        alt = list(ranked)
        outside = [x for x in relevant if x not in ranked[:k]]
        if outside:
            if outside[0] in alt:
                alt.remove(outside[0])
            alt[misses[0]] = outside[0]
            assert ndcg_at_k(alt, relevant, k) >= n - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.sets(st.integers(0, 20), min_size=1, max_size=8), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_ndcg_one_iff_ideal(relevant, k, seed):
    rng = np.random.default_rng(seed)
    others = [x for x in range(21) if x not in relevant]
    rel = list(rng.permutation(sorted(relevant)))
    ideal = rel + list(rng.permutation(others))
    assert ndcg_at_k(ideal, relevant, k) == pytest.approx(1.0)
    m = min(k, len(relevant))
    # push one relevant item out of the top min(k, |rel|) slots
    broken = ideal[:m - 1] + [others[0]] + ideal[m - 1:]
    broken = list(dict.fromkeys(broken))
    assert ndcg_at_k(broken, relevant, k) < 1.0


class TestSplit:
    def test_ten_edges(self):
        g = InteractionGraph(1, 12, [(0, i) for i in range(10)])
        s = split_dataset(g, 0.8, 0)
        assert len(s.train.user_items(0)) == 8 and len(s.test_items[0]) == 2
        assert not set(s.train.user_items(0)) & set(s.test_items[0])

    def test_deterministic(self):
        g, _ = generate_synthetic(SyntheticConfig(seed=1))
        a, b = split_dataset(g, 0.8, 5), split_dataset(g, 0.8, 5)
        assert a.train == b.train
        assert all(np.array_equal(a.test_items[u], b.test_items[u]) for u in a.test_items)

    def test_ratio_one_refuses(self):
        g, _ = generate_synthetic(SyntheticConfig(seed=1))
        s = split_dataset(g, 1.0, 0)
        with pytest.raises(EmptyTestSetError):
            evaluate(random_ranker(0), s)

    def test_tiny_users_excluded(self):
        g = InteractionGraph(3, 5, [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2), (2, 3), (2, 4)])
        s = split_dataset(g, 0.8, 0)
        assert s.excluded_users == 2
        assert s.test_users == [2]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.3, 0.95))
    def test_invariants(self, seed, ratio):
        g, _ = generate_synthetic(SyntheticConfig(users=12, items=15, seed=seed % 1000))
        s = split_dataset(g, ratio, seed)
        total = s.train.num_edges + sum(len(v) for v in s.test_items.values())
        assert total == g.num_edges
        for u, test in s.test_items.items():
            assert len(test) >= 1 and len(s.train.user_items(u)) >= 1
            assert not set(test.tolist()) & set(s.train.user_items(u).tolist())


@pytest.fixture(scope="module")
def split():
    g, _ = generate_synthetic(SyntheticConfig(seed=0))
    return split_dataset(g, 0.8, 0)


class TestEvaluate:
    def test_oracle_model(self, split):
        def oracle(users, masks, n):
            out = []
            for u, m in zip(users, masks):
                test = [int(i) for i in split.test_items[u]]
                rest = [int(i) for i in np.flatnonzero(~m) if i not in test]
                out.append((test + rest)[:n])
            return out
        r = evaluate(oracle, split)
        want = np.mean([min(len(split.test_items[u]), 5) / 5 for u in split.test_users])
        assert r.metrics["P@5"] == pytest.approx(want)
        assert r.metrics["N@5"] == pytest.approx(1.0) and r.metrics["N@10"] == pytest.approx(1.0)

    def test_random_near_closed_form(self, split):
        vals = [evaluate(random_ranker(s), split).metrics["P@5"] for s in range(200)]
        expect = random_expectation(split, 5)["P@5"]
        sigma = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - expect) < 3 * sigma

    def test_closed_form_by_enumeration(self):
        # one user, 4 candidates, 1 test item: P@2 = 1/4 * 2 / 2
        g = InteractionGraph(1, 6, [(0, 0), (0, 1), (0, 2)])
        s = split_dataset(g, 0.67, 0)
        assert random_expectation(s, 2)["P@2"] == pytest.approx(1 / 4)

    def test_report_shape_and_determinism(self, split):
        scores = np.random.default_rng(0).normal(size=(split.train.num_users, split.num_items))
        a = evaluate(score_ranker(scores), split, mode="dot-baseline")
        b = evaluate(score_ranker(scores), split, mode="dot-baseline")
        assert a.to_json() == b.to_json()
        d = a.to_dict()
        assert set(d) == {"mode", "users_evaluated", "metrics"}
        assert set(d["metrics"]) == {"P@5", "P@10", "N@5", "N@10"}
        assert all(0 <= v <= 1 for v in d["metrics"].values())

    @pytest.mark.parametrize("bad", ["dup", "range", "excluded"])
    def test_invariant_violations(self, split, bad):
        def ranker(users, masks, n):
            out = []
            for m in masks:
                free = [int(i) for i in np.flatnonzero(~m)][:n]
                if bad == "dup":
                    free[1] = free[0]
                elif bad == "range":
                    free[0] = split.num_items
                else:
                    free[0] = int(np.flatnonzero(m)[0])
                out.append(free)
            return out
        with pytest.raises(InvariantError):
            evaluate(ranker, split)

    def test_exclusion_masks(self, split):
        u = split.test_users[0]
        (m,) = exclusion_masks(split, [u])
        assert np.array_equal(np.flatnonzero(m), np.sort(split.train.user_items(u)))
