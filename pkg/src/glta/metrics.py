"""Per-user train/test split and top-k ranking metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import InteractionGraph


class EmptyTestSetError(ValueError):
    pass


class InvariantError(AssertionError):
    """A ranking broke the evaluation contract (duplicate, invalid or excluded item)."""


@dataclass
class EvalSplit:
    train: InteractionGraph
    test_items: dict[int, np.ndarray]
    seed: int
    ratio: float
    excluded_users: int = 0

    @property
    def test_users(self) -> list[int]:
        return sorted(self.test_items)

    @property
    def num_items(self) -> int:
        return self.train.num_items

    def test_edges(self) -> np.ndarray:
        rows = [np.column_stack([np.full(len(v), u), v]) for u, v in sorted(self.test_items.items())]
        return np.concatenate(rows) if rows else np.zeros((0, 2), dtype=np.int64)


def split_dataset(graph: InteractionGraph, ratio: float = 0.8, seed: int = 0) -> EvalSplit:
    """Per-user random split keeping round(ratio * n) interactions for training.

    Users that would end up with an empty train or test side keep all their
    interactions in training and are counted in ``excluded_users``.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    train_edges, train_ts = [], []
    test: dict[int, np.ndarray] = {}
    excluded = 0
    ts = graph.timestamps
    for u in range(graph.num_users):
        lo, hi = np.searchsorted(graph.edges[:, 0], [u, u + 1])
        items = graph.edges[lo:hi, 1]
        n = len(items)
        if n == 0:
            continue
        perm = rng.permutation(n)
        n_train = int(math.floor(ratio * n + 0.5))
        if n_train < 1 or n_train >= n:
            excluded += 1
            keep = np.arange(n)
        else:
            keep = np.sort(perm[:n_train])
            test[u] = np.sort(items[perm[n_train:]])
        train_edges.append(np.column_stack([np.full(len(keep), u), items[keep]]))
        if ts is not None:
            train_ts.append(ts[lo:hi][keep])
    edges = np.concatenate(train_edges) if train_edges else np.zeros((0, 2), dtype=np.int64)
    train = InteractionGraph(graph.num_users, graph.num_items, edges,
                             np.concatenate(train_ts) if ts is not None and train_ts else None)
    return EvalSplit(train, test, seed, ratio, excluded)


def precision_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    rel = set(int(x) for x in relevant)
    hits = sum(1 for x in list(ranked)[:k] if int(x) in rel)
    return hits / k


def ndcg_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    """Binary-relevance NDCG; the ideal DCG places min(k, |relevant|) hits first."""
    rel = set(int(x) for x in relevant)
    if not rel:
        raise ValueError("NDCG is undefined for an empty relevant set")
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(list(ranked)[:k]) if int(x) in rel)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(rel))))
    return dcg / idcg


@dataclass
class MetricReport:
    mode: str
    users_evaluated: int
    metrics: dict[str, float]
    users_skipped: int = 0
    rankings: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "users_evaluated": self.users_evaluated, "metrics": dict(self.metrics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# (users, exclusion masks, n) -> one ranked item list per user
Ranker = Callable[[Sequence[int], Sequence[np.ndarray], int], Sequence[Sequence[int]]]


def exclusion_masks(split: EvalSplit, users: Sequence[int]) -> list[np.ndarray]:
    out = []
    for u in users:
        m = np.zeros(split.num_items, dtype=bool)
        m[split.train.user_items(u)] = True
        out.append(m)
    return out


def evaluate(ranker: Ranker, split: EvalSplit, cutoffs=(5, 10), mode: str = "firstk",
             check: bool = True) -> MetricReport:
    """Mean P@k and N@k over test users, ranking every non-training item.

    With ``check`` set, a ranking that repeats an item, emits an invalid id
    or contains an excluded item raises :class:`InvariantError`.
    """
    users = [u for u in split.test_users if len(split.test_items[u])]
    skipped = len(split.test_items) - len(users)
    if not users:
        raise EmptyTestSetError("no users with test interactions; nothing to evaluate")
    cutoffs = sorted(set(int(c) for c in cutoffs))
    masks = exclusion_masks(split, users)
    ranked = ranker(users, masks, max(cutoffs))
    sums = {f"{m}@{c}": 0.0 for m in ("P", "N") for c in cutoffs}
    rankings = {}
    for u, mask, r in zip(users, masks, ranked):
        r = [int(x) for x in r]
        if check:
            assert_valid_ranking(r, mask, split.num_items)
        rankings[u] = r
        rel = split.test_items[u]
        for c in cutoffs:
            sums[f"P@{c}"] += precision_at_k(r, rel, c)
            sums[f"N@{c}"] += ndcg_at_k(r, rel, c)
    n = len(users)
    metrics = {key: sums[key] / n for key in sorted(sums)}
    return MetricReport(mode, n, metrics, skipped, rankings)


def assert_valid_ranking(ranked: Sequence[int], mask: np.ndarray, num_items: int) -> None:
    if len(set(ranked)) != len(ranked):
        raise InvariantError(f"duplicate item in ranking {ranked}")
    for x in ranked:
        if not 0 <= x < num_items:
            raise InvariantError(f"item id {x} outside catalog of {num_items}")
        if mask[x]:
            raise InvariantError(f"excluded item {x} in ranking")


def score_ranker(scores: np.ndarray) -> Ranker:
    """Rank by a dense user-by-item score matrix; ties go to the smaller id."""

    def rank(users, masks, n):
        out = []
        for u, m in zip(users, masks):
            cand = np.flatnonzero(~m)
            s = scores[u, cand].astype(np.float64)
            out.append([int(i) for i in cand[np.lexsort((cand, -s))[:n]]])
        return out

    return rank


def dot_product_ranker(E_u: np.ndarray, E_i: np.ndarray) -> Ranker:
    return score_ranker(E_u @ E_i.T)


def random_ranker(seed: int) -> Ranker:
    def rank(users, masks, n):
        rng = np.random.default_rng(seed)
        return [[int(i) for i in rng.permutation(np.flatnonzero(~m))[:n]] for m in masks]

    return rank


def random_expectation(split: EvalSplit, k: int) -> Mapping[str, float]:
    """Closed-form mean P@k under a uniformly random ranking of candidates.

    Each candidate lands in the top k with probability k / |candidates|, so
    the expected precision of user u is |test_u| / (|I| - |train_u|).
    """
    vals = []
    for u in split.test_users:
        cand = split.num_items - len(split.train.user_items(u))
        if len(split.test_items[u]) and cand >= k:
            vals.append(len(split.test_items[u]) / cand)
        elif len(split.test_items[u]):
            vals.append(len(split.test_items[u]) / k)
    return {f"P@{k}": float(np.mean(vals)) if vals else 0.0}
