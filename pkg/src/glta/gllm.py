"""Graph-language logits matching: item logits over LM hidden states.

Every logit column is a catalog item, so every ranked list this module emits
consists of valid item ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .ndgrad import DimensionError, Tensor
from .text_lm import Injected, MixedSequence, TinyLM, lm_forward_batch

log = logging.getLogger(__name__)


@dataclass
class GllmHead:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_model: int, num_items: int, rng: np.random.Generator, std: float = 0.01):
        W = nd.parameter(rng.normal(0.0, std, size=(d_model, num_items)), name="head.W")
        b = nd.parameter(np.zeros(num_items), name="head.b")
        return cls(W, b)

    @property
    def num_items(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, hidden: Tensor) -> Tensor:
        return compute_item_logits(hidden, self)


def compute_item_logits(hidden, head: GllmHead) -> Tensor:
    """Z = H W_z + b_z."""
    hidden = nd.as_tensor(hidden)
    if hidden.shape[-1] != head.W.shape[0]:
        raise DimensionError(f"hidden width {hidden.shape[-1]} != head input width {head.W.shape[0]}")
    return hidden @ head.W + head.b


def gllm_loss(Z: Tensor, targets: Sequence[tuple[int, int]], k: int) -> Tensor:
    """Mean cross-entropy of ground-truth items at the first ``k`` positions.

    Rows of ``Z`` at or beyond ``k`` never enter the loss.
    """
    Z = nd.as_tensor(Z)
    num_items = Z.shape[-1]
    kept = [(int(t), int(y)) for t, y in targets if 0 <= t < k]
    if not kept:
        raise ValueError("no supervised positions inside the first k")
    for t, y in kept:
        if not 0 <= y < num_items:
            raise IndexError(f"target item {y} at position {t} outside [0, {num_items})")
        if t >= Z.shape[0]:
            raise IndexError(f"position {t} beyond {Z.shape[0]} logit rows")
    rows = nd.gather_rows(Z, [t for t, _ in kept])
    return nd.cross_entropy(rows, [y for _, y in kept])


def _masked(row: np.ndarray, blocked: np.ndarray) -> np.ndarray:
    out = row.astype(np.float64, copy=True)
    out[blocked] = -np.inf
    return out


def _argmax_smallest(row: np.ndarray) -> int:
    # np.argmax already returns the first (smallest id) maximum
    return int(np.argmax(row))


def _blocked(mask, num_items: int) -> np.ndarray:
    blocked = np.zeros(num_items, dtype=bool)
    if mask is not None:
        m = np.asarray(mask)
        if m.dtype == bool:
            blocked |= m
        else:
            blocked[m.astype(np.int64)] = True
    return blocked


def infer_first_k(Z, k: int, exclusion_mask=None) -> list[int]:
    """Rank ``t`` is the best remaining item of row ``t``, for t < k."""
    Z = np.asarray(getattr(Z, "data", Z))
    blocked = _blocked(exclusion_mask, Z.shape[1])
    picked: list[int] = []
    for t in range(min(k, Z.shape[0])):
        if blocked.all():
            break
        row = _masked(Z[t], blocked)
        item = _argmax_smallest(row)
        picked.append(item)
        blocked[item] = True
    if len(picked) < k:
        log.warning("first-k inference returned %d of %d items", len(picked), k)
    return picked


def infer_first_logit(Z, k: int, exclusion_mask=None) -> list[int]:
    """Top ``k`` unmasked items of the first row, descending, ties by id."""
    Z = np.asarray(getattr(Z, "data", Z))
    blocked = _blocked(exclusion_mask, Z.shape[1])
    cand = np.flatnonzero(~blocked)
    row = Z[0][cand].astype(np.float64)
    order = np.lexsort((cand, -row))
    picked = [int(i) for i in cand[order[:k]]]
    if len(picked) < k:
        log.warning("first-logit inference returned %d of %d items", len(picked), k)
    return picked


def infer_autoregressive(lm: TinyLM, prompts: Sequence[MixedSequence], head: GllmHead, k: int,
                         exclusion_masks, sources, item_origin: str = "item-node") -> list[list[int]]:
    """Feed each chosen item's token back before predicting the next one.

    ``prompts`` end at the position whose hidden state predicts the first
    item. Users are decoded together; right-padding leaves each row's last
    real position untouched under the causal mask.
    """
    num_items = head.num_items
    seqs = [MixedSequence(list(p.slots)) for p in prompts]
    blocked = [_blocked(m, num_items) for m in exclusion_masks]
    out: list[list[int]] = [[] for _ in seqs]
    with nd.no_grad():
        for _ in range(k):
            live = [b for b in range(len(seqs)) if not blocked[b].all()]
            if not live:
                break
            h = lm_forward_batch(lm, [seqs[b] for b in live], sources)
            last = np.array([len(seqs[b]) - 1 for b in live])
            hs = h.data[np.arange(len(live)), last]
            logits = compute_item_logits(Tensor._wrap(hs), head).data
            for j, b in enumerate(live):
                item = _argmax_smallest(_masked(logits[j], blocked[b]))
                out[b].append(item)
                blocked[b][item] = True
                seqs[b].slots.append(Injected(item_origin, item))
    for b, ranked in enumerate(out):
        if len(ranked) < k:
            log.warning("autoregressive inference for prompt %d returned %d of %d items", b, len(ranked), k)
    return out
