"""Node projectors, instruction templates and the two alignment stages.

Item-text alignment trains the item projector and the GLLM head; user-item
alignment trains the user projector and the head (plus the item projector
when it is unfrozen). Graph embeddings and the language model stay frozen.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .gllm import GllmHead, compute_item_logits, infer_autoregressive, infer_first_k, infer_first_logit
from .graph import GraphEmbeddings, InteractionGraph
from .ndgrad import ContractError, DimensionError, Tensor
from .text_lm import (BOS, ITEM_SLOT, PRED_SLOT, PROFILE_SLOT, USER_SLOT, Injected, MixedSequence,
                      SequenceLengthError, TinyLM, Vocabulary, lm_forward_batch)

log = logging.getLogger(__name__)

ITEM_HEADER = "match each item token below with the item description that follows"
USER_HEADER = "given the user history profile and prediction recommend the next items"

ITEM_NODE, USER_NODE, USER_ID = "item-node", "user-node", "user-id"
PROFILE, PREDICTION = "profile", "prediction"


@dataclass
class Projector:
    W: Tensor
    b: Tensor
    kind: str

    @classmethod
    def init(cls, d_graph: int, d_model: int, kind: str, rng: np.random.Generator,
             input_rms: float = 1.0) -> "Projector":
        # scaled so projected rows start near unit RMS, like the token table
        std = 1.0 / (np.sqrt(d_graph) * max(input_rms, 1e-8))
        W = nd.parameter(rng.normal(0.0, std, size=(d_graph, d_model)), name=f"{kind}_proj.W")
        b = nd.parameter(np.zeros(d_model), name=f"{kind}_proj.b")
        return cls(W, b, kind)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, E) -> Tensor:
        E = nd.as_tensor(E)
        if E.ndim != 2 or E.shape[1] != self.W.shape[0]:
            raise DimensionError(f"cannot project {E.shape} with weight {self.W.shape}")
        return E @ self.W + self.b


def project_items(E_i, projector: Projector) -> Tensor:
    if projector.kind != "item":
        raise ContractError(f"expected an item projector, got {projector.kind!r}")
    return projector(E_i)


def project_users(E_u, projector: Projector) -> Tensor:
    if projector.kind != "user":
        raise ContractError(f"expected a user projector, got {projector.kind!r}")
    return projector(E_u)


# ------------------------------------------------------------------ templates

def _text_ids(vocab: Vocabulary, text: str) -> list[int]:
    return [vocab.special(BOS)] + vocab.encode(text)


def build_item_text_template(items: Sequence[int], descriptions: Mapping[int, Sequence[int]],
                             vocab: Vocabulary, max_len: int,
                             rng: np.random.Generator | None = None) -> list[MixedSequence]:
    """Item tokens in shuffled order, then each description and its answer slot.

    ``descriptions`` maps item id to token ids. The answer slot after a
    description is supervised with that description's item, whatever order
    the item tokens were shown in. A batch that does not fit in ``max_len``
    is halved until it does.
    """
    items = [int(i) for i in items]
    if len(items) < 1:
        raise ValueError("empty item batch")
    shown = list(items) if rng is None else [items[j] for j in rng.permutation(len(items))]
    slots: list = _text_ids(vocab, ITEM_HEADER)
    item_tok = vocab.special(ITEM_SLOT)
    for i in shown:
        slots += [item_tok, Injected(ITEM_NODE, i)]
    sup = []
    for i in items:
        slots += list(descriptions[i])
        sup.append((len(slots), i))
        slots.append(item_tok)
    if len(slots) <= max_len:
        return [MixedSequence(slots, sup)]
    if len(items) == 1:
        raise SequenceLengthError(len(slots), max_len)
    half = len(items) // 2
    return (build_item_text_template(items[:half], descriptions, vocab, max_len, rng)
            + build_item_text_template(items[half:], descriptions, vocab, max_len, rng))


@dataclass
class TemplateFlags:
    user_token: str = USER_NODE
    include_profile: bool = True
    include_prediction: bool = True


def build_user_item_template(user: int, context_items: Sequence[int], profile_ids: Sequence[int],
                             prediction_ids: Sequence[int], k: int, vocab: Vocabulary, max_len: int,
                             labels: Sequence[int] = (), flags: TemplateFlags | None = None
                             ) -> MixedSequence:
    """Header, user token, history item tokens, profile, prediction, k answer slots.

    The first ``min(k, len(labels))`` answer slots are supervised with
    ``labels`` in order.
    """
    flags = flags or TemplateFlags()
    item_tok = vocab.special(ITEM_SLOT)
    slots: list = _text_ids(vocab, USER_HEADER)
    slots += [vocab.special(USER_SLOT), Injected(flags.user_token, int(user))]
    for i in context_items:
        slots += [item_tok, Injected(ITEM_NODE, int(i))]
    if flags.include_profile:
        slots.append(vocab.special(PROFILE_SLOT))
        slots += [Injected(PROFILE, int(t)) for t in profile_ids]
    if flags.include_prediction:
        slots.append(vocab.special(PRED_SLOT))
        slots += [Injected(PREDICTION, int(t)) for t in prediction_ids]
    start = len(slots)
    slots += [item_tok] * k
    if len(slots) > max_len:
        raise SequenceLengthError(len(slots), max_len)
    sup = [(start + t, int(y)) for t, y in enumerate(list(labels)[:k])]
    return MixedSequence(slots, sup)


def answer_positions(seq: MixedSequence, k: int) -> list[int]:
    return list(range(len(seq) - k, len(seq)))


# ---------------------------------------------------------------------- model

@dataclass
class AlignConfig:
    k: int = 10
    label_policy: str = "sampled"
    context_cap: int = 10
    freeze_item_projector: bool = True
    item_batch: int = 4
    desc_max_tokens: int = 16
    text_max_tokens: int = 8
    stage2_epochs: int = 20
    stage3_epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 8


@dataclass
class GltaModel:
    """Frozen graph embeddings and LM plus the trainable alignment pieces."""

    graph_emb: GraphEmbeddings
    lm: TinyLM
    vocab: Vocabulary
    item_proj: Projector
    user_proj: Projector
    head: GllmHead
    user_ids: Tensor | None = None

    @classmethod
    def create(cls, graph_emb: GraphEmbeddings, lm: TinyLM, vocab: Vocabulary,
               rng: np.random.Generator, user_id_tokens: bool = False) -> "GltaModel":
        d, dm = graph_emb.d, lm.d_model
        rms_i = float(np.sqrt(np.mean(graph_emb.E_i.astype(np.float64) ** 2)))
        rms_u = float(np.sqrt(np.mean(graph_emb.E_u.astype(np.float64) ** 2)))
        item_proj = Projector.init(d, dm, "item", rng, rms_i)
        user_proj = Projector.init(d, dm, "user", rng, rms_u)
        head = GllmHead.init(dm, graph_emb.E_i.shape[0], rng)
        ids = None
        if user_id_tokens:
            ids = nd.parameter(rng.normal(0.0, 1.0, size=(graph_emb.E_u.shape[0], dm)), name="user_id.emb")
        return cls(graph_emb, lm, vocab, item_proj, user_proj, head, ids)

    @property
    def num_items(self) -> int:
        return self.head.num_items

    def sources(self) -> dict[str, Tensor]:
        tok = self.lm.token_embedding
        src = {ITEM_NODE: project_items(self.graph_emb.E_i, self.item_proj),
               USER_NODE: project_users(self.graph_emb.E_u, self.user_proj),
               PROFILE: tok, PREDICTION: tok}
        if self.user_ids is not None:
            src[USER_ID] = self.user_ids
        return src

    def trainable(self) -> dict[str, Tensor]:
        out = {"item_proj.W": self.item_proj.W, "item_proj.b": self.item_proj.b,
               "user_proj.W": self.user_proj.W, "user_proj.b": self.user_proj.b,
               "head.W": self.head.W, "head.b": self.head.b}
        if self.user_ids is not None:
            out["user_id.emb"] = self.user_ids
        return out

    def checksum(self, names: Sequence[str]) -> str:
        h = hashlib.sha256()
        params = self.trainable()
        for n in names:
            h.update(params[n].data.tobytes())
        return h.hexdigest()


def _set_trainable(model: GltaModel, names: Sequence[str]) -> list[Tensor]:
    params = model.trainable()
    for n, p in params.items():
        p.requires_grad = n in names
        p.grad = None
    return [params[n] for n in names]


def sequence_loss(model: GltaModel, seqs: Sequence[MixedSequence], sources=None) -> Tensor:
    """Mean over sequences of the per-sequence GLLM cross-entropy."""
    sources = model.sources() if sources is None else sources
    h = lm_forward_batch(model.lm, seqs, sources)
    B, T, d = h.shape
    rows, targets, weights = [], [], []
    for b, s in enumerate(seqs):
        n = len(s.supervision)
        for pos, item in s.supervision:
            rows.append(b * T + pos)
            targets.append(item)
            weights.append(1.0 / (n * len(seqs)))
    hs = nd.gather_rows(h.reshape(B * T, d), rows)
    return nd.cross_entropy(compute_item_logits(hs, model.head), targets, weights)


@dataclass
class StageState:
    """Everything needed to continue a stage exactly where it stopped."""

    adam: nd.AdamState
    rng: np.random.Generator
    epochs_done: int = 0
    losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None


EpochLog = Callable[[int, float, float], None]


def _train_epochs(model: GltaModel, names: Sequence[str], epochs: int, state: StageState,
                  make_batches: Callable[[np.random.Generator], list[list[MixedSequence]]],
                  on_epoch: EpochLog | None) -> StageState:
    params = _set_trainable(model, names)
    if not state.adam.m:
        state.adam.init_for(params)
    try:
        for epoch in range(state.epochs_done, epochs):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            for batch in make_batches(state.rng):
                loss = sequence_loss(model, batch)
                if state.initial_loss is None:
                    state.initial_loss = loss.item()
                nd.backward(loss)
                nd.adam_step(params, state.adam)
                total += loss.item() * len(batch)
                count += len(batch)
            mean_loss = total / max(count, 1)
            if not np.isfinite(mean_loss):
                raise nd.NumericDomainError(f"non-finite loss at epoch {epoch + 1}")
            state.losses.append(mean_loss)
            state.epochs_done = epoch + 1
            if on_epoch is not None:
                on_epoch(epoch + 1, mean_loss, (time.perf_counter() - t0) * 1000.0)
    finally:
        nd.active_tape().clear()
        for p in model.trainable().values():
            p.requires_grad = False
            p.grad = None
    return state


def _minibatches(seqs: list[MixedSequence], size: int) -> list[list[MixedSequence]]:
    return [seqs[i:i + size] for i in range(0, len(seqs), size)]


def description_ids(vocab: Vocabulary, descriptions: Sequence[str], max_tokens: int) -> dict[int, list[int]]:
    out = {}
    for i, text in enumerate(descriptions):
        ids = vocab.encode(text)[:max_tokens]
        if ids:
            out[i] = ids
        else:
            log.warning("item %d has no usable description; skipped in item-text alignment", i)
    return out


STAGE2_PARAMS = ("item_proj.W", "item_proj.b", "head.W", "head.b")


def train_stage2(model: GltaModel, descriptions: Sequence[str], config: AlignConfig,
                 rng: np.random.Generator, state: StageState | None = None,
                 on_epoch: EpochLog | None = None) -> StageState:
    """Item-text alignment: only the item projector and head change."""
    desc = description_ids(model.vocab, descriptions, config.desc_max_tokens)
    items = sorted(desc)
    if len(items) < 2:
        raise ContractError("item-text alignment needs at least two described items")
    state = state or StageState(nd.AdamState(lr=config.lr), rng)
    n = max(2, config.item_batch)

    def batches(r):
        order = [items[j] for j in r.permutation(len(items))]
        groups = [order[i:i + n] for i in range(0, len(order), n)]
        if len(groups) > 1 and len(groups[-1]) < 2:
            groups[-2] += groups.pop()
        seqs = []
        for g in groups:
            seqs += build_item_text_template(g, desc, model.vocab, model.lm.max_len, r)
        return _minibatches(seqs, config.batch_size)

    return _train_epochs(model, STAGE2_PARAMS, config.stage2_epochs, state, batches, on_epoch)


@dataclass
class UserContext:
    """Per-user text and history needed to build user-item templates."""

    history: dict[int, np.ndarray]
    ordered: bool
    profile_ids: dict[int, list[int]]
    prediction_ids: dict[int, list[int]]

    @classmethod
    def build(cls, train: InteractionGraph, vocab: Vocabulary, profiles: Mapping[int, str],
              predictions: Mapping[int, str], max_tokens: int) -> "UserContext":
        hist = {u: np.asarray(train.user_history(u)) for u in range(train.num_users)
                if len(train.user_items(u))}
        prof = {u: vocab.encode(profiles.get(u, ""))[:max_tokens] for u in hist}
        pred = {u: vocab.encode(predictions.get(u, ""))[:max_tokens] for u in hist}
        return cls(hist, train.timestamps is not None, prof, pred)

    def context_items(self, u: int, cap: int, rng: np.random.Generator | None) -> list[int]:
        h = self.history[u]
        if self.ordered:
            return [int(i) for i in h[-cap:]] if cap else []
        if rng is None:
            return [int(i) for i in h[:cap]]
        return [int(i) for i in rng.permutation(h)[:cap]]


def template_flags(model: GltaModel, no_profile: bool = False, no_prediction: bool = False) -> TemplateFlags:
    return TemplateFlags(USER_ID if model.user_ids is not None else USER_NODE,
                         not no_profile, not no_prediction)


def draw_labels(history: np.ndarray, k: int, policy: str, cap: int,
                rng: np.random.Generator, ordered: bool) -> tuple[list[int], list[int]]:
    """(context items, labels) for one user and epoch."""
    h = np.asarray(history)
    if policy == "sampled":
        labels = [int(i) for i in rng.permutation(h)[:k]]
        if ordered:
            ctx = [int(i) for i in h[-cap:]] if cap else []
        else:
            ctx = [int(i) for i in rng.permutation(h)[:cap]]
        return ctx, labels
    if policy == "heldout":
        perm = rng.permutation(h)
        n_lab = min(k, max(1, len(h) // 2))
        labels = [int(i) for i in perm[:n_lab]]
        rest = perm[n_lab:]
        if ordered:
            keep = set(int(i) for i in rest)
            rest = np.array([i for i in h if int(i) in keep], dtype=np.int64)
            ctx = [int(i) for i in rest[-cap:]] if cap else []
        else:
            ctx = [int(i) for i in rest[:cap]]
        return ctx, labels
    raise ValueError(f"unknown label policy {policy!r}")


def stage3_params(model: GltaModel, config: AlignConfig, joint_items: bool = False) -> tuple[str, ...]:
    names = ["head.W", "head.b"]
    if model.user_ids is not None:
        names.append("user_id.emb")
    else:
        names += ["user_proj.W", "user_proj.b"]
    if joint_items or not config.freeze_item_projector:
        names += ["item_proj.W", "item_proj.b"]
    return tuple(names)


def train_stage3(model: GltaModel, ctx: UserContext, config: AlignConfig, rng: np.random.Generator,
                 state: StageState | None = None, flags: TemplateFlags | None = None,
                 joint_items: bool = False, on_epoch: EpochLog | None = None) -> StageState:
    """User-item alignment over every user with at least one training interaction."""
    users = sorted(ctx.history)
    if not users:
        raise ContractError("no users with training interactions")
    flags = flags or template_flags(model)
    state = state or StageState(nd.AdamState(lr=config.lr), rng)

    def batches(r):
        seqs = []
        for j in r.permutation(len(users)):
            u = users[j]
            context, labels = draw_labels(ctx.history[u], config.k, config.label_policy,
                                          config.context_cap, r, ctx.ordered)
            seqs.append(build_user_item_template(
                u, context, ctx.profile_ids[u], ctx.prediction_ids[u], config.k, model.vocab,
                model.lm.max_len, labels, flags))
        return _minibatches(seqs, config.batch_size)

    names = stage3_params(model, config, joint_items)
    return _train_epochs(model, names, config.stage3_epochs, state, batches, on_epoch)


# ------------------------------------------------------------------ inference

def inference_templates(model: GltaModel, ctx: UserContext, users: Sequence[int], n: int,
                        config: AlignConfig, flags: TemplateFlags | None = None,
                        seed: int = 0) -> list[MixedSequence]:
    flags = flags or template_flags(model)
    out = []
    for u in users:
        rng = np.random.default_rng([seed, int(u)])
        context = ctx.context_items(u, config.context_cap, None if ctx.ordered else rng)
        out.append(build_user_item_template(
            u, context, ctx.profile_ids.get(u, []), ctx.prediction_ids.get(u, []), n, model.vocab,
            model.lm.max_len, (), flags))
    return out


def answer_logits(model: GltaModel, seqs: Sequence[MixedSequence], n: int, batch_size: int = 16,
                  sources=None) -> list[np.ndarray]:
    """Item logits at the trailing ``n`` answer slots of each sequence."""
    out = []
    with nd.no_grad():
        sources = model.sources() if sources is None else sources
        for lo in range(0, len(seqs), batch_size):
            batch = seqs[lo:lo + batch_size]
            h = lm_forward_batch(model.lm, batch, sources).data
            for b, s in enumerate(batch):
                rows = h[b, len(s) - n:len(s)]
                out.append(compute_item_logits(Tensor._wrap(rows), model.head).data)
    return out


def model_ranker(model: GltaModel, ctx: UserContext, config: AlignConfig, mode: str = "firstk",
                 flags: TemplateFlags | None = None, seed: int = 0, batch_size: int = 16):
    """A ranker for :func:`glta.metrics.evaluate` using one inference discipline."""

    def rank(users, masks, n):
        seqs = inference_templates(model, ctx, users, n, config, flags, seed)
        if mode in ("firstk", "fl"):
            Z = answer_logits(model, seqs, n, batch_size)
            fn = infer_first_k if mode == "firstk" else infer_first_logit
            return [fn(z, n, m) for z, m in zip(Z, masks)]
        if mode == "ar":
            prompts = [MixedSequence(s.slots[:len(s) - n + 1]) for s in seqs]
            out = []
            with nd.no_grad():
                sources = model.sources()
                for lo in range(0, len(prompts), batch_size):
                    out += infer_autoregressive(model.lm, prompts[lo:lo + batch_size], model.head, n,
                                                masks[lo:lo + batch_size], sources)
            return out
        raise ValueError(f"unknown inference mode {mode!r}")

    return rank
