"""Word-level vocabulary and a small frozen decoder-only transformer.

Positions are encoded with ALiBi-style per-head linear attention biases, so
the weights carry no position table and nearby context dominates the
shallow heads.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from . import ndgrad as nd
from .ndgrad import ContractError, Tensor

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
USER_SLOT, ITEM_SLOT, PROFILE_SLOT, PRED_SLOT = "<user>", "<item>", "<profile>", "<pred>"
SPECIALS = (PAD, BOS, EOS, UNK, USER_SLOT, ITEM_SLOT, PROFILE_SLOT, PRED_SLOT)
EOS_ID = SPECIALS.index(EOS)

_WORD = re.compile(r"[^\W_]+", re.UNICODE)
_MASK_VALUE = -1e9


class SequenceLengthError(ValueError):
    def __init__(self, length: int, max_len: int):
        super().__init__(f"sequence length {length} exceeds maximum {max_len}")
        self.length = length
        self.max_len = max_len


def tokenize(text: str) -> list[str]:
    """Lowercased words; whitespace and punctuation separate them."""
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ContractError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("duplicate token in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad(self) -> int:
        return 0

    def special(self, name: str) -> int:
        return self.index[name]

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


def build_vocab(corpus: Sequence[str], max_size: int = 5000) -> Vocabulary:
    """Most frequent ``max_size`` words (ties alphabetical) after the specials."""
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for text in corpus for w in tokenize(text))
    ranked = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], w))
    return Vocabulary(list(SPECIALS) + ranked[:max_size])


@dataclass(frozen=True)
class Injected:
    """A continuous vector taken from row ``index`` of source table ``origin``."""

    origin: str
    index: int


Slot = Union[int, Injected]


@dataclass
class MixedSequence:
    slots: list[Slot]
    supervision: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.slots)

    def validate(self, max_len: int) -> None:
        if len(self.slots) > max_len:
            raise SequenceLengthError(len(self.slots), max_len)
        for pos, _ in self.supervision:
            if not 0 <= pos < len(self.slots):
                raise ContractError(f"supervision position {pos} outside sequence of {len(self.slots)}")

    def extended(self, extra: Sequence[Slot]) -> "MixedSequence":
        return MixedSequence(list(self.slots) + list(extra), list(self.supervision))

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr((self.slots, self.supervision)).encode())
        return h.hexdigest()


@dataclass
class LMConfig:
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    max_len: int = 256
    seed: int = 0


class TinyLM:
    """Pre-LayerNorm causal transformer; all weights frozen unless unfrozen."""

    def __init__(self, vocab_size: int, config: LMConfig | None = None, weights=None):
        cfg = config or LMConfig()
        if cfg.d_model % cfg.heads:
            raise ValueError("d_model must be divisible by heads")
        self.config = cfg
        self.vocab_size = vocab_size
        if weights is None:
            weights = _init_weights(vocab_size, cfg)
        self.weights: dict[str, Tensor] = {k: Tensor(v, name=k) for k, v in weights.items()}
        self.slopes = alibi_slopes(cfg.heads)

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def max_len(self) -> int:
        return self.config.max_len

    @property
    def token_embedding(self) -> Tensor:
        return self.weights["tok_emb"]

    def set_trainable(self, flag: bool) -> list[Tensor]:
        for t in self.weights.values():
            t.requires_grad = flag
            t.grad = None
        return list(self.weights.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"lm.{k}": v.data for k, v in self.weights.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(self.weights[k].data.tobytes())
        return h.hexdigest()

    def forward_embeddings(self, x: Tensor) -> Tensor:
        """Run the blocks on input embeddings ``(B, T, d)``; returns final hidden states."""
        cfg = self.config
        w = self.weights
        B, T, d = x.shape
        nh, dh = cfg.heads, d // cfg.heads
        bias = self._attention_bias(T, x.data.dtype)
        for layer in range(cfg.depth):
            p = f"h{layer}."
            a = nd.layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
            qkv = a @ w[p + "attn.w_qkv"] + w[p + "attn.b_qkv"]
            qkv = nd.transpose(qkv.reshape(B, T, 3, nh, dh), (2, 0, 3, 1, 4))
            q, k, v = _split3(qkv)
            scores = (q @ nd.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)) + bias
            att = nd.softmax_rows(scores) @ v
            att = nd.transpose(att, (0, 2, 1, 3)).reshape(B, T, d)
            x = x + (att @ w[p + "attn.w_o"] + w[p + "attn.b_o"])
            m = nd.layernorm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            m = nd.gelu(m @ w[p + "mlp.w_in"] + w[p + "mlp.b_in"])
            x = x + (m @ w[p + "mlp.w_out"] + w[p + "mlp.b_out"])
        return nd.layernorm(x, w["lnf.g"], w["lnf.b"])

    def _attention_bias(self, T: int, dtype) -> np.ndarray:
        pos = np.arange(T)
        dist = (pos[:, None] - pos[None, :]).astype(np.float64)
        bias = -self.slopes[:, None, None] * dist[None]
        bias = np.where(dist[None] < 0, _MASK_VALUE, bias)
        return bias.astype(dtype)[None]

    def embed(self, seqs: Sequence[MixedSequence], sources: Mapping[str, object] | None = None):
        """Input embeddings ``(B, T, d)`` for right-padded sequences."""
        sources = sources or {}
        T = max(len(s) for s in seqs)
        for s in seqs:
            s.validate(self.max_len)
        B = len(seqs)
        ids = np.zeros((B, T), dtype=np.int64)
        inj_rows = np.full((B, T), -1, dtype=np.int64)
        offsets: dict[str, tuple[int, int]] = {}
        pool_parts: list[Tensor] = []
        total = 0
        for b, s in enumerate(seqs):
            for t, slot in enumerate(s.slots):
                if not isinstance(slot, Injected):
                    ids[b, t] = slot
                    continue
                if slot.origin not in offsets:
                    if slot.origin not in sources:
                        raise ContractError(f"no source table for injected origin {slot.origin!r}")
                    src = nd.as_tensor(sources[slot.origin])
                    if src.ndim != 2 or src.shape[1] != self.d_model:
                        raise nd.DimensionError(
                            f"injected source {slot.origin!r} has shape {src.shape}, "
                            f"expected (*, {self.d_model})")
                    offsets[slot.origin] = (total, src.shape[0])
                    pool_parts.append(src)
                    total += src.shape[0]
                start, rows = offsets[slot.origin]
                if not 0 <= slot.index < rows:
                    raise IndexError(f"{slot.origin} row {slot.index} outside [0, {rows})")
                inj_rows[b, t] = start + slot.index
        if ids.max(initial=0) >= self.vocab_size or ids.min(initial=0) < 0:
            raise IndexError("token id outside vocabulary")
        x = nd.gather_rows(self.token_embedding, ids)
        if pool_parts:
            mask = (inj_rows >= 0)[..., None].astype(x.data.dtype)
            pool = nd.concat(pool_parts, axis=0) if len(pool_parts) > 1 else pool_parts[0]
            inj = nd.gather_rows(pool, np.maximum(inj_rows, 0))
            x = x * (1.0 - mask) + inj * mask
        return x


def _split3(qkv: Tensor):
    # (3, B, h, T, dh) -> three (B, h, T, dh) views with a shared backward
    parts = []
    for j in range(3):
        def bw(g, j=j, shape=qkv.shape):
            full = np.zeros(shape, dtype=g.dtype)
            full[j] = g
            return (full,)
        parts.append(nd.custom_op(qkv.data[j], (qkv,), bw))
    return parts


def alibi_slopes(heads: int) -> np.ndarray:
    return np.array([2.0 ** (-8.0 * (h + 1) / heads) for h in range(heads)])


def _init_weights(vocab_size: int, cfg: LMConfig) -> dict[str, np.ndarray]:
    # unit-scale token space; every linear map scaled by 1/sqrt(fan_in)
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    dt = nd.default_dtype()

    def normal(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(dt)

    w = {"tok_emb": rng.normal(0.0, 1.0, size=(vocab_size, d)).astype(dt)}
    for layer in range(cfg.depth):
        p = f"h{layer}."
        w[p + "ln1.g"] = np.ones(d, dt)
        w[p + "ln1.b"] = np.zeros(d, dt)
        w[p + "attn.w_qkv"] = normal(d, 3 * d)
        w[p + "attn.b_qkv"] = np.zeros(3 * d, dt)
        w[p + "attn.w_o"] = normal(d, d)
        w[p + "attn.b_o"] = np.zeros(d, dt)
        w[p + "ln2.g"] = np.ones(d, dt)
        w[p + "ln2.b"] = np.zeros(d, dt)
        w[p + "mlp.w_in"] = normal(d, 4 * d)
        w[p + "mlp.b_in"] = np.zeros(4 * d, dt)
        w[p + "mlp.w_out"] = normal(4 * d, d)
        w[p + "mlp.b_out"] = np.zeros(d, dt)
    w["lnf.g"] = np.ones(d, dt)
    w["lnf.b"] = np.zeros(d, dt)
    return w


def lm_forward(lm: TinyLM, seq: MixedSequence, sources=None) -> Tensor:
    """Last-layer hidden states ``(len(seq), d_model)`` for one sequence."""
    h = lm_forward_batch(lm, [seq], sources)
    return h.reshape(h.shape[1], h.shape[2])


def lm_forward_batch(lm: TinyLM, seqs: Sequence[MixedSequence], sources=None) -> Tensor:
    """Hidden states ``(B, T_max, d_model)``; shorter sequences are PAD-filled."""
    return lm.forward_embeddings(lm.embed(seqs, sources))


def greedy_decode(lm: TinyLM, prompt: MixedSequence, max_new: int,
                  head: Callable[[Tensor], Tensor], sources=None, eos: int | None = None) -> list[int]:
    """Append the argmax token until ``eos`` or ``max_new`` tokens."""
    if len(prompt) + max_new > lm.max_len:
        raise SequenceLengthError(len(prompt) + max_new, lm.max_len)
    eos = EOS_ID if eos is None else eos
    out: list[int] = []
    seq = MixedSequence(list(prompt.slots))
    with nd.no_grad():
        for _ in range(max_new):
            h = lm_forward(lm, seq, sources)
            logits = head(h).data[-1]
            tok = int(np.argmax(logits))
            out.append(tok)
            if tok == eos:
                break
            seq.slots.append(tok)
    return out


def pretrain_next_token(lm: TinyLM, vocab: Vocabulary, corpus: Sequence[str], epochs: int = 1,
                        lr: float = 1e-3, seed: int = 0, batch_size: int = 16) -> list[float]:
    """Optional next-token pass over ``corpus`` with a tied output layer; refreezes after."""
    rng = np.random.default_rng(seed)
    params = lm.set_trainable(True)
    state = nd.AdamState(lr=lr).init_for(params)
    docs = [[vocab.special(BOS)] + vocab.encode(t)[: lm.max_len - 2] + [vocab.special(EOS)] for t in corpus]
    docs = [d for d in docs if len(d) > 2]
    losses = []
    try:
        for _ in range(epochs):
            order = rng.permutation(len(docs))
            total, count = 0.0, 0
            for lo in range(0, len(order), batch_size):
                batch = [docs[i] for i in order[lo:lo + batch_size]]
                seqs = [MixedSequence(list(d[:-1])) for d in batch]
                h = lm_forward_batch(lm, seqs)
                B, T, d = h.shape
                rows, targets, weights = [], [], []
                for b, doc in enumerate(batch):
                    n = len(doc) - 1
                    rows.extend(b * T + t for t in range(n))
                    targets.extend(doc[1:])
                    weights.extend([1.0 / (n * len(batch))] * n)
                hs = nd.gather_rows(h.reshape(B * T, d), rows)
                logits = hs @ nd.transpose(lm.token_embedding)
                loss = nd.cross_entropy(logits, targets, weights)
                nd.backward(loss)
                nd.adam_step(params, state)
                total += loss.item()
                count += 1
            losses.append(total / max(count, 1))
    finally:
        lm.set_trainable(False)
    return losses
