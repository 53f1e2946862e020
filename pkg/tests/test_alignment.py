import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glta import ndgrad as nd
from glta.alignment import (ITEM_HEADER, ITEM_NODE, PREDICTION, PROFILE, USER_HEADER, USER_ID, USER_NODE,
                            AlignConfig, GltaModel, Projector, TemplateFlags, UserContext, answer_positions,
                            build_item_text_template, build_user_item_template, description_ids, draw_labels,
                            model_ranker, project_items, project_users, sequence_loss, stage3_params,
                            template_flags, train_stage2, train_stage3)
from glta.data import SyntheticConfig, generate_synthetic
from glta.gllm import GllmHead, compute_item_logits, gllm_loss
from glta.graph import GraphConfig, GraphEmbeddings, bpr_pretrain
from glta.metrics import evaluate, split_dataset
from glta.text_lm import (ITEM_SLOT, PRED_SLOT, PROFILE_SLOT, USER_SLOT, Injected, LMConfig, MixedSequence,
                          SequenceLengthError, TinyLM, build_vocab, lm_forward, lm_forward_batch)
from gradcheck import check

TOY_DESCS = ["apple", "river", "guitar", "planet", "candle", "tiger"]


def make_projector(W, b, kind):
    return Projector(nd.Tensor(W), nd.Tensor(b), kind)


class TestProjectors:
    @pytest.mark.parametrize("fn,kind", [(project_items, "item"), (project_users, "user")])
    def test_constant(self, fn, kind):
        c = np.arange(5.0)
        V = fn(np.random.default_rng(0).normal(size=(4, 3)), make_projector(np.zeros((3, 5)), c, kind)).data
        assert np.array_equal(V, np.tile(c, (4, 1)).astype(V.dtype))

    @pytest.mark.parametrize("fn,kind", [(project_items, "item"), (project_users, "user")])
    def test_identity(self, fn, kind):
        E = np.random.default_rng(1).normal(size=(4, 3)).astype(np.float32)
        assert np.array_equal(fn(E, make_projector(np.eye(3), np.zeros(3), kind)).data, E)

    @pytest.mark.parametrize("fn,kind", [(project_items, "item"), (project_users, "user")])
    def test_loop_oracle(self, fn, kind):
        rng = np.random.default_rng(2)
        E, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
        with nd.float64_mode():
            V = fn(E, make_projector(W, b, kind)).data
        want = [[sum(E[r, j] * W[j, c] for j in range(3)) + b[c] for c in range(5)] for r in range(4)]
        assert np.abs(V - np.array(want)).max() < 1e-6

    def test_kind_and_width_checked(self):
        p = make_projector(np.zeros((3, 5)), np.zeros(5), "item")
        with pytest.raises(nd.ContractError):
            project_users(np.zeros((2, 3)), p)
        with pytest.raises(nd.DimensionError):
            project_items(np.zeros((2, 4)), p)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-4, 4))
    def test_affine(self, seed, alpha):
        rng = np.random.default_rng(seed)
        E, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
        with nd.float64_mode():
            p = make_projector(W, b, "user")
            lhs = project_users(alpha * E, p).data
        assert np.allclose(lhs, alpha * (E @ W) + b, atol=1e-10)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(TOY_DESCS + ["red fruit", "blue water", ITEM_HEADER, USER_HEADER])


class TestItemTemplate:
    def test_unshuffled_targets_follow_batch(self, vocab):
        desc = description_ids(vocab, TOY_DESCS, 16)
        (seq,) = build_item_text_template([3, 1], desc, vocab, 64)
        assert [y for _, y in seq.supervision] == [3, 1]
        inj = [s for s in seq.slots if isinstance(s, Injected)]
        assert inj == [Injected(ITEM_NODE, 3), Injected(ITEM_NODE, 1)]
        for pos, y in seq.supervision:
            assert seq.slots[pos] == vocab.special(ITEM_SLOT)
            assert seq.slots[pos - 1] == desc[y][-1]

    def test_shuffle_moves_slots_not_labels(self, vocab):
        desc = description_ids(vocab, TOY_DESCS, 16)
        plain = build_item_text_template([0, 1, 2, 3], desc, vocab, 64)[0]
        for s in range(5):
            shuf = build_item_text_template([0, 1, 2, 3], desc, vocab, 64, np.random.default_rng(s))[0]
            assert shuf.supervision == plain.supervision
            shown = [x.index for x in shuf.slots if isinstance(x, Injected)]
            assert sorted(shown) == [0, 1, 2, 3]

    def test_seeded_shuffle_reproducible(self, vocab):
        desc = description_ids(vocab, TOY_DESCS, 16)
        a = build_item_text_template(list(range(6)), desc, vocab, 64, np.random.default_rng(9))
        b = build_item_text_template(list(range(6)), desc, vocab, 64, np.random.default_rng(9))
        assert [s.fingerprint() for s in a] == [s.fingerprint() for s in b]

    def test_overlength_splits(self, vocab):
        desc = description_ids(vocab, TOY_DESCS, 16)
        seqs = build_item_text_template(list(range(6)), desc, vocab, 24)
        assert len(seqs) > 1 and all(len(s) <= 24 for s in seqs)
        assert sorted(y for s in seqs for _, y in s.supervision) == list(range(6))


class TestUserTemplate:
    def build(self, vocab, flags=None, k=3, labels=(4, 5, 1)):
        return build_user_item_template(7, [1, 2], [11, 12], [13], k, vocab, 64, labels, flags)

    def test_layout(self, vocab):
        seq = self.build(vocab)
        slots = seq.slots
        u = slots.index(vocab.special(USER_SLOT))
        assert slots[u + 1] == Injected(USER_NODE, 7)
        p = slots.index(vocab.special(PROFILE_SLOT))
        assert slots[p + 1:p + 3] == [Injected(PROFILE, 11), Injected(PROFILE, 12)]
        q = slots.index(vocab.special(PRED_SLOT))
        assert slots[q + 1] == Injected(PREDICTION, 13)
        assert [pos for pos, _ in seq.supervision] == answer_positions(seq, 3)
        assert [y for _, y in seq.supervision] == [4, 5, 1]

    def test_k3_tail(self, vocab):
        seq = self.build(vocab)
        assert [p for p, _ in seq.supervision] == [len(seq) - 3, len(seq) - 2, len(seq) - 1]

    def test_without_profile_shifts_left(self, vocab):
        full = self.build(vocab)
        short = self.build(vocab, TemplateFlags(include_profile=False))
        assert len(full) - len(short) == 3
        assert vocab.special(PROFILE_SLOT) not in short.slots
        assert [p + 3 for p, _ in short.supervision] == [p for p, _ in full.supervision]

    def test_without_prediction(self, vocab):
        seq = self.build(vocab, TemplateFlags(include_prediction=False))
        assert vocab.special(PRED_SLOT) not in seq.slots

    def test_user_id_token(self, vocab):
        seq = self.build(vocab, TemplateFlags(user_token=USER_ID))
        assert Injected(USER_ID, 7) in seq.slots and Injected(USER_NODE, 7) not in seq.slots

    def test_overlength(self, vocab):
        with pytest.raises(SequenceLengthError):
            build_user_item_template(0, list(range(30)), [], [], 10, vocab, 64)


class TestLabels:
    def test_sampled_policy_exact_k(self):
        hist = np.array([3, 8, 1, 5])
        ctx, labels = draw_labels(hist, 4, "sampled", 10, np.random.default_rng(0), False)
        assert sorted(labels) == [1, 3, 5, 8]
        _, again = draw_labels(hist, 4, "sampled", 10, np.random.default_rng(0), False)
        assert labels == again

    def test_heldout_disjoint(self):
        hist = np.arange(10)
        for s in range(10):
            ctx, labels = draw_labels(hist, 4, "heldout", 10, np.random.default_rng(s), False)
            assert not set(ctx) & set(labels) and 1 <= len(labels) <= 4

    def test_ordered_context_is_most_recent(self):
        ctx, _ = draw_labels(np.array([9, 4, 7, 2]), 2, "sampled", 2, np.random.default_rng(0), True)
        assert ctx == [7, 2]


def toy_model(seed=0, d_model=32):
    vocab = build_vocab(TOY_DESCS + [ITEM_HEADER, USER_HEADER])
    rng = np.random.default_rng(seed)
    emb = GraphEmbeddings(rng.normal(size=(3, 8)), rng.normal(size=(6, 8)), 2).freeze()
    lm = TinyLM(len(vocab), LMConfig(d_model=d_model, depth=2, heads=4, max_len=64, seed=seed))
    return GltaModel.create(emb, lm, vocab, np.random.default_rng(seed + 1))


def snapshot(model):
    out = {k: v.data.copy() for k, v in model.trainable().items()}
    out.update({f"lm.{k}": v.data.copy() for k, v in model.lm.weights.items()})
    out["E_u"], out["E_i"] = model.graph_emb.E_u.copy(), model.graph_emb.E_i.copy()
    return out


@pytest.fixture(scope="module")
def trained():
    model = toy_model()
    before = snapshot(model)
    cfg = AlignConfig(lr=0.03, stage2_epochs=300, item_batch=6, batch_size=4)
    state = train_stage2(model, TOY_DESCS, cfg, np.random.default_rng(2))
    return model, before, state


class TestStage2:
    def test_toy_accuracy_100(self, trained):
        model, _, _ = trained
        desc = description_ids(model.vocab, TOY_DESCS, 16)
        for s in range(20):
            seqs = build_item_text_template(list(range(6)), desc, model.vocab, 64, np.random.default_rng(100 + s))
            with nd.no_grad():
                h = lm_forward_batch(model.lm, seqs, model.sources()).data
            for b, seq in enumerate(seqs):
                for pos, y in seq.supervision:
                    z = compute_item_logits(nd.Tensor(h[b, pos][None]), model.head).data[0]
                    assert int(np.argmax(z)) == y

    def test_initial_loss_and_decrease(self, trained):
        _, _, state = trained
        assert abs(state.initial_loss - math.log(6)) <= 0.01 * math.log(6)
        assert state.losses[-1] < state.initial_loss
        assert all(np.isfinite(state.losses))

    def test_stage_isolation(self, trained):
        model, before, _ = trained
        after = snapshot(model)
        changed = {k for k in before if not np.array_equal(before[k], after[k])}
        assert changed == {"item_proj.W", "item_proj.b", "head.W", "head.b"}

    def test_backbone_checksum_unchanged(self, trained):
        model, _, _ = trained
        # the frozen backbone still equals a fresh build from the same seed
        assert model.lm.checksum() == TinyLM(len(model.vocab), model.lm.config).checksum()

    def test_missing_description_skipped(self, caplog):
        model = toy_model()
        descs = list(TOY_DESCS)
        descs[2] = "!!!"
        ids = description_ids(model.vocab, descs, 16)
        assert 2 not in ids and "item 2" in caplog.text


@pytest.fixture(scope="module")
def planted():
    g, cat = generate_synthetic(SyntheticConfig(seed=0))
    split = split_dataset(g, 0.8, 0)
    emb = bpr_pretrain(split.train, GraphConfig(d=16, lr=0.01, epochs=50, seed=0))
    vocab = build_vocab(cat.descriptions + [ITEM_HEADER, USER_HEADER])
    lm = TinyLM(len(vocab), LMConfig(d_model=32, depth=2, heads=4, max_len=96, seed=0))
    model = GltaModel.create(emb, lm, vocab, np.random.default_rng(0))
    ctx = UserContext.build(split.train, vocab, {u: "" for u in range(40)}, {}, 4)
    return model, ctx, split, cat


class TestStage3:
    def test_loss_drops_and_isolation(self, planted):
        model, ctx, split, _ = planted
        before = snapshot(model)
        cfg = AlignConfig(lr=0.01, stage3_epochs=8, k=5, context_cap=5)
        state = train_stage3(model, ctx, cfg, np.random.default_rng(0))
        assert state.losses[-1] < state.initial_loss
        after = snapshot(model)
        changed = {k for k in before if not np.array_equal(before[k], after[k])}
        assert changed == {"user_proj.W", "user_proj.b", "head.W", "head.b"}

    def test_unfrozen_item_projector(self, planted):
        model, _, _, _ = planted
        assert "item_proj.W" in stage3_params(model, AlignConfig(freeze_item_projector=False))
        assert "item_proj.W" in stage3_params(model, AlignConfig(), joint_items=True)
        assert "item_proj.W" not in stage3_params(model, AlignConfig())

    def test_user_id_variant(self, planted):
        model, ctx, _, _ = planted
        m2 = GltaModel.create(model.graph_emb, model.lm, model.vocab, np.random.default_rng(5), user_id_tokens=True)
        assert template_flags(m2).user_token == USER_ID
        names = stage3_params(m2, AlignConfig())
        assert "user_id.emb" in names and "user_proj.W" not in names
        state = train_stage3(m2, ctx, AlignConfig(lr=0.01, stage3_epochs=2, k=5), np.random.default_rng(0))
        assert len(state.losses) == 2

    @pytest.mark.parametrize("mode", ["firstk", "fl", "ar"])
    def test_rankers_valid(self, planted, mode):
        model, ctx, split, _ = planted
        report = evaluate(model_ranker(model, ctx, AlignConfig(k=10), mode), split, (5, 10), mode)
        assert report.users_evaluated == len(split.test_users)
        for u, r in report.rankings.items():
            assert len(r) == 10


@pytest.mark.parametrize("seed", range(5))
def test_composed_pipeline_gradient(seed):
    """Projector -> frozen transformer -> GLLM head -> loss, against finite differences."""
    with nd.float64_mode():
        vocab = build_vocab(TOY_DESCS + [USER_HEADER])
        lm = TinyLM(len(vocab), LMConfig(d_model=8, depth=2, heads=2, max_len=48, seed=seed))
        rng = np.random.default_rng(seed)
        E_u, E_i = rng.normal(size=(2, 3)), rng.normal(size=(6, 3))
        seq = build_user_item_template(1, [0, 4], [9], [10], 3, vocab, 48, [2, 5, 0])

        def loss(Wu, bu, Wi, bi, Hw, Hb):
            model = GltaModel(GraphEmbeddings(E_u, E_i, 1), lm, vocab, Projector(Wi, bi, "item"),
                              Projector(Wu, bu, "user"), GllmHead(Hw, Hb))
            h = lm_forward(lm, seq, model.sources())
            Z = compute_item_logits(nd.gather_rows(h, answer_positions(seq, 3)), model.head)
            return gllm_loss(Z, [(t, y) for t, (_, y) in enumerate(seq.supervision)], 3)

        args = [rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=(3, 8)), rng.normal(size=8),
                rng.normal(size=(8, 6)) * 0.5, rng.normal(size=6)]
        assert check(loss, *args) < 1e-4


def test_sequence_loss_matches_gllm_loss():
    model = toy_model(3, 16)
    seq = build_user_item_template(0, [1], [], [], 3, model.vocab, 64, [2, 5, 0])
    a = sequence_loss(model, [seq]).item()
    h = lm_forward(model.lm, seq, model.sources())
    Z = compute_item_logits(nd.gather_rows(h, answer_positions(seq, 3)), model.head)
    b = gllm_loss(Z, [(0, 2), (1, 5), (2, 0)], 3).item()
    nd.active_tape().clear()
    assert a == pytest.approx(b, rel=1e-6)
