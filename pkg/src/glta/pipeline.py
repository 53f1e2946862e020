"""The three training stages, evaluation and ablations as resumable commands.

Each stage reads the previous stage's checkpoint and writes its own; every
checkpoint is self-contained (frozen weights, vocabulary, trainables, Adam
state, generator state, config snapshot).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .alignment import (ITEM_HEADER, USER_HEADER, GltaModel, Projector, StageState, UserContext,
                        model_ranker, stage3_params, template_flags, train_stage2, train_stage3)
from .checkpoint import Checkpoint, StageError, array_digest, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SyntheticConfig, dataset_stats, generate_synthetic, load_dataset
from .gllm import GllmHead
from .graph import GraphConfig, GraphEmbeddings, bpr_pretrain
from .llm_client import TextCache, UserTextAssets, generate_user_assets
from .metrics import EvalSplit, MetricReport, dot_product_ranker, evaluate, split_dataset
from .text_lm import LMConfig, TinyLM, Vocabulary, build_vocab, pretrain_next_token

log = logging.getLogger(__name__)

STAGE1, STAGE2, STAGE2_SKIP, STAGE3 = "stage1", "stage2", "stage2-skip", "stage3"
INFERENCE_MODES = ("firstk", "fl", "ar")

VARIANTS = {
    "full": {},
    "w/o IA": {"no_item_align": True},
    "w/o UA": {"no_user_align": True},
    "w/o PF": {"no_profile": True},
    "w/o PD": {"no_prediction": True},
}


# ---------------------------------------------------------------- data access

def load_data(cfg: RunConfig):
    d = cfg.data
    if d.synthetic:
        return generate_synthetic(SyntheticConfig(
            users=d.syn_users, items=d.syn_items, clusters=d.syn_clusters,
            in_cluster_p=d.syn_in_cluster_p, noise_p=d.syn_noise_p,
            vocab_per_cluster=d.syn_vocab_per_cluster, words_per_item=d.syn_words_per_item,
            seed=cfg.seed))
    if not d.interactions or not d.items:
        raise ValueError("set data.interactions and data.items, or data.synthetic = true")
    return load_dataset(d.interactions, d.items)


@dataclass
class Dataset:
    catalog: object
    split: EvalSplit


def prepare(cfg: RunConfig) -> Dataset:
    graph, catalog = load_data(cfg)
    return Dataset(catalog, split_dataset(graph, cfg.eval.ratio, cfg.seed))


def _rng(cfg: RunConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage])


# ------------------------------------------------------- checkpoint <-> model

def _frozen_arrays(emb: GraphEmbeddings, lm: TinyLM) -> dict[str, np.ndarray]:
    arrays = {"graph.E_u": emb.E_u, "graph.E_i": emb.E_i}
    arrays.update(lm.named_arrays())
    return arrays


FROZEN_PREFIXES = ("graph.", "lm.")


def frozen_names(ckpt: Checkpoint) -> list[str]:
    return [n for n in ckpt.arrays if n.startswith(FROZEN_PREFIXES)]


def _restore_frozen(ckpt: Checkpoint) -> tuple[GraphEmbeddings, TinyLM, Vocabulary]:
    a = ckpt.arrays
    emb = GraphEmbeddings(a["graph.E_u"], a["graph.E_i"], ckpt.meta["graph_layers"]).freeze()
    lm_cfg = LMConfig(**ckpt.meta["lm_config"])
    vocab = Vocabulary(ckpt.meta["vocab"])
    lm = TinyLM(len(vocab), lm_cfg, {k[3:]: v for k, v in a.items() if k.startswith("lm.")})
    return emb, lm, vocab


def _model_arrays(model: GltaModel) -> dict[str, np.ndarray]:
    arrays = _frozen_arrays(model.graph_emb, model.lm)
    arrays.update({k: v.data for k, v in model.trainable().items()})
    return arrays


def _restore_model(ckpt: Checkpoint) -> GltaModel:
    emb, lm, vocab = _restore_frozen(ckpt)
    a = ckpt.arrays

    def t(name):
        return nd.Tensor(a[name], name=name)

    model = GltaModel(emb, lm, vocab,
                      Projector(t("item_proj.W"), t("item_proj.b"), "item"),
                      Projector(t("user_proj.W"), t("user_proj.b"), "user"),
                      GllmHead(t("head.W"), t("head.b")),
                      t("user_id.emb") if "user_id.emb" in a else None)
    return model


def _adam_arrays(names: Sequence[str], state: nd.AdamState) -> dict[str, np.ndarray]:
    out = {}
    for n, m, v in zip(names, state.m, state.v):
        out[f"adam.m.{n}"] = m
        out[f"adam.v.{n}"] = v
    return out


def _stage_meta(state: StageState, names: Sequence[str]) -> dict:
    return {"epochs_done": state.epochs_done, "losses": state.losses, "initial_loss": state.initial_loss,
            "adam": {"t": state.adam.t, "lr": state.adam.lr, "beta1": state.adam.beta1,
                     "beta2": state.adam.beta2, "eps": state.adam.eps, "params": list(names)},
            "rng_state": state.rng.bit_generator.state}


def _restore_stage_state(ckpt: Checkpoint, key: str) -> StageState:
    meta = ckpt.meta[key]
    ad = meta["adam"]
    adam = nd.AdamState(ad["lr"], ad["beta1"], ad["beta2"], ad["eps"], ad["t"],
                        [ckpt.arrays[f"adam.m.{n}"].copy() for n in ad["params"]],
                        [ckpt.arrays[f"adam.v.{n}"].copy() for n in ad["params"]])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return StageState(adam, rng, meta["epochs_done"], list(meta["losses"]), meta["initial_loss"])


class _EpochLog:
    def __init__(self, path: Path | None, append: bool):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                path.write_text("")

    def __call__(self, epoch: int, loss: float, wall_ms: float) -> None:
        log.info("epoch %d loss %.6f (%.0f ms)", epoch, loss, wall_ms)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"epoch": epoch, "loss": loss, "wall_ms": round(wall_ms, 3)}) + "\n")


def training_log_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".log.jsonl")


# ------------------------------------------------------------------- commands

def cmd_pretrain(cfg: RunConfig, out, force: bool = False) -> Checkpoint:
    """Stage 1: BPR-trained LightGCN embeddings plus the frozen language model."""
    if Path(out).exists() and not force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    ds = prepare(cfg)
    rng = _rng(cfg, 1)
    graph_seed, lm_seed = (int(x) for x in rng.integers(0, 2**31 - 1, size=2))
    gcfg = GraphConfig(**{**vars(cfg.graph), "seed": graph_seed})
    emb = bpr_pretrain(ds.split.train, gcfg)
    corpus = list(ds.catalog.descriptions) + [ITEM_HEADER, USER_HEADER]
    vocab = build_vocab(corpus, cfg.lm.vocab_size)
    lm_cfg = LMConfig(cfg.lm.d_model, cfg.lm.depth, cfg.lm.heads, cfg.lm.max_len, lm_seed)
    lm = TinyLM(len(vocab), lm_cfg)
    lm_losses = []
    if cfg.lm.pretrain:
        lm_losses = pretrain_next_token(lm, vocab, ds.catalog.descriptions, cfg.lm.pretrain_epochs,
                                        cfg.lm.pretrain_lr, lm_seed)
    meta = {"seed": cfg.seed, "vocab": vocab.tokens, "graph_layers": gcfg.layers,
            "lm_config": vars(lm_cfg), "graph_losses": emb.losses, "lm_losses": lm_losses,
            "graph_warnings": emb.warnings, "dataset": dataset_stats(ds.split.train),
            "excluded_users": ds.split.excluded_users}
    ckpt = Checkpoint(STAGE1, _frozen_arrays(emb, lm), cfg.to_dict(), meta)
    save_checkpoint(out, ckpt, force=force)
    return ckpt


def cmd_align_items(cfg: RunConfig, stage1_path, out, force: bool = False, resume=None) -> Checkpoint:
    """Stage 2: item-text alignment, or a skip marker under the w/o IA ablation."""
    if Path(out).exists() and not force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    if resume is not None:
        prev = load_checkpoint(resume, STAGE2)
        model = _restore_model(prev)
        state = _restore_stage_state(prev, "stage2")
        meta = dict(prev.meta)
    else:
        prev = load_checkpoint(stage1_path, STAGE1)
        emb, lm, vocab = _restore_frozen(prev)
        rng = _rng(cfg, 2)
        model = GltaModel.create(emb, lm, vocab, rng)
        state = StageState(nd.AdamState(lr=cfg.align.lr), rng)
        meta = {k: prev.meta[k] for k in ("seed", "vocab", "graph_layers", "lm_config")}
    if cfg.ablation.no_item_align:
        meta["stage2"] = None
        ckpt = Checkpoint(STAGE2_SKIP, _model_arrays(model), cfg.to_dict(), meta)
        save_checkpoint(out, ckpt, force=force)
        return ckpt
    ds = prepare(cfg)
    on_epoch = _EpochLog(training_log_path(out), append=resume is not None)
    train_stage2(model, ds.catalog.descriptions, cfg.align, state.rng, state, on_epoch)
    names = ("item_proj.W", "item_proj.b", "head.W", "head.b")
    arrays = _model_arrays(model)
    arrays.update(_adam_arrays(names, state.adam))
    meta["stage2"] = _stage_meta(state, names)
    ckpt = Checkpoint(STAGE2, arrays, cfg.to_dict(), meta)
    save_checkpoint(out, ckpt, force=force)
    return ckpt


def user_texts(cfg: RunConfig, ds: Dataset) -> dict[int, UserTextAssets]:
    """Profile/prediction text per user, from the cache when configured."""
    train = ds.split.train
    desc = ds.catalog.descriptions
    histories = {u: [desc[i] for i in train.user_history(u)]
                 for u in range(train.num_users) if len(train.user_items(u))}
    cache = TextCache(cfg.gen.cache) if cfg.gen.cache else None
    return generate_user_assets(histories, cfg.gen, cache)


def user_context(cfg: RunConfig, ds: Dataset, vocab: Vocabulary) -> UserContext:
    assets = user_texts(cfg, ds)
    return UserContext.build(ds.split.train, vocab,
                             {u: a.profile_text for u, a in assets.items()},
                             {u: a.prediction_text for u, a in assets.items()},
                             cfg.align.text_max_tokens)


def cmd_align_users(cfg: RunConfig, stage2_path, out, force: bool = False, resume=None) -> Checkpoint:
    """Stage 3: user-item alignment trained through the GLLM loss."""
    if Path(out).exists() and not force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    ab = cfg.ablation
    if resume is not None:
        prev = load_checkpoint(resume, STAGE3)
        model = _restore_model(prev)
        state = _restore_stage_state(prev, "stage3")
    else:
        allowed = (STAGE2, STAGE2_SKIP) if ab.no_item_align else (STAGE2,)
        try:
            prev = load_checkpoint(stage2_path, allowed)
        except StageError as exc:
            raise StageError(f"user-item alignment needs a stage-2 checkpoint: {exc}") from None
        model = _restore_model(prev)
        rng = _rng(cfg, 3)
        if ab.no_user_align:
            model.user_ids = nd.Tensor(rng.normal(0.0, 1.0, size=(model.graph_emb.E_u.shape[0], model.lm.d_model)),
                                       name="user_id.emb")
        state = StageState(nd.AdamState(lr=cfg.align.lr), rng)
    ds = prepare(cfg)
    ctx = user_context(cfg, ds, model.vocab)
    flags = template_flags(model, ab.no_profile, ab.no_prediction)
    on_epoch = _EpochLog(training_log_path(out), append=resume is not None)
    train_stage3(model, ctx, cfg.align, state.rng, state, flags, ab.no_item_align, on_epoch)
    names = stage3_params(model, cfg.align, ab.no_item_align)
    arrays = _model_arrays(model)
    arrays.update(_adam_arrays(names, state.adam))
    meta = {k: prev.meta[k] for k in ("seed", "vocab", "graph_layers", "lm_config")}
    meta["stage2"] = prev.meta.get("stage2")
    meta["stage3"] = _stage_meta(state, names)
    ckpt = Checkpoint(STAGE3, arrays, cfg.to_dict(), meta)
    save_checkpoint(out, ckpt, force=force)
    return ckpt


def cmd_gen_profiles(cfg: RunConfig, cache_path=None) -> dict[int, UserTextAssets]:
    """Generate (or reuse) profile and prediction text and store it in the cache file."""
    if cache_path:
        cfg = cfg.copy()
        cfg.gen.cache = str(cache_path)
    if not cfg.gen.cache:
        raise ValueError("gen-profiles needs gen.cache (or --out)")
    return user_texts(cfg, prepare(cfg))


def cmd_evaluate(cfg: RunConfig, stage3_path, modes: Sequence[str] | None = None,
                 baseline: bool = False) -> list[MetricReport]:
    """Metric reports for the requested inference modes (and the dot-product baseline)."""
    ckpt = load_checkpoint(stage3_path, STAGE3)
    model = _restore_model(ckpt)
    ds = prepare(cfg)
    ctx = user_context(cfg, ds, model.vocab)
    ab = cfg.ablation
    flags = template_flags(model, ab.no_profile, ab.no_prediction)
    reports = []
    for mode in modes or (cfg.eval.mode,):
        ranker = model_ranker(model, ctx, cfg.align, mode, flags, cfg.seed)
        reports.append(evaluate(ranker, ds.split, cfg.eval.cutoffs, mode))
    if baseline:
        reports.append(evaluate(dot_product_ranker(model.graph_emb.E_u, model.graph_emb.E_i),
                                ds.split, cfg.eval.cutoffs, "dot-baseline"))
    return reports


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    v = cfg.copy()
    for key, value in VARIANTS[variant].items():
        setattr(v.ablation, key, value)
    return v


def _slug(variant: str) -> str:
    return variant.replace("/", "").replace(" ", "_").lower()


def cmd_ablate(cfg: RunConfig, workdir, force: bool = False,
               variants: Sequence[str] = tuple(VARIANTS), modes: Sequence[str] = INFERENCE_MODES) -> list[dict]:
    """Train each ablation variant and evaluate it under every inference mode.

    Variants that keep item-text alignment share one stage-2 checkpoint.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    s1 = work / "stage1.ckpt"
    if force or not s1.exists():
        cmd_pretrain(cfg, s1, force=True)
    rows = []
    shared_s2 = work / "stage2.ckpt"
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        if vcfg.ablation.no_item_align:
            s2 = work / f"stage2_{_slug(variant)}.ckpt"
            cmd_align_items(vcfg, s1, s2, force=True)
        else:
            s2 = shared_s2
            if force or not s2.exists():
                cmd_align_items(vcfg, s1, s2, force=True)
        s3 = work / f"stage3_{_slug(variant)}.ckpt"
        cmd_align_users(vcfg, s2, s3, force=True)
        for report in cmd_evaluate(vcfg, s3, modes):
            rows.append({"variant": variant, "mode": report.mode, "checkpoint": str(s3),
                         "users_evaluated": report.users_evaluated, "metrics": report.metrics})
    (work / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    (work / "ablation.txt").write_text(format_table(rows))
    return rows


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0]["metrics"])
    head = f"{'variant':<8} {'mode':<7} " + " ".join(f"{k:>7}" for k in keys)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['variant']:<8} {r['mode']:<7} " + " ".join(f"{r['metrics'][k]:>7.4f}" for k in keys))
    return "\n".join(lines) + "\n"


def frozen_digest(path) -> str:
    ckpt = load_checkpoint(path)
    return array_digest(ckpt.arrays, frozen_names(ckpt))
