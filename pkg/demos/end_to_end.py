# coding: utf-8
# # Three training stages, evaluation and ablations
#
# Stage 1 pretrains graph embeddings and a tiny frozen LM, stage 2 aligns item
# embeddings with their descriptions, stage 3 teaches the LM to emit item
# answer slots for a user. Every stage writes a checkpoint that the next reads.

import json
import sys
import tempfile
from pathlib import Path

from glta import pipeline
from glta.config import load_config

overrides = {
    "data.synthetic": "true",
    "graph.d": "32", "graph.epochs": "50", "graph.lr": "0.01",
    "lm.d_model": "64", "lm.depth": "2", "lm.heads": "4",
    "align.k": "10", "align.lr": "0.01", "align.stage2_epochs": "20", "align.stage3_epochs": "40",
}
cfg = load_config(overrides=overrides)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="glta-"))
print("working in", work)

# %% the three stages
pipeline.cmd_pretrain(cfg, work / "stage1.ckpt", force=True)
pipeline.cmd_align_items(cfg, work / "stage1.ckpt", work / "stage2.ckpt", force=True)
pipeline.cmd_align_users(cfg, work / "stage2.ckpt", work / "stage3.ckpt", force=True)
print("stage-3 log tail:", (work / "stage3.ckpt.log.jsonl").read_text().splitlines()[-1])

# frozen weights never move
print({s: pipeline.frozen_digest(work / f"{s}.ckpt")[:12] for s in ("stage1", "stage2", "stage3")})

# %% every inference mode plus the graph-only baseline
for rep in pipeline.cmd_evaluate(cfg, work / "stage3.ckpt", pipeline.INFERENCE_MODES, baseline=True):
    print(json.dumps(rep.to_dict(), sort_keys=True))

# %% ablations: one table, a checkpoint per variant
rows = pipeline.cmd_ablate(cfg, work / "ablation", force=True)
print(pipeline.format_table(rows))
