# coding: utf-8
# # User profiles and predictions without a network
#
# The offline generator summarises a history with term frequencies; the
# prediction variant weights recent items more. Results go to a JSONL cache
# keyed by user and template, so a second pass does no work.

import tempfile
from pathlib import Path

from glta.llm_client import (GenerationConfig, TextCache, generate_user_assets, offline_prediction,
                             offline_profile)

history = [
    "quiet drama about a small fishing town",
    "documentary on deep sea fishing fleets",
    "space opera with a rogue pilot",
]
print("profile:   ", offline_profile(history, n_terms=5))
print("prediction:", offline_prediction(history, n_terms=5, recency_weight=2.0))

# %% batch generation with a cache
histories = {0: history, 1: history[::-1], 2: []}
with tempfile.TemporaryDirectory() as tmp:
    cache = TextCache(Path(tmp) / "texts.jsonl")
    cfg = GenerationConfig(mode="offline", n_terms=5)
    first = generate_user_assets(histories, cfg, cache)
    second = generate_user_assets(histories, cfg, cache)
    for u in histories:
        print(u, first[u].provenance, "->", second[u].provenance, "|", second[u].profile_text)

# An external OpenAI-style endpoint is used with GenerationConfig(mode="external",
# endpoint=...); the key comes from the GLTA_LLM_API_KEY environment variable.
