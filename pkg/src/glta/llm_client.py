"""Profile and prediction text for users, from a chat-completion service or offline.

The offline summarizer is a deterministic term-frequency ranking over the
descriptions of a user's interacted items. The external path posts an
OpenAI-compatible chat-completion request.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

from .text_lm import tokenize

log = logging.getLogger(__name__)

DEFAULT_TOKEN = "unknown-preferences"
API_KEY_ENV = "GLTA_LLM_API_KEY"

STOPWORDS = frozenset("""
a about above after again against all am an and any are as at be because been before being below
between both but by can could did do does doing down during each few for from further had has have
having he her here hers herself him himself his how i if in into is it its itself just me more most
my myself no nor not now of off on once only or other our ours ourselves out over own same she
should so some such than that the their theirs them themselves then there these they this those
through to too under until up very was we were what when where which while who whom why will with
you your yours yourself yourselves s t don isn wasn
""".split())

PROFILE_TEMPLATE = (
    "Here are descriptions of items a user interacted with:\n{history}\n"
    "Summarize this user's profile in a few keywords describing their interests."
)
PREDICTION_TEMPLATE = (
    "Here are descriptions of items a user interacted with, most recent last:\n{history}\n"
    "User profile: {profile}\n"
    "Predict, in a few keywords, what kinds of items this user will want next."
)


class LLMClientError(RuntimeError):
    pass


class TransportError(LLMClientError):
    pass


class StatusError(LLMClientError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class AuthError(StatusError):
    pass


def _content_terms(text: str) -> list[str]:
    return [w for w in tokenize(text) if w not in STOPWORDS and len(w) > 1]


def _top_terms(weights: Counter, n: int) -> str:
    ranked = sorted(weights, key=lambda w: (-weights[w], w))
    return " ".join(ranked[:n])


def offline_profile(history: Sequence[str], n_terms: int = 8) -> str:
    if not history:
        return DEFAULT_TOKEN
    counts = Counter()
    for desc in history:
        counts.update(_content_terms(desc))
    return _top_terms(counts, n_terms) or DEFAULT_TOKEN


def offline_prediction(history: Sequence[str], n_terms: int = 8, recency_weight: float = 1.0) -> str:
    """Top terms with description j of m (oldest first) weighted 1 + r * j / (m - 1)."""
    if not history:
        return DEFAULT_TOKEN
    m = len(history)
    weights = Counter()
    for j, desc in enumerate(history):
        w = 1.0 + recency_weight * (j / (m - 1) if m > 1 else 0.0)
        for term in _content_terms(desc):
            weights[term] += w
    return _top_terms(weights, n_terms) or DEFAULT_TOKEN


def _format_history(history: Sequence[str]) -> str:
    return "\n".join(f"- {d}" for d in history)


def generate_profile(history: Sequence[str], mode: str = "offline", n_terms: int = 8,
                     client: "ChatClient | None" = None) -> str:
    if not history:
        return DEFAULT_TOKEN
    if mode == "offline":
        return offline_profile(history, n_terms)
    if mode == "external":
        if client is None:
            raise LLMClientError("external mode needs a ChatClient")
        return client.complete(PROFILE_TEMPLATE.format(history=_format_history(history))).strip() or DEFAULT_TOKEN
    raise ValueError(f"unknown generation mode {mode!r}")


def generate_prediction(history: Sequence[str], profile_text: str, mode: str = "offline",
                        n_terms: int = 8, recency_weight: float = 1.0,
                        client: "ChatClient | None" = None) -> str:
    if not history:
        return DEFAULT_TOKEN
    if mode == "offline":
        return offline_prediction(history, n_terms, recency_weight)
    if mode == "external":
        if client is None:
            raise LLMClientError("external mode needs a ChatClient")
        prompt = PREDICTION_TEMPLATE.format(history=_format_history(history), profile=profile_text)
        return client.complete(prompt).strip() or DEFAULT_TOKEN
    raise ValueError(f"unknown generation mode {mode!r}")


def chat_complete(endpoint: str, api_key: str, prompt: str, timeout: float = 30.0,
                  model: str = "gpt-3.5-turbo", attempts: int = 3, backoff: float = 0.5,
                  sleep: Callable[[float], None] = time.sleep, transport=None) -> str:
    """Single-turn chat completion with exponential backoff on 5xx, 429 and transport failures."""
    if not api_key:
        raise AuthError(401, "no API key provided")
    body = {"model": model, "messages": [{"role": "user", "content": prompt}]}
    headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
    last: LLMClientError | None = None
    with httpx.Client(timeout=timeout, transport=transport) as http:
        for attempt in range(attempts):
            if attempt:
                sleep(backoff * 2 ** (attempt - 1))
            try:
                resp = http.post(endpoint, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = TransportError(f"timeout after {timeout}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last = TransportError(str(exc))
                continue
            if resp.status_code in (401, 403):
                raise AuthError(resp.status_code, resp.text)
            if resp.status_code == 429 or resp.status_code >= 500:
                last = StatusError(resp.status_code, resp.text)
                continue
            if not 200 <= resp.status_code < 300:
                raise StatusError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise StatusError(resp.status_code, f"malformed response: {resp.text}") from None
    raise last


@dataclass
class ChatClient:
    endpoint: str
    model: str = "gpt-3.5-turbo"
    timeout: float = 30.0
    api_key: str | None = None

    def complete(self, prompt: str) -> str:
        key = self.api_key if self.api_key is not None else os.environ.get(API_KEY_ENV, "")
        return chat_complete(self.endpoint, key, prompt, self.timeout, self.model)


@dataclass
class UserTextAssets:
    user_id: int
    profile_text: str
    prediction_text: str
    provenance: str
    model_name: str | None = None


def template_hash(kind: str, mode: str, model_name: str | None = None, **params) -> str:
    """Identity of the generating setup; part of the cache key."""
    template = PROFILE_TEMPLATE if kind == "profile" else PREDICTION_TEMPLATE
    payload = json.dumps({"kind": kind, "mode": mode, "template": template,
                          "model": model_name if mode == "external" else None,
                          "params": params}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class TextCache:
    """Append-only JSON-lines cache keyed by (user_id, mode, template_hash)."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data: dict[tuple, str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[(int(rec["user_id"]), rec["mode"], rec["template_hash"])] = rec["text"]

    def __len__(self) -> int:
        return len(self._data)

    def get(self, user_id: int, mode: str, thash: str) -> str | None:
        return self._data.get((int(user_id), mode, thash))

    def put(self, user_id: int, mode: str, thash: str, text: str) -> None:
        key = (int(user_id), mode, thash)
        with self._lock:
            if key in self._data:
                return
            self._data[key] = text
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                rec = {"user_id": int(user_id), "mode": mode, "template_hash": thash, "text": text}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class GenerationConfig:
    mode: str = "offline"
    endpoint: str = ""
    model: str = "gpt-3.5-turbo"
    n_terms: int = 8
    recency_weight: float = 1.0
    timeout: float = 30.0
    max_in_flight: int = 4
    fallback_offline: bool = True


def generate_user_assets(histories: Mapping[int, Sequence[str]], config: GenerationConfig,
                         cache: TextCache | None = None, client: ChatClient | None = None
                         ) -> dict[int, UserTextAssets]:
    """Profile and prediction text for every user in ``histories``.

    Cached texts are reused as-is. External failures fall back to the offline
    summarizer when ``config.fallback_offline`` is set.
    """
    if config.mode == "external" and client is None:
        client = ChatClient(config.endpoint, config.model, config.timeout)
    params = {"n_terms": config.n_terms}
    h_prof = template_hash("profile", config.mode, config.model, **params)
    h_pred = template_hash("prediction", config.mode, config.model,
                           recency_weight=config.recency_weight, **params)

    def one(u: int) -> UserTextAssets:
        hist = list(histories[u])
        cached_prof = cache.get(u, config.mode, h_prof) if cache else None
        cached_pred = cache.get(u, config.mode, h_pred) if cache else None
        if cached_prof is not None and cached_pred is not None:
            return UserTextAssets(u, cached_prof, cached_pred, "cached",
                                  config.model if config.mode == "external" else None)
        mode = config.mode
        try:
            prof = cached_prof if cached_prof is not None else generate_profile(
                hist, mode, config.n_terms, client)
            pred = cached_pred if cached_pred is not None else generate_prediction(
                hist, prof, mode, config.n_terms, config.recency_weight, client)
        except LLMClientError as exc:
            if not (mode == "external" and config.fallback_offline):
                raise
            log.warning("user %d: external generation failed (%s); using offline summarizer", u, exc)
            prof = offline_profile(hist, config.n_terms)
            pred = offline_prediction(hist, config.n_terms, config.recency_weight)
            return UserTextAssets(u, prof, pred, "offline")
        if cache is not None:
            cache.put(u, mode, h_prof, prof)
            cache.put(u, mode, h_pred, pred)
        return UserTextAssets(u, prof, pred, mode, config.model if mode == "external" else None)

    users = sorted(histories)
    if config.mode == "external" and config.max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            results = list(pool.map(one, users))
    else:
        results = [one(u) for u in users]
    hits = sum(r.provenance == "cached" for r in results)
    if hits:
        log.info("reused %d cached user text assets", hits)
    return {r.user_id: r for r in results}
