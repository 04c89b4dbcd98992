"""Fine-grained anomaly vocabularies: LLM-backed with a bundled static fallback.

An LLM client is any object with a ``model`` attribute and a
``complete(prompt) -> str`` method. Responses are cached in memory and in a
content-addressed file store so repeated queries never hit the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import requests

log = logging.getLogger(__name__)

QUERY_TEMPLATE = "Based on your knowledge, what anomalies might occur on {class_name}?"

GENERIC_KEY = "_generic"


@dataclass(frozen=True)
class AnomalyVocabulary:
    class_name: str
    anomaly_types: tuple
    source: str  # "llm" | "static-fallback" | "user"

    def __post_init__(self):
        if not self.anomaly_types:
            raise ValueError("anomaly_types must be non-empty")


def _load_static_table() -> dict:
    with resources.files("promptad.data").joinpath("anomaly_vocabulary.json").open() as fh:
        return json.load(fh)


_STATIC_TABLE = None


def static_vocabulary(class_name: str) -> AnomalyVocabulary:
    global _STATIC_TABLE
    if _STATIC_TABLE is None:
        _STATIC_TABLE = _load_static_table()
    types = _STATIC_TABLE.get(class_name.lower(), _STATIC_TABLE[GENERIC_KEY])
    return AnomalyVocabulary(class_name, tuple(types), "static-fallback")


_ITEM_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])?\s*(.+?)\s*$")


def parse_anomaly_list(text: str) -> list:
    """Extract deduplicated, lowercase anomaly phrases from an LLM reply."""
    items = []
    seen = set()
    for line in text.splitlines():
        m = _ITEM_RE.match(line)
        if not m or not m.group(1):
            continue
        phrase = m.group(1).strip().strip(".").lower()
        # drop prose lines; anomaly types are short noun phrases
        if not phrase or len(phrase.split()) > 5:
            continue
        if phrase not in seen:
            seen.add(phrase)
            items.append(phrase)
    return items


class VocabularyCache:
    """(model, class_name)-keyed cache with an optional on-disk JSON store."""

    def __init__(self, cache_dir: str | Path | None = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: dict = {}

    def _path(self, model: str, class_name: str) -> Path:
        digest = hashlib.sha256(f"{model}\x00{class_name}".encode()).hexdigest()[:24]
        return self.cache_dir / f"vocab_{digest}.json"

    def get(self, model: str, class_name: str):
        key = (model, class_name)
        if key in self._memory:
            return self._memory[key]
        if self.cache_dir is not None:
            path = self._path(model, class_name)
            if path.exists():
                data = json.loads(path.read_text())
                vocab = AnomalyVocabulary(data["class_name"], tuple(data["anomaly_types"]),
                                          data["source"])
                self._memory[key] = vocab
                return vocab
        return None

    def put(self, model: str, class_name: str, vocab: AnomalyVocabulary):
        self._memory[(model, class_name)] = vocab
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            payload = {"class_name": vocab.class_name,
                       "anomaly_types": list(vocab.anomaly_types),
                       "source": vocab.source}
            self._path(model, class_name).write_text(json.dumps(payload, sort_keys=True))


_DEFAULT_CACHE = VocabularyCache()


def fetch_anomaly_vocabulary(class_name: str, llm_client=None,
                             cache: VocabularyCache | None = None) -> AnomalyVocabulary:
    """Query the LLM for anomaly types of ``class_name``; fall back to the static table."""
    if not class_name:
        raise ValueError("class_name must be non-empty")
    if llm_client is None:
        return static_vocabulary(class_name)
    cache = cache if cache is not None else _DEFAULT_CACHE
    model = getattr(llm_client, "model", "unknown")
    hit = cache.get(model, class_name)
    if hit is not None:
        return hit
    try:
        reply = llm_client.complete(QUERY_TEMPLATE.format(class_name=class_name))
        types = parse_anomaly_list(reply)
    except Exception as exc:  # network and provider errors degrade to the fallback
        log.warning("LLM query for %r failed (%s); using static fallback", class_name, exc)
        return static_vocabulary(class_name)
    if not types:
        log.warning("LLM reply for %r parsed to an empty list; using static fallback",
                    class_name)
        return static_vocabulary(class_name)
    vocab = AnomalyVocabulary(class_name, tuple(types), "llm")
    cache.put(model, class_name, vocab)
    return vocab


class HttpCompletionClient:
    """Minimal OpenAI-compatible chat completion client.

    Reads PROMPTAD_LLM_API_KEY, PROMPTAD_LLM_MODEL, and PROMPTAD_LLM_BASE_URL
    from the environment.
    """

    def __init__(self, model: str | None = None, base_url: str | None = None,
                 api_key: str | None = None, timeout: float = 30.0):
        self.model = model or os.environ.get("PROMPTAD_LLM_MODEL", "gpt-4o")
        self.base_url = (base_url or os.environ.get(
            "PROMPTAD_LLM_BASE_URL", "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key or os.environ.get("PROMPTAD_LLM_API_KEY")
        self.timeout = timeout
        if not self.api_key:
            raise ValueError("no API key: set PROMPTAD_LLM_API_KEY")

    def complete(self, prompt: str) -> str:
        resp = requests.post(
            f"{self.base_url}/chat/completions",
            headers={"Authorization": f"Bearer {self.api_key}"},
            json={"model": self.model,
                  "messages": [{"role": "user", "content": prompt}]},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]


def client_from_env():
    """Build an HTTP client when an API key is configured, else None."""
    if os.environ.get("PROMPTAD_LLM_API_KEY"):
        return HttpCompletionClient()
    return None
