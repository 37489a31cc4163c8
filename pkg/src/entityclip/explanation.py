"""Explanation text for queries: prompt template, generator clients and an on-disk cache."""

import hashlib
import json
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

PROMPT_TEMPLATE = (
    "I have an image: [T]. Describe the image content matching this description in detail, "
    "your answer should include more appearance description of the mentioned person, object, "
    "place or occasion."
)
_STUB_SUFFIX = "shown with its characteristic appearance, clothing, colours and setting."
_STOPWORDS = frozenset("a an and at by for from in into of on or the to with".split())


class GeneratorError(RuntimeError):
    """The text generator could not be reached or returned an unusable reply."""


class GeneratorClient(Protocol):
    generator_id: str

    def complete(self, prompt: str) -> str: ...


@dataclass
class ExplanationRecord:
    query_text: str
    prompt: str
    explanation: str
    generator_id: str
    created_at: str

    def __post_init__(self):
        if not self.explanation:
            raise ValueError("explanation must be non-empty")


def build_prompt(query_text):
    if not query_text:
        raise ValueError("query text must be non-empty")
    head, tail = PROMPT_TEMPLATE.split("[T]")
    return head + query_text + tail


def stub_explain(query_text):
    """Deterministic offline explanation: the query's content words plus a fixed appearance clause."""
    words = [w for w in query_text.split() if w.lower() not in _STOPWORDS]
    subject = " ".join(words) if words else (query_text.strip() or "the scene")
    return f"{subject}, {_STUB_SUFFIX}"


class StubClient:
    """Offline generator. Returns ``fixed_output`` if given, else ``stub_explain`` of the query."""

    generator_id = "stub"

    def __init__(self, fixed_output=None):
        self.fixed_output = fixed_output
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        if self.fixed_output is not None:
            return self.fixed_output
        head, tail = PROMPT_TEMPLATE.split("[T]")
        return stub_explain(prompt[len(head) : len(prompt) - len(tail)])


class HttpClient:
    """Minimal client for a completion endpoint.

    POSTs ``{"model": ..., "prompt": ...}`` and accepts either ``{"text": ...}``
    or an OpenAI-style ``{"choices": [{"text": ...}]}`` reply. Sampling
    parameters are passed through ``params``.
    """

    def __init__(self, url, model="mistral-7b", timeout=60.0, params=None, session=None):
        import requests

        self.url = url
        self.model = model
        self.timeout = timeout
        self.params = dict(params or {})
        self.session = session or requests.Session()
        self.generator_id = f"http:{model}"

    def complete(self, prompt):
        import requests

        payload = {"model": self.model, "prompt": prompt, **self.params}
        try:
            resp = self.session.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise GeneratorError(f"generation request to {self.url} failed: {exc}") from exc
        text = body.get("text")
        if text is None and body.get("choices"):
            text = body["choices"][0].get("text")
        if not text or not text.strip():
            raise GeneratorError("generator returned an empty explanation")
        return text.strip()


def _key(query_text, generator_id):
    return hashlib.sha256(query_text.encode("utf-8")).hexdigest(), generator_id


class ExplanationCache:
    """Append-only JSON-lines cache keyed by (sha256 of query, generator id); earliest entry wins."""

    def __init__(self, path):
        self.path = Path(path)
        if self.path.is_dir() or not self.path.suffix:
            self.path = self.path / "explanations.jsonl"
        self._lock = threading.Lock()
        self._records = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = ExplanationRecord(**json.loads(line))
                        self._records.setdefault(_key(rec.query_text, rec.generator_id), rec)

    def get(self, query_text, generator_id):
        return self._records.get(_key(query_text, generator_id))

    def lookup_any(self, query_text):
        """First cached record for ``query_text`` from any generator."""
        digest = _key(query_text, "")[0]
        for (h, _), rec in self._records.items():
            if h == digest:
                return rec
        return None

    def put(self, record):
        key = _key(record.query_text, record.generator_id)
        with self._lock:
            if key in self._records:
                return self._records[key]
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record), ensure_ascii=False) + "\n")
            self._records[key] = record
            return record

    def __len__(self):
        return len(self._records)


def generate_explanation(query_text, client, cache):
    """Cached explanation for ``query_text``; the client is only called on a cache miss."""
    if not isinstance(cache, ExplanationCache):
        cache = ExplanationCache(cache)
    hit = cache.get(query_text, client.generator_id)
    if hit is not None:
        return hit
    prompt = build_prompt(query_text)
    text = client.complete(prompt)
    record = ExplanationRecord(
        query_text=query_text,
        prompt=prompt,
        explanation=text,
        generator_id=client.generator_id,
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    return cache.put(record)
