"""HTTP implementations of the external ports (summarizer, embedder, generator, judge).

Every port speaks line-delimited JSON over POST and shares one retry policy:
transient transport failures are retried with exponential backoff, anything
else propagates. Endpoint credentials come from the ``RECEXPLAIN_API_KEY``
environment variable only; they never appear in config files.
"""
from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

API_KEY_ENV = "RECEXPLAIN_API_KEY"


class TransportError(RuntimeError):
    """Retryable failure while talking to an external endpoint."""


def call_with_retries(
    fn: Callable[[], Any],
    *,
    retries: int = 3,
    backoff: float = 0.5,
) -> Any:
    """Run ``fn``, retrying TransportError up to ``retries`` times.

    Sleeps backoff * 2**attempt between attempts; the final failure is
    re-raised unchanged.
    """
    attempt = 0
    while True:
        try:
            return fn()
        except TransportError:
            if attempt >= retries:
                raise
            if backoff > 0:
                time.sleep(backoff * (2.0**attempt))
            attempt += 1


def post_json(url: str, payload: dict, *, timeout: float = 60.0) -> dict:
    """POST a JSON body and decode the JSON response.

    Network errors and 5xx responses raise TransportError (retryable);
    non-JSON responses raise TransportError as well since the endpoint is
    misbehaving rather than rejecting the request.
    """
    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    request = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            raw = response.read()
    except urllib.error.HTTPError as exc:
        if exc.code >= 500:
            raise TransportError(f"{url}: server error {exc.code}") from exc
        raise RuntimeError(f"{url}: request rejected with status {exc.code}") from exc
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
        raise TransportError(f"{url}: {exc}") from exc
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TransportError(f"{url}: non-JSON response") from exc


@dataclass
class HttpSummarizer:
    """Summarizer endpoint: {"instruction", "inputs", "model", "temperature"} -> {"summary"}."""

    base_url: str
    model: str = ""
    temperature: float = 0.0
    budget: int = 16000
    timeout: float = 120.0
    identity: str = field(default="", repr=False)

    def __post_init__(self) -> None:
        if not self.identity:
            self.identity = f"http:{self.base_url}:{self.model}"

    def summarize(self, instruction: str, texts: Sequence[str]) -> str:
        payload = {
            "instruction": instruction,
            "inputs": list(texts),
            "model": self.model,
            "temperature": self.temperature,
        }
        response = post_json(self.base_url, payload, timeout=self.timeout)
        summary = response.get("summary")
        if not isinstance(summary, str):
            raise TransportError(f"{self.base_url}: response missing 'summary'")
        return summary


@dataclass
class HttpEmbedder:
    """Embedding endpoint: {"inputs": [...]} -> {"vectors": [[...], ...]}."""

    base_url: str
    timeout: float = 120.0
    identity: str = field(default="", repr=False)

    def __post_init__(self) -> None:
        if not self.identity:
            self.identity = f"http:{self.base_url}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        response = post_json(self.base_url, {"inputs": list(texts)}, timeout=self.timeout)
        vectors = response.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise TransportError(f"{self.base_url}: response missing 'vectors'")
        return np.asarray(vectors, dtype=np.float64)


@dataclass
class HttpGenerator:
    """Generation endpoint; the prompt's embedding sidecar travels with the request."""

    base_url: str
    model: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 128
    timeout: float = 300.0

    def generate(self, bundle: Any) -> str:
        payload = {
            "prompt": bundle.text,
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
            "sidecar": {
                marker: [float(x) for x in vector]
                for marker, vector in bundle.sidecar.items()
            },
        }
        response = post_json(self.base_url, payload, timeout=self.timeout)
        text = response.get("text")
        if not isinstance(text, str):
            raise TransportError(f"{self.base_url}: response missing 'text'")
        return text


@dataclass
class HttpJudge:
    """LLM-as-judge endpoint returning a quality score in [0, 100]."""

    base_url: str
    model: str = ""
    timeout: float = 120.0

    def score(self, instruction: str, reference: str, candidate: str) -> float:
        payload = {
            "instruction": instruction,
            "reference": reference,
            "candidate": candidate,
            "model": self.model,
        }
        response = post_json(self.base_url, payload, timeout=self.timeout)
        value = response.get("score")
        if not isinstance(value, (int, float)):
            raise TransportError(f"{self.base_url}: response missing 'score'")
        return float(value)
