"""Deterministic stand-ins for every external port.

These are not test-only conveniences: the pipeline's mock mode runs entirely
on them, which is what makes end-to-end runs byte-reproducible. Embedding
mocks derive vectors from token hashes, so texts sharing words land near
each other, giving retrieval something meaningful to rank.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _hash_seed(*parts: str) -> int:
    blob = "\0".join(parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _token_vector(token: str, dim: int, salt: str = "") -> np.ndarray:
    rng = np.random.default_rng(_hash_seed("token", salt, token))
    vector = rng.standard_normal(dim)
    return vector / np.linalg.norm(vector)


def first_sentence(text: str) -> str:
    """Everything up to and including the first period, or the whole text."""
    stop = text.find(".")
    return text[: stop + 1] if stop >= 0 else text


@dataclass
class DeterministicSummarizer:
    """Joins the first sentence of each input with '; '. Counts its calls."""

    budget: int = 16000
    identity: str = "mock-first-sentence-v1"
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def summarize(self, instruction: str, texts: Sequence[str]) -> str:
        with self._lock:
            self.calls += 1
        return "; ".join(first_sentence(t).strip() for t in texts)


@dataclass
class HashEmbedder:
    """Bag-of-tokens embedding: the sum of per-token hash vectors.

    Deterministic, fixed width, and similarity tracks token overlap.
    """

    dim: int = 64
    salt: str = ""
    identity: str = "mock-hash-embedder-v1"
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        with self._lock:
            self.calls += 1
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            tokens = text.split() or [text]
            for token in tokens:
                out[row] += _token_vector(token, self.dim, self.salt)
        return out


@dataclass
class HashTokenEmbedder:
    """One unit hash vector per whitespace token (for the token-level metric)."""

    dim: int = 32
    identity: str = "mock-token-embedder-v1"

    def token_vectors(self, text: str) -> np.ndarray:
        tokens = text.split() or [text]
        return np.stack([_token_vector(t, self.dim) for t in tokens])


def hash_tokenizer(text: str, vocab_size: int) -> list[int]:
    """Map words to stable token ids below ``vocab_size``."""
    tokens = text.split() or [text]
    return [_hash_seed("vocab", t) % vocab_size for t in tokens]


@dataclass
class LinearSoftmaxHead:
    """Fixed random linear-softmax map standing in for the frozen generator head.

    The next-token distribution depends only on the projected embedding; the
    token prefix is accepted but ignored.
    """

    d_llm: int
    vocab_size: int
    seed: int = 0

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.seed)
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(self.d_llm), (self.vocab_size, self.d_llm))
        self.bias = np.zeros(self.vocab_size)

    def _probs(self, embedding: np.ndarray) -> np.ndarray:
        logits = self.weight @ np.asarray(embedding, dtype=np.float64) + self.bias
        logits -= logits.max()
        exp = np.exp(logits)
        return exp / exp.sum()

    def next_token_probs(self, embedding: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        return self._probs(embedding)

    def log_likelihood_grad(
        self, embedding: np.ndarray, targets: Sequence[int]
    ) -> tuple[float, np.ndarray]:
        probs = self._probs(embedding)
        loglik = float(np.log(probs[list(targets)]).sum())
        counts = np.zeros(self.vocab_size)
        for t in targets:
            counts[t] += 1.0
        grad = (counts - len(targets) * probs) @ self.weight
        return loglik, grad


@dataclass
class EchoGenerator:
    """Returns the top retrieved opinion verbatim (or a fixed fallback)."""

    identity: str = "mock-echo-generator-v1"

    def generate(self, bundle) -> str:
        if bundle.retrieved_texts:
            return bundle.retrieved_texts[0]
        return "No relevant opinions were retrieved for this interaction."


@dataclass
class LengthRatioJudge:
    """Deterministic judge: 100 x min/max length ratio of candidate vs reference."""

    identity: str = "mock-length-judge-v1"

    def score(self, instruction: str, reference: str, candidate: str) -> float:
        longer = max(len(reference), len(candidate))
        if longer == 0:
            return 0.0
        value = 100.0 * min(len(reference), len(candidate)) / longer
        return float(np.clip(value, 0.0, 100.0))
