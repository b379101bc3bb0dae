"""Opinion retrieval: unit-vector index, pseudo-document queries, and adapter training.

Two query constructions are supported. The latent query averages the unit
vectors of the target user's and item's opinions and halves their sum; the
profile query embeds the concatenated pair profile text through the frozen
base embedder followed by a trainable affine adapter. Search is exact
brute-force cosine over pre-normalized rows, which keeps the oracle trivial
and still scans the paper-scale corpora in milliseconds.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .ports import TransportError
from .profiler import Opinion, Profile

UNIT_TOLERANCE = 1e-6


class RetrievalError(ValueError):
    """Invalid retrieval input: shape drift, empty sides, bad queries."""


class EmbedderPort(Protocol):
    """Frozen text embedder with a fixed output width."""

    identity: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        ...


def unit_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; all-zero rows are left zero and flagged."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero_mask = norms == 0.0
    safe = np.where(zero_mask, 1.0, norms)
    return matrix / safe[:, None], zero_mask


def _require_unit(vector: np.ndarray, what: str) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise RetrievalError(f"{what} must be unit-norm (got ||v|| = {norm:.6g})")
    return vector


@dataclass
class VectorIndex:
    """Unit-vector rows keyed by opinion id, with source (user, item) metadata."""

    ids: np.ndarray
    rows: np.ndarray
    meta: list[tuple[str, str]]
    zero_mask: np.ndarray

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.zero_mask = np.asarray(self.zero_mask, dtype=bool)
        if len({int(i) for i in self.ids}) != self.ids.size:
            raise RetrievalError("opinion ids must be unique")
        if not (self.ids.size == self.rows.shape[0] == len(self.meta) == self.zero_mask.size):
            raise RetrievalError("index arrays disagree on row count")
        norms = np.linalg.norm(self.rows, axis=1)
        bad = ~self.zero_mask & (np.abs(norms - 1.0) > UNIT_TOLERANCE)
        if bad.any():
            raise RetrievalError(f"{int(bad.sum())} index rows are not unit-norm")
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def row_for_id(self, opinion_id: int) -> np.ndarray:
        if opinion_id not in self._pos:
            raise RetrievalError(f"unknown opinion id {opinion_id}")
        return self.rows[self._pos[opinion_id]]

    def rows_for_ids(self, opinion_ids: Iterable[int]) -> np.ndarray:
        return np.stack([self.row_for_id(i) for i in opinion_ids])


@dataclass
class RetrievalResult:
    query_id: str
    hits: list[tuple[int, float]]
    requested: int

    def __post_init__(self) -> None:
        if self.requested < 1:
            raise RetrievalError("q must be >= 1")
        if len(self.hits) > self.requested:
            raise RetrievalError("more hits than requested")
        scores = [s for _, s in self.hits]
        if any(s < -1.0 or s > 1.0 for s in scores):
            raise RetrievalError("cosine score outside [-1, 1]")
        if any(scores[k] < scores[k + 1] for k in range(len(scores) - 1)):
            raise RetrievalError("hit scores must be non-increasing")

    @property
    def hit_ids(self) -> list[int]:
        return [i for i, _ in self.hits]


def _embed_with_retries(
    embedder: EmbedderPort,
    texts: Sequence[str],
    *,
    retries: int = 3,
    backoff: float = 0.5,
) -> np.ndarray:
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            out = np.asarray(embedder.embed(list(texts)), dtype=np.float64)
        except TransportError as exc:
            last = exc
            if attempt < retries and backoff > 0:
                time.sleep(backoff * (2.0**attempt))
            continue
        if out.ndim != 2 or out.shape[0] != len(texts):
            raise RetrievalError(
                f"embedder returned shape {out.shape} for {len(texts)} texts"
            )
        return out
    raise RetrievalError(f"embedder failed after {retries + 1} attempts: {last}")


def embed_opinions(
    embedder: EmbedderPort,
    opinions: Sequence[Opinion],
    *,
    batch_size: int = 64,
    retries: int = 3,
    backoff: float = 0.5,
) -> VectorIndex:
    """Embed opinions in order into a unit-vector index; zero vectors are flagged."""
    if not opinions:
        raise RetrievalError("no opinions to embed")
    blocks: list[np.ndarray] = []
    width: int | None = None
    for start in range(0, len(opinions), batch_size):
        chunk = opinions[start : start + batch_size]
        block = _embed_with_retries(
            embedder, [op.text for op in chunk], retries=retries, backoff=backoff
        )
        if width is None:
            width = block.shape[1]
        elif block.shape[1] != width:
            raise RetrievalError(
                f"embedding width drifted from {width} to {block.shape[1]}"
            )
        blocks.append(block)
    raw = np.vstack(blocks)
    rows, zero_mask = unit_rows(raw)
    return VectorIndex(
        ids=np.asarray([op.review_id for op in opinions], dtype=np.int64),
        rows=rows,
        meta=[(op.user_id, op.item_id) for op in opinions],
        zero_mask=zero_mask,
    )


def latent_query(
    user_opinion_vectors: np.ndarray, item_opinion_vectors: np.ndarray
) -> np.ndarray:
    """Mean the user-side and item-side unit vectors, then halve their sum.

    The result is re-normalized for cosine search.
    """
    user_vecs = np.atleast_2d(np.asarray(user_opinion_vectors, dtype=np.float64))
    item_vecs = np.atleast_2d(np.asarray(item_opinion_vectors, dtype=np.float64))
    if user_vecs.size == 0 or item_vecs.size == 0:
        raise RetrievalError("latent query needs at least one vector per side")
    query_user = user_vecs.mean(axis=0)
    query_item = item_vecs.mean(axis=0)
    combined = (query_user + query_item) / 2.0
    norm = float(np.linalg.norm(combined))
    if norm == 0.0:
        raise RetrievalError("latent query collapsed to the zero vector")
    return combined / norm


# ---------------------------------------------------------------------------
# contrastive adapter


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    batch_size: int = 8
    learning_rate: float = 0.1
    steps: int = 300
    seed: int = 0
    negatives: str = "paired"  # "paired": other pairs' own positives; "anchor": vs all opinions

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise RetrievalError(f"temperature must be positive, got {self.temperature}")
        if self.negatives not in ("paired", "anchor"):
            raise RetrievalError(f"unknown negatives mode {self.negatives!r}")


@dataclass
class AdapterParams:
    """Affine map over frozen base embeddings, re-normalized after application."""

    weight: np.ndarray
    bias: np.ndarray
    loss_history: list[float] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise RetrievalError("adapter parameters must be finite")
        if self.weight.ndim != 2 or self.weight.shape[0] != self.weight.shape[1]:
            raise RetrievalError("adapter weight must be square")
        if self.bias.shape != (self.weight.shape[0],):
            raise RetrievalError("adapter bias width mismatch")

    @classmethod
    def identity(cls, dim: int) -> "AdapterParams":
        return cls(weight=np.eye(dim), bias=np.zeros(dim))

    @property
    def dim(self) -> int:
        return int(self.weight.shape[0])

    def apply(self, base_vectors: np.ndarray) -> np.ndarray:
        """Affine transform plus row re-normalization (zero rows stay zero)."""
        base = np.atleast_2d(np.asarray(base_vectors, dtype=np.float64))
        rows, _ = unit_rows(base @ self.weight.T + self.bias)
        return rows

    def save(self, path: str | Path) -> None:
        np.savez(path, weight=self.weight, bias=self.bias)

    @classmethod
    def load(cls, path: str | Path) -> "AdapterParams":
        data = np.load(path)
        return cls(weight=data["weight"], bias=data["bias"])


def contrastive_loss(
    anchor_profiles: np.ndarray,
    positive_opinions: np.ndarray,
    temperature: float,
    *,
    negatives: str = "paired",
) -> float:
    """Softmax-over-similarities loss pulling each profile toward its own opinion.

    In "paired" mode the denominator holds the other pairs' own positive
    terms, exactly as the loss is written; "anchor" mode is the conventional
    form comparing each profile against every opinion in the batch.
    """
    profiles = np.atleast_2d(np.asarray(anchor_profiles, dtype=np.float64))
    opinions = np.atleast_2d(np.asarray(positive_opinions, dtype=np.float64))
    if profiles.shape != opinions.shape:
        raise RetrievalError("profile and opinion batches must align")
    if profiles.shape[0] < 2:
        raise RetrievalError("contrastive loss needs a batch of at least 2")
    loss, _, _ = _contrastive_loss_grads(profiles, opinions, temperature, negatives)
    return loss


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _contrastive_loss_grads(
    unit_profiles: np.ndarray,
    unit_opinions: np.ndarray,
    temperature: float,
    negatives: str,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradients with respect to the unit profile/opinion vectors."""
    batch = unit_profiles.shape[0]
    if negatives == "paired":
        sims = np.einsum("ij,ij->i", unit_profiles, unit_opinions)
        log_probs = _log_softmax(sims / temperature)
        loss = float(-log_probs.mean())
        # dL/ds_k = (softmax_k - 1/B) / tau
        grad_sims = (np.exp(log_probs) - 1.0 / batch) / temperature
        grad_profiles = grad_sims[:, None] * unit_opinions
        grad_opinions = grad_sims[:, None] * unit_profiles
    elif negatives == "anchor":
        sims = unit_profiles @ unit_opinions.T
        log_probs = _log_softmax(sims / temperature)
        loss = float(-np.trace(log_probs) / batch)
        grad_sims = (np.exp(log_probs) - np.eye(batch)) / (batch * temperature)
        grad_profiles = grad_sims @ unit_opinions
        grad_opinions = grad_sims.T @ unit_profiles
    else:
        raise RetrievalError(f"unknown negatives mode {negatives!r}")
    if not np.isfinite(loss):
        raise RetrievalError("contrastive loss is not finite")
    return loss, grad_profiles, grad_opinions


def _normalize_backward(
    raw: np.ndarray, unit: np.ndarray, grad_unit: np.ndarray
) -> np.ndarray:
    """Backprop through row L2 normalization: u = z / ||z||."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    inner = np.einsum("ij,ij->i", unit, grad_unit)[:, None]
    return (grad_unit - inner * unit) / norms


def adapter_loss_and_grads(
    params: AdapterParams,
    base_profiles: np.ndarray,
    base_opinions: np.ndarray,
    config: ContrastiveConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive loss and analytic gradients wrt the adapter weight and bias."""
    raw_p = base_profiles @ params.weight.T + params.bias
    raw_o = base_opinions @ params.weight.T + params.bias
    unit_p, zeros_p = unit_rows(raw_p)
    unit_o, zeros_o = unit_rows(raw_o)
    if zeros_p.any() or zeros_o.any():
        raise RetrievalError("adapter mapped an embedding to the zero vector")
    loss, grad_up, grad_uo = _contrastive_loss_grads(
        unit_p, unit_o, config.temperature, config.negatives
    )
    grad_zp = _normalize_backward(raw_p, unit_p, grad_up)
    grad_zo = _normalize_backward(raw_o, unit_o, grad_uo)
    grad_weight = grad_zp.T @ base_profiles + grad_zo.T @ base_opinions
    grad_bias = grad_zp.sum(axis=0) + grad_zo.sum(axis=0)
    return loss, grad_weight, grad_bias


def fit_adapter(
    pairs: Sequence[tuple[str, str]],
    base: EmbedderPort,
    config: ContrastiveConfig,
    *,
    retries: int = 3,
    backoff: float = 0.5,
) -> AdapterParams:
    """Train the affine adapter on frozen base embeddings of (profile, opinion) pairs.

    Identity-initialized, plain gradient descent, deterministic per seed.
    ``loss_history`` on the returned params holds the full-set loss before
    training and after every step.
    """
    if len(pairs) < 2:
        raise RetrievalError("adapter training needs at least 2 pairs")
    base_profiles = _embed_with_retries(
        base, [p for p, _ in pairs], retries=retries, backoff=backoff
    )
    base_opinions = _embed_with_retries(
        base, [o for _, o in pairs], retries=retries, backoff=backoff
    )
    if base_profiles.shape[1] != base_opinions.shape[1]:
        raise RetrievalError("embedding width drifted between profile and opinion batches")
    params = AdapterParams.identity(base_profiles.shape[1])
    rng = np.random.default_rng(config.seed)
    n = len(pairs)

    def full_loss() -> float:
        loss, _, _ = adapter_loss_and_grads(params, base_profiles, base_opinions, config)
        return loss

    params.loss_history.append(full_loss())
    for step in range(config.steps):
        if config.batch_size < n:
            picked = rng.choice(n, size=config.batch_size, replace=False)
            batch_p, batch_o = base_profiles[picked], base_opinions[picked]
        else:
            batch_p, batch_o = base_profiles, base_opinions
        loss, grad_weight, grad_bias = adapter_loss_and_grads(
            params, batch_p, batch_o, config
        )
        if not np.isfinite(loss):
            raise RetrievalError(f"NaN contrastive loss at step {step}")
        params.weight -= config.learning_rate * grad_weight
        params.bias -= config.learning_rate * grad_bias
        params.loss_history.append(full_loss())
    return params


def profile_query(
    adapter: AdapterParams,
    base: EmbedderPort,
    user_profile: Profile,
    item_profile: Profile,
    *,
    retries: int = 3,
    backoff: float = 0.5,
) -> np.ndarray:
    """Embed the concatenated pair profile text through base then adapter."""
    if not user_profile.text or not item_profile.text:
        raise RetrievalError("profile query needs non-empty profiles")
    text = f"{user_profile.text}\n{item_profile.text}"
    raw = _embed_with_retries(base, [text], retries=retries, backoff=backoff)
    mapped = adapter.apply(raw)
    if float(np.linalg.norm(mapped[0])) == 0.0:
        raise RetrievalError("profile query collapsed to the zero vector")
    return mapped[0]


# ---------------------------------------------------------------------------
# search


def retrieve_top_q(
    index: VectorIndex,
    query: np.ndarray,
    q: int,
    exclude: Iterable[tuple[str, str]] = (),
    *,
    query_id: str = "",
) -> RetrievalResult:
    """Exact brute-force top-q by cosine score; ties break by ascending opinion id.

    Rows whose (user, item) source is in ``exclude`` and zero-flagged rows
    never appear in the hits. Fewer than q eligible rows returns them all.
    """
    if q < 1:
        raise RetrievalError("q must be >= 1")
    query = _require_unit(query, "query")
    if query.shape != (index.dim,):
        raise RetrievalError(f"query width {query.shape} != index width {index.dim}")
    scores = index.rows @ query
    eligible = ~index.zero_mask.copy()
    excluded_pairs = set(exclude)
    if excluded_pairs:
        for k, pair in enumerate(index.meta):
            if pair in excluded_pairs:
                eligible[k] = False
    masked = np.where(eligible, scores, -np.inf)
    n_eligible = int(eligible.sum())
    take = min(q, n_eligible)
    if take == 0:
        return RetrievalResult(query_id=query_id, hits=[], requested=q)
    if take < n_eligible:
        part = np.argpartition(-masked, take - 1)[:take]
        threshold = masked[part].min()
        candidates = np.flatnonzero(masked >= threshold)
    else:
        candidates = np.flatnonzero(eligible)
    order = np.lexsort((index.ids[candidates], -masked[candidates]))
    chosen = candidates[order][:take]
    hits = [
        (int(index.ids[k]), float(np.clip(scores[k], -1.0, 1.0))) for k in chosen
    ]
    return RetrievalResult(query_id=query_id, hits=hits, requested=q)


def retrieved_set_similarity(index: VectorIndex, result: RetrievalResult) -> np.ndarray:
    """Pairwise cosine matrix of the retrieved rows: symmetric, unit diagonal."""
    if len(result.hits) < 2:
        raise RetrievalError("need at least 2 hits for pairwise similarity")
    vectors = index.rows_for_ids(result.hit_ids)
    sims = vectors @ vectors.T
    sims = np.clip((sims + sims.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sims, 1.0)
    return sims


def mean_offdiagonal(similarity: np.ndarray) -> float:
    n = similarity.shape[0]
    off = similarity[~np.eye(n, dtype=bool)]
    return float(off.mean())


@dataclass
class LatencyReport:
    corpus_size: int
    dim: int
    query_count: int
    thread_count: int
    p50_ms: float
    p95_ms: float
    p99_ms: float
    mean_ms: float

    def to_dict(self) -> dict:
        return {
            "corpus_size": self.corpus_size,
            "dim": self.dim,
            "query_count": self.query_count,
            "thread_count": self.thread_count,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "p99_ms": self.p99_ms,
            "mean_ms": self.mean_ms,
        }


def bench_retrieval(index: VectorIndex, queries: Sequence[np.ndarray], q: int) -> LatencyReport:
    """Wall-clock single-query latency stats over the given queries."""
    if len(queries) == 0:
        raise RetrievalError("benchmark needs at least one query")
    times_ms = []
    for query in queries:
        start = time.perf_counter()
        retrieve_top_q(index, query, q)
        times_ms.append((time.perf_counter() - start) * 1000.0)
    times = np.asarray(times_ms)
    return LatencyReport(
        corpus_size=len(index),
        dim=index.dim,
        query_count=len(queries),
        thread_count=1,
        p50_ms=float(np.percentile(times, 50)),
        p95_ms=float(np.percentile(times, 95)),
        p99_ms=float(np.percentile(times, 99)),
        mean_ms=float(times.mean()),
    )


# ---------------------------------------------------------------------------
# embedding cache file (magic "RXHA")

_MAGIC = b"RXHA"
_VERSION = 1


def save_embedding_cache(path: str | Path, ids: Sequence[int], rows: np.ndarray) -> None:
    """Binary cache: header, then per row a decimal id string and float32 LE values."""
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise RetrievalError("ids and rows disagree on count")
    parts = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<I", rows.shape[1]),
        struct.pack("<Q", rows.shape[0]),
    ]
    for opinion_id, row in zip(ids, rows):
        id_bytes = str(int(opinion_id)).encode("utf-8")
        parts.append(struct.pack("<H", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(np.ascontiguousarray(row, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embedding_cache(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read the cache back as (int64 ids, float64 rows)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise RetrievalError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise RetrievalError(f"{path}: unsupported cache version {version}")
    (dim,) = struct.unpack_from("<I", raw, 8)
    (count,) = struct.unpack_from("<Q", raw, 12)
    offset = 20
    ids = np.empty(count, dtype=np.int64)
    rows = np.empty((count, dim), dtype=np.float64)
    row_bytes = dim * 4
    for k in range(count):
        if offset + 2 > len(raw):
            raise RetrievalError(f"{path}: truncated at row {k}")
        (id_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        id_str = raw[offset : offset + id_len].decode("utf-8")
        offset += id_len
        try:
            ids[k] = int(id_str)
        except ValueError as exc:
            raise RetrievalError(f"{path}: non-numeric opinion id {id_str!r}") from exc
        if offset + row_bytes > len(raw):
            raise RetrievalError(f"{path}: truncated at row {k}")
        rows[k] = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset)
        offset += row_bytes
    if offset != len(raw):
        raise RetrievalError(f"{path}: {len(raw) - offset} trailing bytes")
    return ids, rows
