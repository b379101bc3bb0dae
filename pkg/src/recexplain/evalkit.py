"""Explanation scoring: token-embedding similarity metrics, judge scores, aggregation.

The token metric greedily matches each token to its best counterpart by
inner product (embeddings are pre-normalized, so that IS the cosine). As
implemented here, precision averages over the REFERENCE tokens and recall
over the CANDIDATE tokens; that is the orientation the scores were defined
with, and it is the transpose of the more common convention, so a
``standard_orientation`` switch is provided.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .ports import TransportError


class EvalError(ValueError):
    """Invalid metric input or an out-of-contract judge response."""


class TokenEmbedderPort(Protocol):
    """Maps text to one unit vector per token."""

    identity: str

    def token_vectors(self, text: str) -> np.ndarray:
        ...


class JudgePort(Protocol):
    """External quality judge returning a score in [0, 100]."""

    def score(self, instruction: str, reference: str, candidate: str) -> float:
        ...


def bertscore(
    ref_tokens: np.ndarray,
    cand_tokens: np.ndarray,
    *,
    standard_orientation: bool = False,
    clip_negative: bool = False,
) -> tuple[float, float, float]:
    """Greedy max-inner-product matching between two unit-vector token sequences.

    Returns (precision, recall, f1). Precision averages the per-reference-token
    maxima and recall the per-candidate-token maxima; ``standard_orientation``
    swaps the two. F1 is the harmonic mean, 0 when P + R == 0.
    """
    ref = np.atleast_2d(np.asarray(ref_tokens, dtype=np.float64))
    cand = np.atleast_2d(np.asarray(cand_tokens, dtype=np.float64))
    if ref.size == 0 or cand.size == 0:
        raise EvalError("token sequences must be non-empty")
    if ref.shape[1] != cand.shape[1]:
        raise EvalError(f"token widths differ: {ref.shape[1]} vs {cand.shape[1]}")
    sims = ref @ cand.T
    if clip_negative:
        sims = np.maximum(sims, 0.0)
    ref_side = float(sims.max(axis=1).mean())
    cand_side = float(sims.max(axis=0).mean())
    precision, recall = (cand_side, ref_side) if standard_orientation else (ref_side, cand_side)
    if precision + recall == 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return precision, recall, f1


def judge_score(
    judge: JudgePort,
    reference: str,
    candidate: str,
    instruction: str,
    *,
    retries: int = 3,
    backoff: float = 0.5,
) -> float:
    """One judge call with transport retries; scores outside [0, 100] are rejected."""
    if not reference.strip() or not candidate.strip():
        raise EvalError("reference and candidate must be non-empty")
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            value = float(judge.score(instruction, reference, candidate))
        except TransportError as exc:
            last = exc
            if attempt < retries and backoff > 0:
                time.sleep(backoff * (2.0**attempt))
            continue
        if not (0.0 <= value <= 100.0):
            raise EvalError(f"judge score {value} outside [0, 100]")
        return value
    raise EvalError(f"judge failed after {retries + 1} attempts: {last}")


@dataclass(frozen=True)
class SampleScores:
    bert_p: float
    bert_r: float
    bert_f1: float
    judge: float | None = None


@dataclass
class MetricSummary:
    mean: float
    std: float


@dataclass
class ScoreReport:
    """Per-sample scores plus means and population standard deviations."""

    n: int
    bert_p: MetricSummary
    bert_r: MetricSummary
    bert_f1: MetricSummary
    judge: MetricSummary | None
    samples: list[SampleScores]

    def to_dict(self) -> dict:
        def summary(s: MetricSummary | None) -> dict | None:
            return None if s is None else {"mean": s.mean, "std": s.std}

        return {
            "n": self.n,
            "bert_p": summary(self.bert_p),
            "bert_r": summary(self.bert_r),
            "bert_f1": summary(self.bert_f1),
            "judge": summary(self.judge),
            "samples": [
                {
                    "bert_p": s.bert_p,
                    "bert_r": s.bert_r,
                    "bert_f1": s.bert_f1,
                    "judge": s.judge,
                }
                for s in self.samples
            ],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def _summarize(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    return MetricSummary(mean=float(arr.mean()), std=float(arr.std()))


def aggregate(samples: Sequence[SampleScores]) -> ScoreReport:
    """Means and population standard deviations over per-sample scores."""
    if not samples:
        raise EvalError("need at least one sample to aggregate")
    judge_values = [s.judge for s in samples if s.judge is not None]
    if judge_values and len(judge_values) != len(samples):
        raise EvalError("judge scores present for only part of the samples")
    return ScoreReport(
        n=len(samples),
        bert_p=_summarize([s.bert_p for s in samples]),
        bert_r=_summarize([s.bert_r for s in samples]),
        bert_f1=_summarize([s.bert_f1 for s in samples]),
        judge=_summarize(judge_values) if judge_values else None,
        samples=list(samples),
    )


def score_pairs(
    references: Sequence[str],
    candidates: Sequence[str],
    token_embedder: TokenEmbedderPort,
    judge: JudgePort | None = None,
    judge_instruction: str = "",
    *,
    standard_orientation: bool = False,
) -> ScoreReport:
    """Score aligned reference/candidate text pairs end to end."""
    if len(references) != len(candidates):
        raise EvalError(
            f"{len(references)} references vs {len(candidates)} candidates"
        )
    samples = []
    for reference, candidate in zip(references, candidates):
        p, r, f1 = bertscore(
            token_embedder.token_vectors(reference),
            token_embedder.token_vectors(candidate),
            standard_orientation=standard_orientation,
        )
        judged = (
            judge_score(judge, reference, candidate, judge_instruction)
            if judge is not None
            else None
        )
        samples.append(SampleScores(bert_p=p, bert_r=r, bert_f1=f1, judge=judged))
    return aggregate(samples)
