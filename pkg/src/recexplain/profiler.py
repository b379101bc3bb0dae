"""User/item profiling by hierarchical review aggregation.

A profile is built by placing a subject's reviews in shuffled leaf order,
summarizing consecutive groups of ``arity`` texts, and recursing on the
summaries until a single root remains; the root text is the profile. Groups
of one are promoted unchanged instead of being re-summarized, except that a
subject with a single review still gets one summarization call so a profile
is never raw review text.

Separately, every review gets its own one-call summary (its "opinion");
opinions are the retrieval corpus and are persisted keyed by review id.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corpus import Dataset
from .ports import TransportError

DEFAULT_OPINION_INSTRUCTION = (
    "Summarize this product review into one concise sentence capturing what "
    "the reviewer valued or disliked."
)
DEFAULT_MERGE_INSTRUCTION = (
    "Combine the following summaries into one concise description of the "
    "recurring preferences and characteristics they express."
)


class ProfilerError(RuntimeError):
    """Summarization failed or the request was invalid."""


class BudgetOverflowError(ProfilerError):
    """Direct-mode input exceeds the summarizer's context budget."""


class SummarizerPort(Protocol):
    """Pluggable text summarizer with a per-call input budget in characters."""

    identity: str
    budget: int

    def summarize(self, instruction: str, texts: Sequence[str]) -> str:
        ...


@dataclass
class ProfilerConfig:
    arity: int = 4
    shuffle_seed: int = 0
    mode: str = "hierarchical"  # hierarchical | random_sample | direct | second_layer
    sample_size: int = 4
    max_concurrency: int = 1
    retries: int = 3
    backoff: float = 0.5
    opinion_instruction: str = DEFAULT_OPINION_INSTRUCTION
    merge_instruction: str = DEFAULT_MERGE_INSTRUCTION
    include_item_profiles: bool = False

    def __post_init__(self) -> None:
        if self.arity < 2:
            raise ProfilerError(f"arity must be >= 2, got {self.arity}")
        if self.mode == "random_sample" and self.sample_size < 1:
            raise ProfilerError("random_sample needs sample_size >= 1")
        if self.mode not in ("hierarchical", "random_sample", "direct", "second_layer"):
            raise ProfilerError(f"unknown profiling mode {self.mode!r}")
        if self.max_concurrency < 1:
            raise ProfilerError("max_concurrency must be >= 1")


@dataclass
class TreeNode:
    text: str
    children: list[int] = field(default_factory=list)
    summarized: bool = False  # False for leaves and promoted singletons


@dataclass
class AggregationTree:
    """Level 0 holds the (shuffled) raw reviews; each later level summarizes groups."""

    levels: list[list[TreeNode]]
    arity: int
    summarizer_calls: int

    @property
    def root(self) -> TreeNode:
        return self.levels[-1][0]

    def level_sizes(self) -> list[int]:
        return [len(level) for level in self.levels]

    def digest(self) -> str:
        payload = {
            "arity": self.arity,
            "levels": [
                [{"text": n.text, "children": n.children} for n in level]
                for level in self.levels
            ],
        }
        blob = json.dumps(payload, ensure_ascii=False, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Profile:
    kind: str  # "user" | "item"
    subject_id: str
    text: str
    tree_digest: str
    calls: int
    summarizer_id: str


@dataclass(frozen=True)
class Opinion:
    """One-call summary of a single review; the unit indexed for retrieval."""

    review_id: int
    user_id: str
    item_id: str
    text: str


def _checked_call(
    summarizer: SummarizerPort,
    instruction: str,
    texts: Sequence[str],
    *,
    retries: int,
    backoff: float,
) -> str:
    """One summarizer call with transport retries; empty output is a failure too."""
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            summary = summarizer.summarize(instruction, list(texts))
        except TransportError as exc:
            last = exc
        else:
            if summary and summary.strip():
                return summary
            last = ProfilerError("summarizer returned an empty summary")
        if attempt < retries and backoff > 0:
            time.sleep(backoff * (2.0**attempt))
    raise ProfilerError(f"summarizer failed after {retries + 1} attempts: {last}")


def _truncate(texts: Sequence[str], budget: int) -> list[str]:
    # each input clipped to budget/|texts| chars so the call fits the context
    per_text = max(1, budget // max(1, len(texts)))
    return [t[:per_text] for t in texts]


def summarize_group(
    summarizer: SummarizerPort,
    texts: Sequence[str],
    instruction: str,
    *,
    retries: int = 3,
    backoff: float = 0.5,
    force: bool = False,
) -> tuple[str, int]:
    """Summarize one group; returns (summary, call count).

    A single text passes through unchanged with zero calls unless ``force``
    is set (used for raw-review opinions and single-review profiles).
    """
    if not texts:
        raise ProfilerError("cannot summarize an empty group")
    if len(texts) == 1 and not force:
        return texts[0], 0
    clipped = _truncate(texts, summarizer.budget)
    summary = _checked_call(
        summarizer, instruction, clipped, retries=retries, backoff=backoff
    )
    return summary, 1


def build_tree(
    summarizer: SummarizerPort,
    reviews: Sequence[str],
    config: ProfilerConfig,
) -> AggregationTree:
    """Build the aggregation tree over the given leaf order.

    Leaves are grouped by consecutive index, so any shuffling happens before
    this call. Within a level, groups may be summarized concurrently; levels
    are a barrier. Each node depends only on its children's texts, so the
    result is independent of scheduling.
    """
    if not reviews:
        raise ProfilerError("cannot build a tree over zero reviews")
    levels = [[TreeNode(text=t) for t in reviews]]
    calls = 0
    if len(reviews) == 1:
        # single review: one call so the profile is never raw review text
        summary, made = summarize_group(
            summarizer,
            [reviews[0]],
            config.merge_instruction,
            retries=config.retries,
            backoff=config.backoff,
            force=True,
        )
        levels.append([TreeNode(text=summary, children=[0], summarized=True)])
        return AggregationTree(levels=levels, arity=config.arity, summarizer_calls=made)

    def summarize_or_promote(group: list[int], current: list[TreeNode]) -> TreeNode:
        if len(group) == 1:
            return TreeNode(text=current[group[0]].text, children=list(group))
        summary, _ = summarize_group(
            summarizer,
            [current[j].text for j in group],
            config.merge_instruction,
            retries=config.retries,
            backoff=config.backoff,
        )
        return TreeNode(text=summary, children=list(group), summarized=True)

    while len(levels[-1]) > 1:
        current = levels[-1]
        groups = [
            list(range(start, min(start + config.arity, len(current))))
            for start in range(0, len(current), config.arity)
        ]
        if config.max_concurrency > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
                nodes = list(pool.map(lambda g: summarize_or_promote(g, current), groups))
        else:
            nodes = [summarize_or_promote(g, current) for g in groups]
        calls += sum(1 for n in nodes if n.summarized)
        levels.append(nodes)
    return AggregationTree(levels=levels, arity=config.arity, summarizer_calls=calls)


def _derived_seed(seed: int, kind: str, subject_id: str) -> int:
    blob = f"{seed}:{kind}:{subject_id}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def _shuffled_leaf_texts(
    dataset: Dataset,
    kind: str,
    subject_id: str,
    config: ProfilerConfig,
    item_profiles: dict[str, str] | None = None,
) -> list[str]:
    if kind == "user":
        reviews = dataset.user_reviews(subject_id)
    else:
        reviews = dataset.item_reviews(subject_id)
    texts = []
    for review in reviews:
        text = review.text
        if kind == "user" and item_profiles and review.item_id in item_profiles:
            text = f"{text}\n{item_profiles[review.item_id]}"
        texts.append(text)
    rng = np.random.default_rng(_derived_seed(config.shuffle_seed, kind, subject_id))
    return [texts[j] for j in rng.permutation(len(texts))]


def _profile_from_tree(
    kind: str, subject_id: str, tree: AggregationTree, summarizer: SummarizerPort
) -> Profile:
    return Profile(
        kind=kind,
        subject_id=subject_id,
        text=tree.root.text,
        tree_digest=tree.digest(),
        calls=tree.summarizer_calls,
        summarizer_id=summarizer.identity,
    )


def build_user_profile(
    dataset: Dataset,
    user_id: str,
    summarizer: SummarizerPort,
    config: ProfilerConfig,
    item_profiles: dict[str, str] | None = None,
) -> Profile:
    """Hierarchical profile over the user's reviews (leaf order shuffled by seed).

    When ``config.include_item_profiles`` is set and ``item_profiles`` given,
    each leaf carries its item's profile text alongside the review.
    """
    if not config.include_item_profiles:
        item_profiles = None
    texts = _shuffled_leaf_texts(dataset, "user", user_id, config, item_profiles)
    tree = build_tree(summarizer, texts, config)
    return _profile_from_tree("user", user_id, tree, summarizer)


def build_item_profile(
    dataset: Dataset,
    item_id: str,
    summarizer: SummarizerPort,
    config: ProfilerConfig,
) -> Profile:
    texts = _shuffled_leaf_texts(dataset, "item", item_id, config)
    tree = build_tree(summarizer, texts, config)
    return _profile_from_tree("item", item_id, tree, summarizer)


def profile_ablation(
    dataset: Dataset,
    kind: str,
    subject_id: str,
    summarizer: SummarizerPort,
    config: ProfilerConfig,
) -> Profile:
    """Non-hierarchical profiling baselines.

    random_sample: one call over ``sample_size`` seed-sampled reviews.
    direct: one call over all reviews; raises BudgetOverflowError if the
    combined input exceeds the summarizer budget instead of truncating.
    second_layer: the root's children summaries joined, from the full tree.
    """
    if config.mode == "hierarchical":
        raise ProfilerError("profile_ablation requires a non-hierarchical mode")
    if kind == "user":
        reviews = dataset.user_reviews(subject_id)
    else:
        reviews = dataset.item_reviews(subject_id)
    texts = [r.text for r in reviews]

    if config.mode == "random_sample":
        rng = np.random.default_rng(_derived_seed(config.shuffle_seed, kind, subject_id))
        count = min(config.sample_size, len(texts))
        picked = [texts[j] for j in rng.choice(len(texts), size=count, replace=False)]
        summary, calls = summarize_group(
            summarizer,
            picked,
            config.merge_instruction,
            retries=config.retries,
            backoff=config.backoff,
            force=True,
        )
        digest = hashlib.sha256(("random_sample\0" + "\0".join(picked)).encode()).hexdigest()
        return Profile(kind, subject_id, summary, digest, calls, summarizer.identity)

    if config.mode == "direct":
        total = sum(len(t) for t in texts)
        if total > summarizer.budget:
            raise BudgetOverflowError(
                f"direct profiling input of {total} chars exceeds the summarizer "
                f"budget of {summarizer.budget}"
            )
        summary = _checked_call(
            summarizer,
            config.merge_instruction,
            texts,
            retries=config.retries,
            backoff=config.backoff,
        )
        digest = hashlib.sha256(("direct\0" + "\0".join(texts)).encode()).hexdigest()
        return Profile(kind, subject_id, summary, digest, 1, summarizer.identity)

    # second_layer: children of the root, from the normal hierarchical build
    tree_config = replace(config, mode="hierarchical")
    texts = _shuffled_leaf_texts(dataset, kind, subject_id, tree_config)
    tree = build_tree(summarizer, texts, tree_config)
    penultimate = tree.levels[-2] if len(tree.levels) > 1 else tree.levels[-1]
    children = [penultimate[j].text for j in tree.root.children]
    return Profile(
        kind,
        subject_id,
        "\n".join(children),
        tree.digest(),
        tree.summarizer_calls,
        summarizer.identity,
    )


def build_opinions(
    dataset: Dataset,
    summarizer: SummarizerPort,
    config: ProfilerConfig,
) -> list[Opinion]:
    """One summarizer call per review: the raw text becomes its opinion."""

    def one(review) -> Opinion:
        summary, _ = summarize_group(
            summarizer,
            [review.text],
            config.opinion_instruction,
            retries=config.retries,
            backoff=config.backoff,
            force=True,
        )
        return Opinion(review.review_id, review.user_id, review.item_id, summary)

    if config.max_concurrency > 1 and len(dataset.reviews) > 1:
        with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
            return list(pool.map(one, dataset.reviews))
    return [one(r) for r in dataset.reviews]


# ---------------------------------------------------------------------------
# persistence


def write_profiles(profiles: Sequence[Profile], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for p in profiles:
            record = {
                "kind": p.kind,
                "id": p.subject_id,
                "text": p.text,
                "tree_digest": p.tree_digest,
                "calls": p.calls,
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_profiles(path: str | Path, summarizer_id: str = "") -> list[Profile]:
    profiles = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            record = json.loads(line)
            profiles.append(
                Profile(
                    kind=record["kind"],
                    subject_id=record["id"],
                    text=record["text"],
                    tree_digest=record["tree_digest"],
                    calls=record["calls"],
                    summarizer_id=summarizer_id,
                )
            )
    return profiles


def write_opinions(opinions: Sequence[Opinion], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for op in opinions:
            record = {"review_id": op.review_id, "opinion": op.text}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_opinions(path: str | Path, dataset: Dataset | None = None) -> list[Opinion]:
    """Load opinions; source (user, item) metadata is re-joined from the dataset."""
    by_id = {r.review_id: r for r in dataset.reviews} if dataset is not None else {}
    opinions = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            record = json.loads(line)
            review = by_id.get(record["review_id"])
            opinions.append(
                Opinion(
                    review_id=record["review_id"],
                    user_id=review.user_id if review else "",
                    item_id=review.item_id if review else "",
                    text=record["opinion"],
                )
            )
    return opinions
