"""Review corpus loading, validation, splitting, and the bipartite interaction graph.

The on-disk format is JSON-lines, one review per line:

    {"user_id": "u1", "item_id": "i1", "review": "...", "explanation": "..."}

``explanation`` is optional ground truth for the interaction. Line numbers
(1-based) become the stable review ids used everywhere downstream: opinion
files, split manifests, and retrieval indexes all key on them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CorpusError(ValueError):
    """Invalid corpus input: malformed lines, missing fields, bad splits."""


@dataclass(frozen=True)
class Review:
    review_id: int
    user_id: str
    item_id: str
    text: str
    explanation: str | None = None


@dataclass(frozen=True)
class SplitSpec:
    """Random split: ``train_fraction`` of reviews go to train, rest to test."""

    train_fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.train_fraction < 1.0):
            raise CorpusError(
                f"train fraction must be strictly between 0 and 1, got {self.train_fraction}"
            )


@dataclass
class Dataset:
    """Immutable review collection with per-user and per-item position indexes."""

    reviews: list[Review]
    by_user: dict[str, list[int]] = field(default_factory=dict)
    by_item: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.by_user and not self.by_item:
            self._build_indexes()

    def _build_indexes(self) -> None:
        self.by_user = {}
        self.by_item = {}
        for pos, review in enumerate(self.reviews):
            self.by_user.setdefault(review.user_id, []).append(pos)
            self.by_item.setdefault(review.item_id, []).append(pos)

    @classmethod
    def from_reviews(cls, reviews: Iterable[Review]) -> "Dataset":
        return cls(reviews=list(reviews))

    def __len__(self) -> int:
        return len(self.reviews)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.reviews == other.reviews

    @property
    def num_users(self) -> int:
        return len(self.by_user)

    @property
    def num_items(self) -> int:
        return len(self.by_item)

    def user_reviews(self, user_id: str) -> list[Review]:
        if user_id not in self.by_user:
            raise CorpusError(f"unknown user {user_id!r}")
        return [self.reviews[p] for p in self.by_user[user_id]]

    def item_reviews(self, item_id: str) -> list[Review]:
        if item_id not in self.by_item:
            raise CorpusError(f"unknown item {item_id!r}")
        return [self.reviews[p] for p in self.by_item[item_id]]

    def review_by_id(self, review_id: int) -> Review:
        for review in self.reviews:
            if review.review_id == review_id:
                return review
        raise CorpusError(f"unknown review id {review_id}")


def _parse_line(line_no: int, raw: str, *, require_explanation: bool = False) -> Review:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {line_no}: malformed JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise CorpusError(f"line {line_no}: expected a JSON object")
    for name in ("user_id", "item_id", "review"):
        if name not in record:
            raise CorpusError(f"line {line_no}: missing required field {name!r}")
        if not isinstance(record[name], str):
            raise CorpusError(f"line {line_no}: field {name!r} must be a string")
    if not record["review"].strip():
        raise CorpusError(f"line {line_no}: review text empty after trimming")
    explanation = record.get("explanation")
    if explanation is not None and not isinstance(explanation, str):
        raise CorpusError(f"line {line_no}: field 'explanation' must be a string")
    return Review(
        review_id=line_no,
        user_id=record["user_id"],
        item_id=record["item_id"],
        text=record["review"],
        explanation=explanation,
    )


def load_reviews(path: str | Path, *, allow_duplicates: bool = False) -> Dataset:
    """Load a JSON-lines review file into a Dataset.

    Duplicate (user, item) pairs are rejected unless ``allow_duplicates`` is
    set, in which case the latest line wins. Review ids are the 1-based line
    numbers of the surviving lines.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no such file: {path}")
    seen: dict[tuple[str, str], int] = {}
    reviews: list[Review] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            if not raw.strip():
                raise CorpusError(f"line {line_no}: blank line")
            review = _parse_line(line_no, raw)
            pair = (review.user_id, review.item_id)
            if pair in seen:
                if not allow_duplicates:
                    raise CorpusError(
                        f"line {line_no}: duplicate (user, item) pair "
                        f"({review.user_id!r}, {review.item_id!r})"
                    )
                reviews[seen[pair]] = review
            else:
                seen[pair] = len(reviews)
                reviews.append(review)
    if not reviews:
        raise CorpusError("empty dataset")
    return Dataset.from_reviews(reviews)


def write_reviews(dataset: Dataset, path: str | Path) -> None:
    """Serialize back to the JSON-lines format (inverse of load_reviews)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for review in dataset.reviews:
            record: dict[str, str] = {
                "user_id": review.user_id,
                "item_id": review.item_id,
                "review": review.text,
            }
            if review.explanation is not None:
                record["explanation"] = review.explanation
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


@dataclass
class InteractionGraph:
    """Bipartite user-item graph; one undirected edge per distinct pair.

    Ordinals are assigned by first appearance in the dataset, so graph
    construction is deterministic for a fixed review order.
    """

    user_ids: list[str]
    item_ids: list[str]
    user_items: list[list[int]]
    item_users: list[list[int]]

    def __post_init__(self) -> None:
        edges_u: list[int] = []
        edges_i: list[int] = []
        for u, items in enumerate(self.user_items):
            for i in items:
                edges_u.append(u)
                edges_i.append(i)
        self.edge_users = np.asarray(edges_u, dtype=np.int64)
        self.edge_items = np.asarray(edges_i, dtype=np.int64)
        self.user_degrees = np.asarray([len(x) for x in self.user_items], dtype=np.float64)
        self.item_degrees = np.asarray([len(x) for x in self.item_users], dtype=np.float64)
        if (self.user_degrees < 1).any() or (self.item_degrees < 1).any():
            raise CorpusError("interaction graph has a zero-degree node")
        self._user_ord = {u: k for k, u in enumerate(self.user_ids)}
        self._item_ord = {i: k for k, i in enumerate(self.item_ids)}

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_edges(self) -> int:
        return int(self.edge_users.shape[0])

    def user_ordinal(self, user_id: str) -> int:
        if user_id not in self._user_ord:
            raise CorpusError(f"unknown user {user_id!r}")
        return self._user_ord[user_id]

    def item_ordinal(self, item_id: str) -> int:
        if item_id not in self._item_ord:
            raise CorpusError(f"unknown item {item_id!r}")
        return self._item_ord[item_id]


def build_interaction_graph(dataset: Dataset) -> InteractionGraph:
    """Build the deduplicated bipartite graph from a dataset."""
    if not dataset.reviews:
        raise CorpusError("empty dataset")
    user_ord: dict[str, int] = {}
    item_ord: dict[str, int] = {}
    edges: set[tuple[int, int]] = set()
    for review in dataset.reviews:
        u = user_ord.setdefault(review.user_id, len(user_ord))
        i = item_ord.setdefault(review.item_id, len(item_ord))
        edges.add((u, i))
    user_items: list[list[int]] = [[] for _ in range(len(user_ord))]
    item_users: list[list[int]] = [[] for _ in range(len(item_ord))]
    for u, i in sorted(edges):
        user_items[u].append(i)
        item_users[i].append(u)
    return InteractionGraph(
        user_ids=list(user_ord),
        item_ids=list(item_ord),
        user_items=user_items,
        item_users=item_users,
    )


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic random split into disjoint train/test partitions.

    Test size is max(1, round((1 - fraction) * n)) with half-up rounding;
    raises if the train side would be left empty. Partitions preserve the
    original review order and ids.
    """
    n = len(dataset)
    if n == 0:
        raise CorpusError("empty dataset")
    test_size = max(1, int((1.0 - spec.train_fraction) * n + 0.5))
    train_size = n - test_size
    if train_size == 0:
        raise CorpusError(
            f"train fraction {spec.train_fraction} leaves an empty train partition "
            f"for {n} reviews"
        )
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    test_pos = sorted(int(p) for p in order[:test_size])
    test_set = set(test_pos)
    train_reviews = [r for p, r in enumerate(dataset.reviews) if p not in test_set]
    test_reviews = [dataset.reviews[p] for p in test_pos]
    return Dataset.from_reviews(train_reviews), Dataset.from_reviews(test_reviews)


def write_split_manifest(path: str | Path, spec: SplitSpec, train: Dataset, test: Dataset) -> None:
    manifest = {
        "seed": spec.seed,
        "train": [r.review_id for r in train.reviews],
        "test": [r.review_id for r in test.reviews],
    }
    Path(path).write_text(json.dumps(manifest), encoding="utf-8")


def subset_by_ids(dataset: Dataset, ids: Sequence[int]) -> Dataset:
    """Select reviews by id, preserving dataset order (for split manifests)."""
    wanted = set(ids)
    picked = [r for r in dataset.reviews if r.review_id in wanted]
    if len(picked) != len(wanted):
        missing = wanted - {r.review_id for r in picked}
        raise CorpusError(f"unknown review ids in manifest: {sorted(missing)[:5]}")
    return Dataset.from_reviews(picked)
