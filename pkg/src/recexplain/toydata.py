"""Deterministic toy review corpus for smoke runs and the mock pipeline.

Items belong to themed genres and reviews mention genre aspects, so the
hash-based mock embedder produces meaningful clusters. Ground-truth
explanations are phrased differently from any review text and carry a
pair-specific tag, which keeps the prompt leakage check honest.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

GENRES = [
    ("mystery", ["twisty plots", "tense pacing", "clever detectives", "late reveals"]),
    ("romance", ["emotional depth", "warm characters", "satisfying endings", "slow burns"]),
    ("scifi", ["bold worldbuilding", "crisp prose", "big ideas", "strange tech"]),
    ("history", ["rich detail", "careful sourcing", "vivid settings", "long arcs"]),
    ("cooking", ["clear recipes", "bright photos", "pantry staples", "quick meals"]),
]

REVIEW_SHAPES = [
    "Really enjoyed the {a} in this {g} pick. The {b} kept me hooked.",
    "Solid {g} choice with {a}. Could use less of the {b} though.",
    "The {a} stood out immediately. Classic {g} done right.",
    "Not perfect, but the {a} and {b} make this {g} title worth it.",
]

EXPLANATION_SHAPES = [
    "The user would enjoy this {g} item because they consistently favor {a} (case {tag}).",
    "A match driven by the user's taste for {a} within {g} titles (case {tag}).",
    "Recommended since the {g} catalog entry delivers the {a} this user seeks (case {tag}).",
]


def write_toy_corpus(
    path: str | Path,
    n_users: int = 50,
    n_items: int = 50,
    reviews_per_user: int = 4,
    seed: int = 1234,
) -> int:
    """Write the JSON-lines corpus; returns the number of reviews written."""
    rng = np.random.default_rng(seed)
    item_genre = {f"i{j:03d}": GENRES[j % len(GENRES)] for j in range(n_items)}
    item_ids = sorted(item_genre)
    records = []
    used_pairs = set()
    for u in range(n_users):
        user_id = f"u{u:03d}"
        # users lean toward two genres, mirroring stable preferences
        favored = [GENRES[u % len(GENRES)][0], GENRES[(u + 2) % len(GENRES)][0]]
        candidates = [i for i in item_ids if item_genre[i][0] in favored]
        extra = [i for i in item_ids if i not in candidates]
        picks = list(rng.choice(candidates, size=min(reviews_per_user - 1, len(candidates)), replace=False))
        picks += [extra[int(rng.integers(len(extra)))]]
        for item_id in picks:
            if (user_id, item_id) in used_pairs:
                continue
            used_pairs.add((user_id, item_id))
            genre, aspects = item_genre[item_id]
            a, b = rng.choice(aspects, size=2, replace=False)
            shape = REVIEW_SHAPES[int(rng.integers(len(REVIEW_SHAPES)))]
            review = shape.format(a=a, b=b, g=genre)
            explanation_shape = EXPLANATION_SHAPES[int(rng.integers(len(EXPLANATION_SHAPES)))]
            explanation = explanation_shape.format(
                a=a, g=genre, tag=f"{user_id}-{item_id}"
            )
            records.append(
                {
                    "user_id": user_id,
                    "item_id": item_id,
                    "review": review,
                    "explanation": explanation,
                }
            )
    # make sure every item has at least one review
    covered = {r["item_id"] for r in records}
    for item_id in item_ids:
        if item_id in covered:
            continue
        user_id = f"u{int(rng.integers(n_users)):03d}"
        if (user_id, item_id) in used_pairs:
            continue
        used_pairs.add((user_id, item_id))
        genre, aspects = item_genre[item_id]
        a, b = rng.choice(aspects, size=2, replace=False)
        records.append(
            {
                "user_id": user_id,
                "item_id": item_id,
                "review": REVIEW_SHAPES[0].format(a=a, b=b, g=genre),
                "explanation": EXPLANATION_SHAPES[0].format(
                    a=a, g=genre, tag=f"{user_id}-{item_id}"
                ),
            }
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    return len(records)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write the deterministic toy review corpus.")
    parser.add_argument("out", help="output JSON-lines path")
    parser.add_argument("--users", type=int, default=50)
    parser.add_argument("--items", type=int, default=50)
    parser.add_argument("--reviews-per-user", type=int, default=4)
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args(argv)
    count = write_toy_corpus(
        args.out, args.users, args.items, args.reviews_per_user, args.seed
    )
    print(f"wrote {count} reviews to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
