import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from recexplain.corpus import Dataset, Review, build_interaction_graph


def make_dataset(pairs, texts=None, explanations=None):
    """Dataset from (user, item) pairs with auto-generated texts."""
    reviews = []
    for k, (user, item) in enumerate(pairs):
        text = texts[k] if texts else f"Review {k} of {item} by {user}. More detail here."
        explanation = explanations[k] if explanations else None
        reviews.append(
            Review(
                review_id=k + 1,
                user_id=user,
                item_id=item,
                text=text,
                explanation=explanation,
            )
        )
    return Dataset.from_reviews(reviews)


@pytest.fixture
def small_graph():
    """The worked three-edge example: u1-{i1,i2}, u2-{i1}."""
    dataset = make_dataset([("u1", "i1"), ("u1", "i2"), ("u2", "i1")])
    return build_interaction_graph(dataset)
