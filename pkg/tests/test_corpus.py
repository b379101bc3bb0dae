import json

import numpy as np
import pytest

from recexplain.corpus import (
    CorpusError,
    Dataset,
    Review,
    SplitSpec,
    build_interaction_graph,
    load_reviews,
    split,
    subset_by_ids,
    write_reviews,
    write_split_manifest,
)

from conftest import make_dataset


def write_jsonl(path, records):
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


VALID = [
    {"user_id": "u1", "item_id": "i1", "review": "Great book. Loved it.", "explanation": "likes plots"},
    {"user_id": "u1", "item_id": "i2", "review": "Too long for me."},
    {"user_id": "u2", "item_id": "i1", "review": "Arrived quickly. Nice cover."},
]


class TestLoadReviews:
    def test_counts_and_indexes(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        write_jsonl(path, VALID)
        dataset = load_reviews(path)
        assert len(dataset) == 3
        assert dataset.num_users == 2
        assert dataset.num_items == 2
        assert [r.review_id for r in dataset.reviews] == [1, 2, 3]
        assert dataset.reviews[0].explanation == "likes plots"
        assert dataset.reviews[1].explanation is None

    def test_empty_file(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        path.write_text("")
        with pytest.raises(CorpusError, match="empty dataset"):
            load_reviews(path)

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        records = [VALID[0], {"user_id": "u9", "review": "No item."}, VALID[2]]
        write_jsonl(path, records)
        with pytest.raises(CorpusError, match="line 2.*item_id"):
            load_reviews(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        path.write_text(json.dumps(VALID[0]) + "\n{not json\n")
        with pytest.raises(CorpusError, match="line 2"):
            load_reviews(path)

    def test_blank_review_rejected(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        write_jsonl(path, [{"user_id": "u1", "item_id": "i1", "review": "   "}])
        with pytest.raises(CorpusError, match="line 1.*empty"):
            load_reviews(path)

    def test_duplicate_pair_rejected_by_default(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        write_jsonl(path, [VALID[0], dict(VALID[0], review="Again.")])
        with pytest.raises(CorpusError, match="duplicate"):
            load_reviews(path)

    def test_duplicate_pair_keeps_latest_when_allowed(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        write_jsonl(path, [VALID[0], dict(VALID[0], review="Second thoughts. Hmm.")])
        dataset = load_reviews(path, allow_duplicates=True)
        assert len(dataset) == 1
        assert dataset.reviews[0].text == "Second thoughts. Hmm."
        assert dataset.reviews[0].review_id == 2

    def test_round_trip(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        write_jsonl(path, VALID)
        dataset = load_reviews(path)
        out = tmp_path / "copy.jsonl"
        write_reviews(dataset, out)
        assert load_reviews(out) == dataset


class TestInteractionGraph:
    def test_degrees_from_worked_example(self):
        dataset = make_dataset([("u1", "i1"), ("u1", "i2"), ("u2", "i1")])
        graph = build_interaction_graph(dataset)
        assert graph.user_degrees[graph.user_ordinal("u1")] == 2
        assert graph.user_degrees[graph.user_ordinal("u2")] == 1
        assert graph.item_degrees[graph.item_ordinal("i1")] == 2
        assert graph.item_degrees[graph.item_ordinal("i2")] == 1

    def test_single_edge(self):
        graph = build_interaction_graph(make_dataset([("u", "i")]))
        assert graph.num_edges == 1
        assert graph.user_degrees.tolist() == [1.0]
        assert graph.item_degrees.tolist() == [1.0]

    def test_duplicate_pairs_deduplicated(self):
        reviews = [
            Review(1, "u1", "i1", "First."),
            Review(2, "u1", "i1", "Second."),
            Review(3, "u2", "i1", "Third."),
        ]
        dataset = Dataset.from_reviews(reviews)
        graph = build_interaction_graph(dataset)
        # oracle: set-based edge construction
        expected_edges = {(r.user_id, r.item_id) for r in reviews}
        assert graph.num_edges == len(expected_edges)
        assert graph.user_degrees[graph.user_ordinal("u1")] == 1

    def test_degree_sum_matches_distinct_pairs(self):
        rng = np.random.default_rng(5)
        pairs = [
            (f"u{rng.integers(12)}", f"i{rng.integers(12)}") for _ in range(80)
        ]
        seen = set()
        unique_pairs = [p for p in pairs if not (p in seen or seen.add(p))]
        graph = build_interaction_graph(make_dataset(unique_pairs))
        distinct = len(set(unique_pairs))
        assert graph.user_degrees.sum() == distinct
        assert graph.item_degrees.sum() == distinct

    def test_adjacency_symmetric(self):
        rng = np.random.default_rng(11)
        pairs = list({(f"u{rng.integers(8)}", f"i{rng.integers(8)}") for _ in range(40)})
        graph = build_interaction_graph(make_dataset(sorted(pairs)))
        for u, items in enumerate(graph.user_items):
            for i in items:
                assert u in graph.item_users[i]


class TestSplit:
    def test_deterministic_80_20(self):
        dataset = make_dataset([(f"u{k}", f"i{k}") for k in range(10)])
        spec = SplitSpec(train_fraction=0.8, seed=7)
        train1, test1 = split(dataset, spec)
        train2, test2 = split(dataset, spec)
        assert len(train1) == 8 and len(test1) == 2
        assert train1 == train2 and test1 == test2

    def test_floor_rule_keeps_one_test_review(self):
        dataset = make_dataset([(f"u{k}", f"i{k}") for k in range(10)])
        train, test = split(dataset, SplitSpec(train_fraction=0.99, seed=1))
        # oracle: test = max(1, round(0.01 * 10)) = 1
        assert (len(train), len(test)) == (9, 1)

    def test_tiny_fraction_errors_on_empty_train(self):
        dataset = make_dataset([(f"u{k}", f"i{k}") for k in range(10)])
        with pytest.raises(CorpusError, match="empty train"):
            split(dataset, SplitSpec(train_fraction=0.05, seed=1))

    def test_partitions_disjoint_and_complete(self):
        dataset = make_dataset([(f"u{k}", f"i{k % 7}") for k in range(37)])
        train, test = split(dataset, SplitSpec(train_fraction=0.7, seed=3))
        train_ids = {r.review_id for r in train.reviews}
        test_ids = {r.review_id for r in test.reviews}
        assert not train_ids & test_ids
        assert train_ids | test_ids == {r.review_id for r in dataset.reviews}

    def test_test_reviews_absent_from_train(self):
        dataset = make_dataset([(f"u{k % 5}", f"i{k % 7}") for k in range(30)])
        train, test = split(dataset, SplitSpec(train_fraction=0.8, seed=9))
        train_pairs_text = {(r.user_id, r.item_id, r.text) for r in train.reviews}
        for r in test.reviews:
            assert (r.user_id, r.item_id, r.text) not in train_pairs_text

    def test_invalid_fraction(self):
        with pytest.raises(CorpusError):
            SplitSpec(train_fraction=1.0)
        with pytest.raises(CorpusError):
            SplitSpec(train_fraction=0.0)

    def test_manifest_round_trip(self, tmp_path):
        dataset = make_dataset([(f"u{k}", f"i{k}") for k in range(12)])
        spec = SplitSpec(train_fraction=0.75, seed=21)
        train, test = split(dataset, spec)
        manifest_path = tmp_path / "split.json"
        write_split_manifest(manifest_path, spec, train, test)
        manifest = json.loads(manifest_path.read_text())
        assert manifest["seed"] == 21
        assert subset_by_ids(dataset, manifest["train"]) == train
        assert subset_by_ids(dataset, manifest["test"]) == test
