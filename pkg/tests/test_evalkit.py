from dataclasses import dataclass

import numpy as np
import pytest

from recexplain.evalkit import (
    EvalError,
    SampleScores,
    aggregate,
    bertscore,
    judge_score,
    score_pairs,
)
from recexplain.mocks import HashTokenEmbedder, LengthRatioJudge
from recexplain.ports import TransportError
from recexplain.retrieval import unit_rows

from oracles import bertscore_loops, two_pass_mean_std


class TestBertscore:
    def test_identical_sequences_score_one(self):
        vectors, _ = unit_rows(np.random.default_rng(0).standard_normal((5, 8)))
        p, r, f1 = bertscore(vectors, vectors.copy())
        assert p == pytest.approx(1.0, abs=1e-6)
        assert r == pytest.approx(1.0, abs=1e-6)
        assert f1 == pytest.approx(1.0, abs=1e-6)

    def test_two_vs_one_token_example(self):
        ref = np.array([[1.0, 0.0], [0.0, 1.0]])
        cand = np.array([[1.0, 0.0]])
        p, r, f1 = bertscore(ref, cand)
        assert p == pytest.approx(0.5, abs=1e-12)
        assert r == pytest.approx(1.0, abs=1e-12)
        assert f1 == pytest.approx(0.6667, abs=1e-4)

    def test_orthogonal_sequences_score_zero(self):
        ref = np.array([[1.0, 0.0, 0.0]])
        cand = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert bertscore(ref, cand) == (0.0, 0.0, 0.0)

    def test_matches_loop_oracle_on_random_cases(self):
        rng = np.random.default_rng(123)
        for _ in range(500):
            ref, _ = unit_rows(rng.standard_normal((int(rng.integers(1, 7)), 6)))
            cand, _ = unit_rows(rng.standard_normal((int(rng.integers(1, 7)), 6)))
            got = bertscore(ref, cand)
            want = bertscore_loops(ref, cand)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_swap_exchanges_p_and_r(self):
        rng = np.random.default_rng(9)
        ref, _ = unit_rows(rng.standard_normal((4, 5)))
        cand, _ = unit_rows(rng.standard_normal((3, 5)))
        p, r, f1 = bertscore(ref, cand)
        p_swapped, r_swapped, f1_swapped = bertscore(cand, ref)
        assert p_swapped == pytest.approx(r, abs=1e-12)
        assert r_swapped == pytest.approx(p, abs=1e-12)
        assert f1_swapped == pytest.approx(f1, abs=1e-12)

    def test_standard_orientation_flag_swaps_sides(self):
        rng = np.random.default_rng(13)
        ref, _ = unit_rows(rng.standard_normal((4, 5)))
        cand, _ = unit_rows(rng.standard_normal((2, 5)))
        p, r, _ = bertscore(ref, cand)
        p_std, r_std, _ = bertscore(ref, cand, standard_orientation=True)
        assert (p_std, r_std) == (r, p)

    def test_bounds_and_f1_between_p_and_r(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            ref, _ = unit_rows(rng.standard_normal((int(rng.integers(1, 5)), 4)))
            cand, _ = unit_rows(rng.standard_normal((int(rng.integers(1, 5)), 4)))
            p, r, f1 = bertscore(ref, cand)
            assert -1.0 - 1e-12 <= p <= 1.0 + 1e-12
            assert -1.0 - 1e-12 <= r <= 1.0 + 1e-12
            if p > 0 and r > 0:
                assert min(p, r) - 1e-12 <= f1 <= max(p, r) + 1e-12
            clipped = bertscore(ref, cand, clip_negative=True)
            assert all(0.0 <= v <= 1.0 + 1e-12 for v in clipped)

    def test_empty_sequence_rejected(self):
        with pytest.raises(EvalError, match="non-empty"):
            bertscore(np.empty((0, 4)), np.ones((1, 4)))

    def test_width_mismatch_rejected(self):
        with pytest.raises(EvalError, match="widths differ"):
            bertscore(np.ones((1, 4)), np.ones((1, 5)))


@dataclass
class FlakyJudge:
    failures: int
    attempts: int = 0

    def score(self, instruction, reference, candidate):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise TransportError("overloaded")
        return 65.0


@dataclass
class BadJudge:
    value: float

    def score(self, instruction, reference, candidate):
        return self.value


class TestJudgeScore:
    def test_length_ratio_mock_is_deterministic(self):
        judge = LengthRatioJudge()
        a = judge_score(judge, "reference text here", "candidate", "rate it")
        b = judge_score(judge, "reference text here", "candidate", "rate it")
        assert a == b
        assert 0.0 <= a <= 100.0

    def test_echoed_candidate_scores_100(self):
        judge = LengthRatioJudge()
        text = "the user would enjoy the ambiance"
        assert judge_score(judge, text, text, "rate it") == 100.0

    def test_out_of_range_rejected(self):
        with pytest.raises(EvalError, match="outside"):
            judge_score(BadJudge(120.0), "ref", "cand", "rate it")
        with pytest.raises(EvalError, match="outside"):
            judge_score(BadJudge(-5.0), "ref", "cand", "rate it")

    def test_transport_failures_retried(self):
        judge = FlakyJudge(failures=2)
        value = judge_score(judge, "ref", "cand", "rate", retries=3, backoff=0.0)
        assert value == 65.0
        assert judge.attempts == 3

    def test_retries_exhausted(self):
        with pytest.raises(EvalError, match="failed after 2"):
            judge_score(FlakyJudge(failures=9), "ref", "cand", "rate",
                        retries=1, backoff=0.0)

    def test_empty_texts_rejected(self):
        with pytest.raises(EvalError, match="non-empty"):
            judge_score(LengthRatioJudge(), "", "cand", "rate")


class TestAggregate:
    def test_all_equal_scores_have_zero_std(self):
        samples = [SampleScores(0.5, 0.5, 0.5, 80.0)] * 4
        report = aggregate(samples)
        assert report.bert_p.std == 0.0
        assert report.judge.std == 0.0
        assert report.n == 4

    def test_two_point_symmetric(self):
        samples = [SampleScores(0.0, 0.0, 0.0, 0.0), SampleScores(1.0, 1.0, 1.0, 100.0)]
        report = aggregate(samples)
        assert report.judge.mean == pytest.approx(50.0)
        assert report.judge.std == pytest.approx(50.0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(31)
        values = rng.random(100).tolist()
        judges = (rng.random(100) * 100).tolist()
        samples = [
            SampleScores(v, v / 2, v / 3, j) for v, j in zip(values, judges)
        ]
        report = aggregate(samples)
        mean, std = two_pass_mean_std(values)
        assert report.bert_p.mean == pytest.approx(mean, abs=1e-9)
        assert report.bert_p.std == pytest.approx(std, abs=1e-9)
        jmean, jstd = two_pass_mean_std(judges)
        assert report.judge.mean == pytest.approx(jmean, abs=1e-9)
        assert report.judge.std == pytest.approx(jstd, abs=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        samples = [
            SampleScores(float(v), float(v), float(v), None) for v in rng.random(20)
        ]
        a = aggregate(samples)
        b = aggregate(list(reversed(samples)))
        assert a.bert_p.mean == b.bert_p.mean
        assert a.bert_f1.std == b.bert_f1.std

    def test_consistency_of_report_with_samples(self):
        rng = np.random.default_rng(17)
        samples = [
            SampleScores(float(p), float(r), float(f), float(j))
            for p, r, f, j in rng.random((50, 4))
        ]
        report = aggregate(samples)
        stored = np.array([s.bert_r for s in report.samples])
        assert abs(stored.mean() - report.bert_r.mean) < 1e-9
        assert abs(stored.std() - report.bert_r.std) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(EvalError, match="at least one"):
            aggregate([])

    def test_report_json_schema(self, tmp_path):
        import json

        report = aggregate([SampleScores(0.4, 0.5, 0.44, 70.0)])
        path = tmp_path / "report.json"
        report.write(path)
        data = json.loads(path.read_text())
        assert data["n"] == 1
        for key in ("bert_p", "bert_r", "bert_f1", "judge"):
            assert set(data[key]) == {"mean", "std"}
        assert data["samples"][0]["bert_f1"] == 0.44


class TestScorePairs:
    def test_end_to_end_with_mocks(self):
        refs = ["the user liked the plot and pacing", "great for fans of thrillers"]
        cands = ["the user liked the plot", "great for fans of thrillers"]
        report = score_pairs(refs, cands, HashTokenEmbedder(dim=16), LengthRatioJudge(), "rate")
        assert report.n == 2
        assert report.samples[1].bert_f1 == pytest.approx(1.0, abs=1e-6)
        assert report.samples[1].judge == 100.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(EvalError, match="references vs"):
            score_pairs(["a"], [], HashTokenEmbedder())
