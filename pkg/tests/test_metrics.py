"""Metric oracles: AP / mAP and F1 against brute-force formula evaluation."""

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repblend.diagnostics import counters
from repblend.metrics import (
    EvalReport,
    aggregate_proportions,
    average_precision,
    f1_measures,
    mean_average_precision,
    write_report_csv,
    write_report_json,
)


def ap_oracle(scores, targets):
    """Rank-accumulation AP via explicit pairwise rank counting."""
    n = len(scores)
    # rank of i = 1 + number of items strictly ahead under (score desc, index asc)
    ranks = []
    for i in range(n):
        ahead = sum(
            1
            for j in range(n)
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i)
        )
        ranks.append(ahead + 1)
    positives = [i for i in range(n) if targets[i] == 1]
    total = 0.0
    for i in positives:
        hits_at_rank = sum(1 for j in positives if ranks[j] <= ranks[i])
        total += hits_at_rank / ranks[i]
    return total / len(positives)


def f1_oracle(scores, targets, threshold=0.5):
    """Direct evaluation of the overall / per-class F1 definitions."""
    pred = scores >= threshold
    gt = targets == 1
    n, c = scores.shape
    nc = [sum(pred[i][j] and gt[i][j] for i in range(n)) for j in range(c)]
    npred = [sum(pred[i][j] for i in range(n)) for j in range(c)]
    ngt = [sum(gt[i][j] for i in range(n)) for j in range(c)]
    op = sum(nc) / sum(npred) if sum(npred) else 0.0
    orec = sum(nc) / sum(ngt) if sum(ngt) else 0.0
    cp = sum(nc[j] / npred[j] if npred[j] else 0.0 for j in range(c)) / c
    cr = sum(nc[j] / ngt[j] if ngt[j] else 0.0 for j in range(c)) / c
    f1 = lambda p, r: 2 * p * r / (p + r) if p + r else 0.0
    return op, orec, cp, cr, f1(op, orec), f1(cp, cr)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_ranked_last(self):
        assert average_precision([0.9, 0.8], [0, 1]) == 0.5

    def test_hand_rank_accumulation(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)

    def test_ties_break_by_original_index(self):
        # identical scores: item 0 ranks first, so gt (1, 0) is perfect
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    def test_no_positive_rejected(self):
        with pytest.raises(ValueError):
            average_precision([0.1, 0.2], [0, 0])

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = rng.integers(1, 17)
            scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)  # force ties
            targets = rng.integers(0, 2, size=n)
            if targets.sum() == 0:
                targets[rng.integers(0, n)] = 1
            got = average_precision(scores, targets)
            assert got == pytest.approx(ap_oracle(list(scores), list(targets)), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from(["exp", "affine", "cube"]))
    def test_invariant_to_monotone_transforms(self, seed, kind):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 20))
        scores = rng.random(n)
        targets = rng.integers(0, 2, size=n)
        if targets.sum() == 0:
            targets[0] = 1
        transform = {
            "exp": np.exp,
            "affine": lambda x: 3.0 * x + 2.0,
            "cube": lambda x: x**3,
        }[kind]
        base = average_precision(scores, targets)
        assert average_precision(transform(scores), targets) == pytest.approx(base, abs=1e-12)


class TestMeanAveragePrecision:
    def test_excludes_empty_categories(self):
        counters.reset("map.empty_category")
        scores = np.array([[0.9, 0.1], [0.2, 0.8]])
        targets = np.array([[1, 0], [0, 0]])  # category 1 has no positive
        m, per_cat = mean_average_precision(scores, targets)
        assert per_cat[1] is None
        assert m == per_cat[0] == 1.0
        assert counters.count("map.empty_category") == 1

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_average_precision(np.zeros((2, 2)), np.zeros((2, 2)))


class TestF1Measures:
    def test_perfect_predictions(self):
        gt = np.array([[1, 0], [0, 1], [1, 1]])
        scores = gt.astype(float)
        f1 = f1_measures(scores, gt)
        assert f1.of1 == 1.0 and f1.cf1 == 1.0

    def test_no_predicted_positives(self):
        gt = np.array([[1, 0], [0, 1]])
        f1 = f1_measures(np.zeros((2, 2)), gt)
        assert f1.of1 == 0.0 and f1.cf1 == 0.0

    def test_hand_case(self):
        gt = np.array([[1, 0], [1, 1]])
        scores = np.array([[0.9, 0.7], [0.2, 0.8]])  # predictions [[1,1],[0,1]]
        f1 = f1_measures(scores, gt)
        assert f1.overall_precision == pytest.approx(2 / 3)
        assert f1.overall_recall == pytest.approx(2 / 3)
        assert f1.of1 == pytest.approx(2 / 3)
        assert f1.per_class_precision == pytest.approx(3 / 4)
        assert f1.per_class_recall == pytest.approx(3 / 4)
        assert f1.cf1 == pytest.approx(3 / 4)

    def test_threshold_is_inclusive(self):
        gt = np.array([[1]])
        assert f1_measures(np.array([[0.5]]), gt).of1 == 1.0

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2])
    def test_threshold_range_enforced(self, threshold):
        with pytest.raises(ValueError):
            f1_measures(np.zeros((1, 1)), np.zeros((1, 1)), threshold=threshold)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n, c = int(rng.integers(1, 17)), int(rng.integers(1, 9))
            scores = rng.random((n, c))
            targets = rng.integers(0, 2, size=(n, c))
            got = f1_measures(scores, targets)
            op, orec, cp, cr, of1, cf1 = f1_oracle(scores, targets)
            for a, b in [
                (got.overall_precision, op),
                (got.overall_recall, orec),
                (got.per_class_precision, cp),
                (got.per_class_recall, cr),
                (got.of1, of1),
                (got.cf1, cf1),
            ]:
                assert a == pytest.approx(b, abs=1e-9)

    def test_image_axis_permutation_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.random((10, 5))
        targets = rng.integers(0, 2, size=(10, 5))
        perm = rng.permutation(10)
        assert f1_measures(scores, targets) == f1_measures(scores[perm], targets[perm])

    def test_category_axis_permutation_keeps_cf1(self):
        rng = np.random.default_rng(3)
        scores = rng.random((10, 5))
        targets = rng.integers(0, 2, size=(10, 5))
        perm = rng.permutation(5)
        a = f1_measures(scores, targets)
        b = f1_measures(scores[:, perm], targets[:, perm])
        assert a.cf1 == pytest.approx(b.cf1, abs=1e-12)
        assert a.of1 == pytest.approx(b.of1, abs=1e-12)


class TestAggregation:
    def make(self, p, m):
        return EvalReport(proportion=p, mean_ap=m, of1=m, cf1=m, per_category_ap=[m])

    def test_single_report(self):
        agg = aggregate_proportions([self.make(0.5, 0.7)])
        assert agg.mean_ap == 0.7 and agg.proportions == [0.5]

    def test_two_report_mean(self):
        agg = aggregate_proportions([self.make(0.1, 0.4), self.make(0.9, 0.6)])
        assert agg.mean_ap == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_proportions([])

    def test_nine_proportion_layout(self, tmp_path):
        reports = [self.make(p / 10, 0.5 + p / 100) for p in range(1, 10)]
        csv_path = tmp_path / "report.csv"
        json_path = tmp_path / "report.json"
        write_report_csv(reports, csv_path)
        write_report_json(reports, json_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["proportion", "mAP", "OF1", "CF1"]
        assert len(rows) == 1 + 9 + 1  # header, nine proportions, averages row
        assert rows[-1][0] == "average"
        doc = json.loads(json_path.read_text())
        assert len(doc["per_proportion"]) == 9
        assert doc["average"]["mAP"] == pytest.approx(
            np.mean([r.mean_ap for r in reports])
        )
