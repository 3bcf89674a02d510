import numpy as np
import pytest
from hypothesis import given, strategies as st

from flad import nn
from flad.metrics import (SWEEP_COLUMNS, UndefinedROCError, accuracy, auc_pair_oracle,
                          confusion_counts, detection_rate, moving_average, roc_curve,
                          sweep_sensitivity)


@st.composite
def scored_labels(draw):
    n = draw(st.integers(2, 40))
    labels = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    labels[0], labels[1] = True, False
    # a small alphabet forces heavy ties
    scores = draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, 3.0])
                           | st.integers(-500, 500).map(lambda v: v / 100),
                           min_size=n, max_size=n))
    return scores, labels


class TestRoc:
    def test_perfect(self):
        assert roc_curve([0.9, 0.8, 0.1, 0.4], [1, 1, 0, 0]).auc == 1.0

    def test_three_of_four_pairs(self):
        assert roc_curve([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0]).auc == pytest.approx(0.75)
        assert auc_pair_oracle([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75)

    def test_all_ties(self):
        assert auc_pair_oracle([1, 1, 1], [1, 0, 0]) == 0.5
        assert roc_curve([1, 1, 1], [1, 0, 0]).auc == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedROCError):
            roc_curve([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedROCError):
            auc_pair_oracle([0.1, 0.2], [0, 0])

    @given(scored_labels())
    def test_invariants(self, case):
        scores, labels = case
        curve = roc_curve(scores, labels)
        assert abs(curve.auc - auc_pair_oracle(scores, labels)) < 1e-9
        assert 0 <= curve.auc <= 1
        assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
        flipped = roc_curve(scores, [not y for y in labels]).auc
        assert flipped == pytest.approx(1 - curve.auc, abs=1e-12)
        monotone = roc_curve(np.exp(np.asarray(scores) / 2), labels).auc
        assert monotone == pytest.approx(curve.auc, abs=1e-12)


class TestCounts:
    def test_counts_and_rates(self):
        flags = [1, 1, 0, 0, 1]
        truth = [1, 0, 1, 0, 1]
        c = confusion_counts(flags, truth)
        assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)
        assert detection_rate(flags, truth) == pytest.approx(2 / 3)
        assert c.fpr == 0.5 and c.total == 5

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
    def test_partition_identities(self, pairs):
        flags, truth = zip(*pairs)
        c = confusion_counts(flags, truth)
        assert c.tp + c.fn == sum(truth)
        assert c.fp + c.tn == len(truth) - sum(truth)

    def test_accuracy_argmax(self):
        cfg = nn.MlpConfig((2, 2), output_head="linear")
        model = nn.Model(cfg, np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        # the tie in the last row resolves to class 0
        assert accuracy(model, x, [0, 1, 0]) == 1.0


class TestMovingAverage:
    def test_identity_and_edges(self):
        assert moving_average([1.0, 5.0, 2.0], 1) == [1.0, 5.0, 2.0]
        assert moving_average([1.0, 2.0, 3.0, 4.0, 5.0], 3) == [1.5, 2.0, 3.0, 4.0, 4.5]
        with pytest.raises(ValueError):
            moving_average([1.0], 0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.integers(1, 9))
    def test_bounds(self, series, window):
        out = moving_average(series, window)
        assert len(out) == len(series)
        half = window // 2
        for i, v in enumerate(out):
            seg = series[max(0, i - half):i + half + 1]
            assert min(seg) - 1e-9 <= v <= max(seg) + 1e-9

    @given(st.floats(-10, 10), st.integers(1, 20), st.integers(1, 9))
    def test_constant(self, c, n, window):
        assert all(v == pytest.approx(c) for v in moving_average([c] * n, window))


class TestSweep:
    def test_row_accounting(self):
        def run(sf, seed):
            return {col: sf * 10 + seed for col in SWEEP_COLUMNS}

        res = sweep_sensitivity(run, [0.5, 1, 2, 3], range(5))
        assert len(res.rows) == 4 and len(res.raw) == 20
        assert res.column("final_accuracy") == [7.0, 12.0, 22.0, 32.0]

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            sweep_sensitivity(lambda sf, s: {}, [], [0])
