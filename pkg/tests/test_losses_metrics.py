import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from jointseg.autodiff import Tensor, Tape
from jointseg.errors import ContractError
from jointseg.geometry import LabeledVolume, VolumeSpec
from jointseg.losses import (
    class_weights,
    completion_loss,
    seg_loss,
    uncertainty_closed_form,
    uncertainty_loss,
    weighted_ce,
)
from jointseg.metrics import (
    ConfusionMatrix,
    format_keyvalue,
    format_report,
    sc_metrics,
    seg_miou,
    ssc_miou,
)


def s_of(sigma):
    return 2 * math.log(sigma)


class TestWeightedCE:
    def test_uniform_two_class(self):
        assert weighted_ce(np.zeros((1, 2)), [1], np.ones(2)).item() == pytest.approx(math.log(2), rel=1e-15)

    def test_large_margin_tends_to_zero(self):
        vals = [weighted_ce(np.array([[m, 0.0]]), [0], np.ones(2)).item() for m in (1, 10, 40)]
        assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-15

    def test_hand_three_elements(self):
        l3 = math.log(3)
        logits = np.array([[0.0, 0.0], [0.0, l3], [l3, 0.0]])
        got = weighted_ce(logits, [0, 1, 1], [1.0, 2.0]).item()
        # nll = ln 2, ln 4/3, ln 4 with weights 1, 2, 2
        assert got == pytest.approx((math.log(2) + 2 * math.log(4 / 3) + 2 * math.log(4)) / 3, rel=1e-14)

    def test_ignore_and_all_ignored(self):
        logits = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        assert seg_loss(logits, [0, 2], np.ones(3)).item() == pytest.approx(5 + math.log(1 + 2 * math.exp(-5)))
        with pytest.raises(ContractError):
            seg_loss(logits, [0, 0], np.ones(3))
        with pytest.raises(ContractError):
            completion_loss(logits, [255, 255], np.ones(3))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ContractError):
            weighted_ce(np.zeros((2, 2)), [0, 2], np.ones(2))
        with pytest.raises(ContractError):
            weighted_ce(np.zeros((2, 2)), [0, 1], np.array([1.0, 0.0]))

    def test_gradients(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            t = r.integers(0, 4, size=9)
            t[0] = 255
            w = r.uniform(0.5, 2, size=4)
            err = check_gradients(lambda z: completion_loss(z, t, w), [r.normal(size=(9, 4))])
            assert err < 1e-6


class TestUncertaintyLoss:
    def test_unit_sigmas_half_sum(self):
        for a, b in [(0.5, 2.0), (1.3, 0.0), (0.0, 0.0), (7.25, 3.5)]:
            assert uncertainty_loss(a, b, np.array([0.0]), np.array([0.0])).item() == 0.5 * a + 0.5 * b

    def test_substitution_example(self):
        got = uncertainty_loss(0.5, 2.0, np.array([0.0]), np.array([s_of(2.0)])).item()
        assert got == pytest.approx(0.5 + math.log(2), abs=1e-12)
        assert round(got, 4) == 1.1931

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5), st.floats(0.1, 5))
    @settings(max_examples=200)
    def test_closed_form(self, a, b, s1, s2):
        got = uncertainty_loss(a, b, np.array([s_of(s1)]), np.array([s_of(s2)])).item()
        assert got == pytest.approx(uncertainty_closed_form(a, b, s1, s2), rel=1e-12, abs=1e-12)

    def test_sigma_derivative(self, rng):
        for _ in range(20):
            a, b = rng.uniform(0, 3, size=2)
            sig = rng.uniform(0.3, 3, size=2)
            s1, s2 = Tensor(np.array([s_of(sig[0])]), True), Tensor(np.array([s_of(sig[1])]), True)
            with Tape() as tape:
                tape.backward(uncertainty_loss(a, b, s1, s2))
            # chain rule through sigma = exp(s / 2)
            for grad_s, loss, sg in ((s1.grad[0], a, sig[0]), (s2.grad[0], b, sig[1])):
                analytic = -loss / sg ** 3 + 1 / sg
                assert grad_s * 2 / sg == pytest.approx(analytic, rel=1e-12, abs=1e-12)
            h = 1e-6
            fd = (uncertainty_closed_form(a, b, sig[0] + h, sig[1])
                  - uncertainty_closed_form(a, b, sig[0] - h, sig[1])) / (2 * h)
            assert fd == pytest.approx(-a / sig[0] ** 3 + 1 / sig[0], abs=1e-6)

    def test_task_loss_gradients(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            err = check_gradients(lambda a, b, s1, s2: uncertainty_loss(a, b, s1, s2),
                                  [np.array(r.uniform(0, 2)), np.array(r.uniform(0, 2)),
                                   r.normal(size=1), r.normal(size=1)])
            assert err < 1e-6

    @pytest.mark.parametrize("target", [0.5, 2.0, 0.05])
    def test_descent_reaches_stationary_point(self, target):
        s = Tensor(np.array([0.0]), True)
        for _ in range(500):
            s.grad = None
            with Tape() as tape:
                tape.backward(uncertainty_loss(target, 0.0, s, np.array([0.0])))
            s.data = s.data - 0.5 * s.grad
        assert abs(math.exp(s.data[0]) - target) < 1e-3


class TestClassWeights:
    def test_inverse_sqrt(self):
        np.testing.assert_allclose(class_weights([1, 4]), [4 / 3, 2 / 3], rtol=1e-14)

    def test_unseen_class_is_finite(self):
        w = class_weights([0, 100, 100])
        assert np.all(np.isfinite(w)) and w[0] > w[1] == w[2]
        assert w.mean() == pytest.approx(1.0)


class TestSegMetrics:
    def test_hand_confusion(self):
        res = seg_miou(np.array([1, 2, 2, 2]), np.array([1, 1, 2, 2]), 2)
        assert res.per_class == {1: 0.5, 2: float(Fraction(2, 3))}
        assert res.miou == float(Fraction(7, 12))

    def test_perfect_prediction(self, rng):
        t = rng.integers(1, 5, size=50)
        assert seg_miou(t, t, 4).miou == 1.0

    def test_absent_class_excluded(self):
        res = seg_miou(np.array([1, 1]), np.array([1, 1]), 3)
        assert res.per_class[2] is None and res.per_class[3] is None
        assert res.miou == 1.0

    def test_label_zero_ignored(self):
        cm = ConfusionMatrix(2).update([0, 1, 2], [2, 1, 2], valid=np.array([False, True, True]))
        assert cm.ignored == 1 and cm.total == 3
        assert seg_miou(np.array([2, 1, 2]), np.array([0, 1, 2]), 2).miou == 1.0

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60), st.randoms())
    @settings(max_examples=100)
    def test_permutation_invariant_and_bounded(self, pairs, rnd):
        t, p = map(np.array, zip(*pairs))
        a = seg_miou(p, t, 3)
        perm = list(range(len(t)))
        rnd.shuffle(perm)
        b = seg_miou(p[perm], t[perm], 3)
        assert (a.miou == b.miou) or (math.isnan(a.miou) and math.isnan(b.miou))
        assert math.isnan(a.miou) or 0.0 <= a.miou <= 1.0

    @given(st.lists(st.integers(0, 3), min_size=3, max_size=30), st.integers(0, 2 ** 31))
    @settings(max_examples=50)
    def test_merge_matches_single_pass(self, truth, seed):
        r = np.random.default_rng(seed)
        t = np.array(truth)
        p = r.integers(0, 4, size=len(t))
        cut1, cut2 = sorted(r.integers(0, len(t) + 1, size=2))
        parts = [ConfusionMatrix(3).update(t[a:b], p[a:b]) for a, b in ((0, cut1), (cut1, cut2), (cut2, len(t)))]
        whole = ConfusionMatrix(3).update(t, p)
        np.testing.assert_array_equal(((parts[0] + parts[1]) + parts[2]).counts, whole.counts)
        np.testing.assert_array_equal((parts[2] + (parts[1] + parts[0])).counts, whole.counts)


class TestCompletionMetrics:
    spec = VolumeSpec((0.0, 0.0, 0.0), 1.0, (5, 1, 1))

    def vol(self, labels):
        return LabeledVolume(self.spec, np.array(labels, dtype=np.uint8).reshape(5, 1, 1))

    def test_set_example(self):
        # cells a, b, c, d, e; prediction occupies a b c, truth occupies b c d
        res = sc_metrics(self.vol([1, 2, 1, 0, 0]), self.vol([0, 1, 1, 3, 0]))
        assert (res.precision, res.recall, res.iou) == (float(Fraction(2, 3)), float(Fraction(2, 3)), 0.5)

    def test_identity(self):
        v = self.vol([1, 0, 2, 255, 1])
        res = sc_metrics(v, v)
        assert (res.precision, res.recall, res.iou) == (1.0, 1.0, 1.0)
        assert ssc_miou(v, v, 2).miou == 1.0

    def test_one_mislabeled_voxel(self):
        res = ssc_miou(self.vol([1, 2, 2, 2, 0]), self.vol([1, 1, 2, 2, 0]), 2)
        assert res.per_class == {1: 0.5, 2: float(Fraction(2, 3))}
        assert res.miou == float(Fraction(7, 12))

    def test_all_empty_prediction(self):
        res = ssc_miou(self.vol([0] * 5), self.vol([1, 2, 0, 1, 0]), 2)
        assert res.per_class == {1: 0.0, 2: 0.0}

    def test_invalid_cells_ignored(self):
        a = ssc_miou(self.vol([1, 2, 0, 0, 0]), self.vol([1, 255, 0, 0, 0]), 2)
        b = ssc_miou(self.vol([1, 0, 0, 0, 0]), self.vol([1, 255, 0, 0, 0]), 2)
        assert a.miou == b.miou == 1.0
        cm = sc_metrics(self.vol([1, 2, 0, 0, 0]), self.vol([1, 255, 0, 0, 0]))
        assert cm.precision == 1.0

    def test_sc_from_matrix_matches_direct(self, rng):
        from jointseg.metrics import ssc_confusion
        p = LabeledVolume(self.spec, rng.integers(0, 3, size=(5, 1, 1)).astype(np.uint8))
        g = LabeledVolume(self.spec, rng.integers(0, 3, size=(5, 1, 1)).astype(np.uint8))
        assert sc_metrics(p, g) == sc_metrics(None, None, cm=ssc_confusion(p, g, 2))

    def test_spec_mismatch(self):
        other = LabeledVolume(VolumeSpec((1.0, 0.0, 0.0), 1.0, (5, 1, 1)), np.zeros((5, 1, 1), np.uint8))
        with pytest.raises(ContractError):
            sc_metrics(self.vol([0] * 5), other)
        with pytest.raises(ContractError):
            ssc_miou(self.vol([0] * 5), other, 2)


def test_report_formats():
    values = {"seg.miou": 0.5, "seg.iou.2": None, "count": 3}
    assert format_keyvalue(values) == "seg.miou = 0.5\nseg.iou.2 = absent\ncount = 3\n"
    assert format_report(values).splitlines()[1].split() == ["seg.miou", "0.5"]
