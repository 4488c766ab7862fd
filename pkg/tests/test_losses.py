import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskexplain.losses import (
    LossConfig,
    LossNanError,
    area_bound_penalty,
    area_loss,
    classification_loss,
    explainer_loss,
    explainer_loss_batch,
    negative_entropy_loss,
    smoothness_loss,
    total_variation,
)
from maskexplain.masks import aggregate_nontarget_mask, aggregate_target_mask

from conftest import make_fixed_classifier, make_linear_classifier

unit_floats = st.floats(0.0, 1.0, width=32, allow_nan=False)


def tv_oracle(x: torch.Tensor) -> float:
    """Double loop over neighbor pairs fully inside the mask."""
    h, w = x.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            if i + 1 < h:
                total += abs(float(x[i, j]) - float(x[i + 1, j]))
            if j + 1 < w:
                total += abs(float(x[i, j]) - float(x[i, j + 1]))
    return total / (h * w)


def bound_oracle(values, area_min, area_max) -> float:
    """Direct evaluation of the sorted-vector penalty."""
    q = sorted((float(v) for v in values), reverse=True)
    z = len(q)
    q_min = [1.0] * int(z * area_min) + [0.0] * (z - int(z * area_min))
    q_max = [1.0] * int(z * area_max) + [0.0] * (z - int(z * area_max))
    t1 = sum(max(a - b, 0.0) for a, b in zip(q_min, q))
    t2 = sum(max(b - a, 0.0) for a, b in zip(q_max, q))
    return (t1 + t2) / z


class TestLossConfig:
    def test_defaults_valid(self):
        cfg = LossConfig()
        assert 0 < cfg.area_min < cfg.area_max < 1

    @pytest.mark.parametrize("bounds", [(0.5, 0.5), (0.6, 0.4), (0.0, 0.5), (0.3, 1.0)])
    def test_bad_area_bounds_rejected(self, bounds):
        with pytest.raises(ValueError):
            LossConfig(area_min=bounds[0], area_max=bounds[1])

    @pytest.mark.parametrize("eps", [0.0, -1e-9, 2e-3])
    def test_bad_clamp_rejected(self, eps):
        with pytest.raises(ValueError):
            LossConfig(prob_clamp=eps)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(lambda_area=-0.1)


class TestClassificationLoss:
    def test_perfect_prediction_near_zero(self):
        p = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        v = float(classification_loss(p, {0, 2}))
        assert 0.0 <= v <= 3 * 1e-7 * 2  # clamp effect only

    def test_symmetric_uncertainty(self):
        p = torch.tensor([0.5, 0.5], dtype=torch.float64)
        assert float(classification_loss(p, {0})) == pytest.approx(0.6931471805599453, abs=1e-9)

    def test_frozen_scalar_oracle_value(self):
        # -(ln 0.9 + ln 0.8 + ln 0.8) / 3, computed with an independent
        # scalar loop over the formula
        p = torch.tensor([0.9, 0.2, 0.8], dtype=torch.float64)
        assert float(classification_loss(p, {0, 2})) == pytest.approx(0.18388253942874858, abs=1e-9)

    @given(arrays(np.float64, (4,), elements=unit_floats))
    def test_nonnegative(self, p):
        assert float(classification_loss(torch.from_numpy(p), {1, 3})) >= 0.0

    def test_matches_scalar_loop(self, rng):
        p = torch.from_numpy(rng.uniform(0.05, 0.95, size=6))
        present = {0, 2, 5}
        expected = -sum(
            math.log(float(p[c])) if c in present else math.log(1.0 - float(p[c]))
            for c in range(6)
        ) / 6
        assert float(classification_loss(p, present)) == pytest.approx(expected, abs=1e-12)


class TestNegativeEntropyLoss:
    def test_all_ones_is_zero(self):
        assert float(negative_entropy_loss(torch.ones(4, dtype=torch.float64))) == 0.0

    def test_analytic_minimizer(self):
        p = torch.full((3,), 1.0 / math.e, dtype=torch.float64)
        assert float(negative_entropy_loss(p)) == pytest.approx(-1.0 / math.e, abs=1e-12)

    def test_frozen_oracle_value(self):
        p = torch.tensor([0.9, 0.1], dtype=torch.float64)
        assert float(negative_entropy_loss(p)) == pytest.approx(-0.1625414866957241, abs=1e-9)

    @given(arrays(np.float64, (5,), elements=unit_floats))
    def test_range(self, p):
        v = float(negative_entropy_loss(torch.from_numpy(p)))
        assert -1.0 / math.e - 1e-9 <= v <= 0.0


class TestAreaBoundPenalty:
    def test_in_band_mask_no_penalty(self):
        s = torch.tensor([1.0, 0.5, 0.0, 0.0], dtype=torch.float64)
        assert float(area_bound_penalty(s, 0.25, 0.5)) == 0.0

    def test_oversized_mask(self):
        s = torch.ones(4, dtype=torch.float64)
        assert float(area_bound_penalty(s, 0.25, 0.5)) == pytest.approx(0.5, abs=1e-12)

    def test_hand_sorted_example(self):
        # sorted [0.8, 0.6, 0.2, 0.1]; shortfall 0.2/4; excess (0.2+0.1)/4
        s = torch.tensor([0.2, 0.8, 0.1, 0.6], dtype=torch.float64)
        assert float(area_bound_penalty(s, 0.25, 0.5)) == pytest.approx(0.125, abs=1e-12)

    def test_matches_direct_oracle_on_random_masks(self, rng):
        for _ in range(20):
            s = torch.from_numpy(rng.random((5, 7)))
            got = float(area_bound_penalty(s, 0.1, 0.6))
            assert got == pytest.approx(bound_oracle(s.flatten(), 0.1, 0.6), abs=1e-12)

    def test_zero_exactly_when_band_satisfied(self):
        z, amin, amax = 10, 0.2, 0.5
        good = torch.tensor([1.0, 1.0, 0.7, 0.4, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0])
        assert float(area_bound_penalty(good, amin, amax)) == 0.0
        # top floor(z*amin)=2 values not all 1 -> penalized
        short = good.clone()
        short[1] = 0.9
        assert float(area_bound_penalty(short, amin, amax)) > 0.0
        # smallest z - floor(z*amax)=5 values not all 0 -> penalized
        leaky = good.clone()
        leaky[9] = 0.05
        assert float(area_bound_penalty(leaky, amin, amax)) > 0.0

    @given(arrays(np.float64, (3, 4), elements=unit_floats))
    def test_range(self, s):
        v = float(area_bound_penalty(torch.from_numpy(s), 0.25, 0.5))
        assert 0.0 <= v <= 1.0

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            area_bound_penalty(torch.rand(4), 0.5, 0.25)


class TestAreaLoss:
    def test_all_zero_masks_penalized_only_by_minimum_area(self):
        cfg = LossConfig(area_min=0.25, area_max=0.5)
        z = torch.zeros(2, 2, dtype=torch.float64)
        s = torch.zeros(2, 2, 2, dtype=torch.float64)
        assert float(area_loss(z, z, s, {0, 1}, cfg)) == pytest.approx(0.25, abs=1e-12)

    def test_in_band_sharp_mask_costs_its_area_only(self):
        cfg = LossConfig(area_min=0.25, area_max=0.5)
        m = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        s = m.unsqueeze(0)
        n = torch.zeros_like(m)
        assert float(area_loss(m, n, s, {0}, cfg)) == pytest.approx(float(m.mean()), abs=1e-12)

    def test_composes_component_oracles(self, rng):
        cfg = LossConfig(area_min=0.1, area_max=0.6)
        s = torch.from_numpy(rng.random((4, 6, 6)))
        labels = {1, 3}
        m = aggregate_target_mask(s, labels)
        n = aggregate_nontarget_mask(s, labels)
        expected = (
            float(m.mean())
            + float(n.mean())
            + (bound_oracle(s[1].flatten(), 0.1, 0.6) + bound_oracle(s[3].flatten(), 0.1, 0.6)) / 2
        )
        assert float(area_loss(m, n, s, labels, cfg)) == pytest.approx(expected, abs=1e-12)


class TestTotalVariation:
    @given(st.floats(0.0, 1.0, allow_nan=False))
    def test_constant_mask_is_zero(self, c):
        assert float(total_variation(torch.full((4, 5), c, dtype=torch.float64))) == 0.0

    def test_single_vertical_edge(self):
        x = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
        assert float(total_variation(x)) == pytest.approx(0.5, abs=1e-12)

    def test_matches_double_loop_oracle(self, rng):
        x = torch.from_numpy(rng.random((5, 7)))
        assert float(total_variation(x)) == pytest.approx(tv_oracle(x), abs=1e-12)

    @given(arrays(np.float64, (5, 5), elements=unit_floats))
    def test_transpose_invariant_for_square(self, x):
        x = torch.from_numpy(x)
        assert float(total_variation(x)) == pytest.approx(float(total_variation(x.t())), abs=1e-12)

    @given(arrays(np.float64, (3, 6), elements=unit_floats))
    def test_nonnegative(self, x):
        assert float(total_variation(torch.from_numpy(x))) >= 0.0

    def test_single_row_and_column(self):
        row = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
        assert float(total_variation(row)) == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert float(total_variation(row.t())) == pytest.approx(2.0 / 3.0, abs=1e-12)


class TestSmoothnessLoss:
    def test_both_constant(self):
        assert float(smoothness_loss(torch.full((3, 3), 0.4), torch.zeros(3, 3))) == 0.0

    def test_additive_with_zero_term(self):
        m = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
        assert float(smoothness_loss(m, torch.full((2, 2), 0.7, dtype=torch.float64))) == pytest.approx(0.5, abs=1e-12)

    def test_sum_of_tv_oracles(self, rng):
        m = torch.from_numpy(rng.random((4, 4)))
        n = torch.from_numpy(rng.random((4, 4)))
        assert float(smoothness_loss(m, n)) == pytest.approx(tv_oracle(m) + tv_oracle(n), abs=1e-12)


class TestExplainerLoss:
    def _toy_instance(self, rng, seed=0):
        # float64 throughout so the recomposition identity holds at 1e-9
        classifier = make_linear_classifier(class_count=3, size=8, seed=seed)
        image = torch.from_numpy(rng.random((3, 8, 8)))
        class_masks = torch.from_numpy(rng.random((3, 8, 8)))
        return classifier, image, class_masks

    def test_zero_weights_reduce_to_classification(self, rng):
        classifier, image, s = self._toy_instance(rng)
        cfg = LossConfig(lambda_entropy=0.0, lambda_area=0.0, lambda_tv=0.0)
        out = explainer_loss(image, {0, 2}, s, classifier, cfg)
        assert float(out.total) == pytest.approx(float(out.classification), abs=1e-12)

    def test_full_target_mask_composition(self, rng):
        # all-ones target channel on a fixed-perfect classifier: with only
        # the area weight active the total is area-dominated (A(m)=1 plus
        # the oversize penalty)
        classifier = make_fixed_classifier([20.0, -20.0], size=8)
        image = torch.rand(3, 8, 8)
        s = torch.stack([torch.ones(8, 8), torch.zeros(8, 8)])
        cfg = LossConfig(lambda_entropy=0.0, lambda_area=1.0, lambda_tv=0.0, area_min=0.25, area_max=0.5)
        out = explainer_loss(image, {0}, s, classifier, cfg)
        expected_area = 1.0 + 0.0 + 0.5  # A(m) + A(n) + oversize B
        assert float(out.area) == pytest.approx(expected_area, abs=1e-6)
        assert float(out.total) == pytest.approx(float(out.classification) + expected_area, abs=1e-6)

    def test_matches_component_sum_oracle(self, rng):
        from maskexplain.losses import (
            classification_loss as lc,
            negative_entropy_loss as le,
        )
        from maskexplain.masks import invert_mask

        classifier, image, s = self._toy_instance(rng, seed=3)
        cfg = LossConfig(lambda_entropy=0.7, lambda_area=1.3, lambda_tv=2.1)
        labels = {0, 1}
        out = explainer_loss(image, labels, s, classifier, cfg)

        m = aggregate_target_mask(s, labels)
        n = aggregate_nontarget_mask(s, labels)
        p = classifier.masked_probs(image.unsqueeze(0), m.unsqueeze(0))[0]
        p_inv = classifier.masked_probs(image.unsqueeze(0), invert_mask(m).unsqueeze(0))[0]
        expected = (
            float(lc(p, labels))
            + 0.7 * float(le(p_inv))
            + 1.3 * float(area_loss(m, n, s, labels, cfg))
            + 2.1 * float(smoothness_loss(m, n))
        )
        assert float(out.total) == pytest.approx(expected, abs=1e-9)

    def test_breakdown_recomposition_identity(self, rng):
        classifier, image, s = self._toy_instance(rng, seed=7)
        cfg = LossConfig(lambda_entropy=0.5, lambda_area=2.0, lambda_tv=0.3)
        out = explainer_loss(image, {1}, s, classifier, cfg)
        recomposed = (
            float(out.classification)
            + cfg.lambda_entropy * float(out.entropy)
            + cfg.lambda_area * float(out.area)
            + cfg.lambda_tv * float(out.smoothness)
        )
        assert float(out.total) == pytest.approx(recomposed, abs=1e-9)

    def test_nan_component_raises_diagnostic(self):
        classifier = make_fixed_classifier([float("nan"), 0.0], size=8)
        image = torch.rand(3, 8, 8)
        s = torch.rand(2, 8, 8)
        with pytest.raises(LossNanError):
            explainer_loss(image, {0}, s, classifier, LossConfig())

    def test_empty_labels_rejected(self, rng):
        classifier, image, s = self._toy_instance(rng)
        with pytest.raises(ValueError):
            explainer_loss(image, set(), s, classifier, LossConfig())


class TestBatchedLoss:
    def test_batch_equals_mean_of_singles(self, rng):
        classifier = make_linear_classifier(class_count=3, size=8, seed=5)
        cfg = LossConfig(lambda_entropy=0.9, lambda_area=1.1, lambda_tv=0.6)
        images = torch.from_numpy(rng.random((4, 3, 8, 8), dtype=np.float32))
        s = torch.from_numpy(rng.random((4, 3, 8, 8), dtype=np.float32))
        labels = [{0}, {1, 2}, {0, 1, 2}, {2}]
        mat = torch.zeros(4, 3, dtype=torch.bool)
        for i, ls in enumerate(labels):
            for c in ls:
                mat[i, c] = True
        batch = explainer_loss_batch(images, mat, s, classifier, cfg)
        singles = [explainer_loss(images[i], labels[i], s[i], classifier, cfg) for i in range(4)]
        for field in ("total", "classification", "entropy", "area", "smoothness"):
            expected = sum(float(getattr(o, field)) for o in singles) / 4
            assert float(getattr(batch, field)) == pytest.approx(expected, abs=1e-6)
