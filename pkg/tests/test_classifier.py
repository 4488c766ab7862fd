import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskexplain.classifier import (
    Explanandum,
    FinetuneConfig,
    InputSpec,
    build_small_classifier,
    build_torchvision_classifier,
    finetune_classifier,
    load_classifier,
    micro_f1,
    per_class_f1,
)
from maskexplain.data import ShapesConfig, generate_shapes_dataset

from conftest import make_fixed_classifier, make_linear_classifier


class TestPredictProbs:
    def test_zero_logits_give_half(self):
        model = make_fixed_classifier([0.0, 0.0, 0.0])
        probs = model.predict_probs(torch.rand(2, 3, 8, 8))
        assert torch.allclose(probs, torch.full((2, 3), 0.5))

    def test_saturated_logits(self):
        model = make_fixed_classifier([20.0, -20.0])
        probs = model.predict_probs(torch.rand(1, 3, 8, 8))[0]
        assert abs(float(probs[0]) - 1.0) < 1e-8
        assert abs(float(probs[1]) - 0.0) < 1e-8

    def test_matches_manual_forward_recomputation(self, rng):
        model = make_linear_classifier(class_count=3, size=8, seed=11)
        image = torch.from_numpy(rng.random((1, 3, 8, 8), dtype=np.float32))
        probs = model.predict_probs(image)[0]
        w = model.net.weight.detach().numpy()
        b = model.net.bias.detach().numpy()
        logits = w @ image.numpy().reshape(-1) + b
        expected = 1.0 / (1.0 + np.exp(-logits))
        np.testing.assert_allclose(probs.numpy(), expected, atol=1e-6)

    def test_wrong_spatial_size_rejected(self):
        model = make_fixed_classifier([0.0])
        with pytest.raises(ValueError):
            model.predict_probs(torch.rand(1, 3, 16, 16))


class TestPredictSoftmax:
    def test_uniform_logits(self):
        model = make_fixed_classifier([1.5, 1.5, 1.5, 1.5])
        soft = model.predict_softmax(torch.rand(1, 3, 8, 8))[0]
        assert torch.allclose(soft, torch.full((4,), 0.25), atol=1e-7)

    def test_shift_invariance(self):
        a = make_fixed_classifier([1.0, 2.0, -0.5])
        b = make_fixed_classifier([11.0, 12.0, 9.5])
        x = torch.rand(1, 3, 8, 8)
        assert torch.allclose(a.predict_softmax(x), b.predict_softmax(x), atol=1e-6)

    def test_matches_normalized_exponential_oracle(self, rng):
        logits = rng.normal(size=4)
        model = make_fixed_classifier(list(logits))
        soft = model.predict_softmax(torch.rand(1, 3, 8, 8))[0].numpy()
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(soft, expected, rtol=1e-5)

    def test_rows_sum_to_one(self, rng):
        model = make_linear_classifier(class_count=5, size=8)
        soft = model.predict_softmax(torch.from_numpy(rng.random((3, 3, 8, 8), dtype=np.float32)))
        assert torch.allclose(soft.sum(dim=1), torch.ones(3), atol=1e-6)

    @given(arrays(np.float32, (4,), elements=st.floats(-5, 5, width=32)))
    def test_argmax_agrees_with_sigmoid_path(self, logits):
        model = make_fixed_classifier(list(logits))
        x = torch.rand(1, 3, 8, 8)
        probs = model.predict_probs(x)
        soft = model.predict_softmax(x)
        assert int(probs.argmax()) == int(soft.argmax())


class TestFreeze:
    def test_checksum_stable_and_idempotent(self):
        model = build_small_classifier(3, input_size=16, seed=0)
        model.freeze()
        before = model.parameter_checksum()
        model.freeze()  # idempotent
        assert model.frozen
        with torch.no_grad():
            model.predict_probs(torch.rand(4, 3, 16, 16))
        assert model.parameter_checksum() == before

    def test_frozen_classifier_backpropagates_input_gradients(self):
        model = build_small_classifier(2, input_size=16, seed=0).freeze()
        x = torch.rand(1, 3, 16, 16, requires_grad=True)
        model.logits(x)[0, 0].backward()
        assert x.grad is not None and float(x.grad.abs().sum()) > 0.0

    def test_input_gradient_matches_finite_differences(self):
        model = build_small_classifier(2, input_size=16, seed=3).freeze()
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        model.net.double()
        xg = x.clone().requires_grad_(True)
        model.logits(xg)[0, 1].backward()
        step = 1e-5
        for (c, i, j) in [(0, 3, 4), (1, 8, 8), (2, 15, 0)]:
            hi = x.clone()
            hi[0, c, i, j] += step
            lo = x.clone()
            lo[0, c, i, j] -= step
            with torch.no_grad():
                fd = float(model.logits(hi)[0, 1] - model.logits(lo)[0, 1]) / (2 * step)
            assert float(xg.grad[0, c, i, j]) == pytest.approx(fd, abs=1e-5)


class TestMaskedForward:
    def test_raw_space_masks_to_black(self, rng):
        model = make_linear_classifier(class_count=2, size=8)
        image = torch.from_numpy(rng.random((1, 3, 8, 8), dtype=np.float32))
        zero_mask = torch.zeros(1, 8, 8)
        black = torch.zeros(1, 3, 8, 8)
        got = model.masked_logits(image, zero_mask, "raw")
        expected = model.logits(black)
        assert torch.allclose(got, expected, atol=1e-7)

    def test_normalized_space_masks_to_mean(self, rng):
        spec = InputSpec(size=8, mean=(0.4, 0.4, 0.4), std=(0.2, 0.2, 0.2))
        net = make_linear_classifier(class_count=2, size=8).net
        model = Explanandum(net, 2, spec).freeze()
        image = torch.from_numpy(rng.random((1, 3, 8, 8), dtype=np.float32))
        got = model.masked_logits(image, torch.zeros(1, 8, 8), "normalized")
        mean_img = torch.full((1, 3, 8, 8), 0.4)
        expected = model.logits(mean_img)
        assert torch.allclose(got, expected, atol=1e-6)

    def test_unknown_mask_space_rejected(self):
        model = make_fixed_classifier([0.0])
        with pytest.raises(ValueError):
            model.masked_logits(torch.rand(1, 3, 8, 8), torch.ones(1, 8, 8), "pixel")


def _tiny_shapes(n, seed, size=16, classes=2):
    cfg = ShapesConfig(
        class_count=classes, image_size=size, num_images=n, min_shapes=1, max_shapes=classes
    )
    return generate_shapes_dataset(cfg, seed=seed)


class TestFinetune:
    def test_reaches_high_f1_on_tiny_shapes(self):
        train = _tiny_shapes(240, seed=0)
        val = _tiny_shapes(60, seed=1)
        model = build_small_classifier(2, input_size=16, seed=0)
        cfg = FinetuneConfig(epochs=10, batch_size=32, learning_rate=2e-3, seed=0)
        finetune_classifier(
            model,
            train.image_stack(),
            train.label_matrix().float(),
            cfg,
            val.image_stack(),
            val.label_matrix(),
        )
        probs = model.predict_probs(val.image_stack())
        scores = per_class_f1(probs >= 0.5, val.label_matrix())
        assert min(scores) >= 0.95

    def test_zero_epochs_returns_unchanged(self):
        model = build_small_classifier(2, input_size=16, seed=0)
        before = model.parameter_checksum()
        train = _tiny_shapes(8, seed=0)
        finetune_classifier(
            model, train.image_stack(), train.label_matrix().float(), FinetuneConfig(epochs=0)
        )
        assert model.parameter_checksum() == before

    def test_zero_learning_rate_is_bit_identical(self):
        # batch-norm buffers still track activations in train mode; the
        # no-op guarantee is about the learned parameters
        model = build_small_classifier(2, input_size=16, seed=0)
        before = {k: v.clone() for k, v in model.net.named_parameters()}
        train = _tiny_shapes(8, seed=0)
        finetune_classifier(
            model,
            train.image_stack(),
            train.label_matrix().float(),
            FinetuneConfig(epochs=2, learning_rate=0.0, batch_size=4),
        )
        for k, v in model.net.named_parameters():
            assert torch.equal(v, before[k]), k

    def test_frozen_model_rejected(self):
        model = build_small_classifier(2, input_size=16, seed=0).freeze()
        train = _tiny_shapes(8, seed=0)
        with pytest.raises(ValueError):
            finetune_classifier(
                model, train.image_stack(), train.label_matrix().float(), FinetuneConfig(epochs=1)
            )

    def test_class_with_no_positives_warns_but_trains(self):
        model = build_small_classifier(3, input_size=16, seed=0)
        train = _tiny_shapes(8, seed=0)  # two-class data, three-class head
        labels = torch.zeros(len(train), 3)
        labels[:, :2] = train.label_matrix().float()[:, :2]
        with pytest.warns(UserWarning, match="zero positive"):
            finetune_classifier(
                model, train.image_stack(), labels, FinetuneConfig(epochs=1, batch_size=4)
            )


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        model = build_small_classifier(3, input_size=16, seed=0)
        model.save(tmp_path / "cls.pt")
        loaded = load_classifier(tmp_path / "cls.pt")
        assert loaded.parameter_checksum() == model.parameter_checksum()
        assert loaded.class_count == 3
        assert loaded.input_spec == model.input_spec
        assert loaded.gradcam_layer == model.gradcam_layer

    def test_missing_checkpoint_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_classifier(tmp_path / "nope.pt")

    def test_torchvision_adapter_builds_without_weights(self):
        model = build_torchvision_classifier("vgg16", class_count=20)
        assert model.input_spec.size == 224
        assert model.gradcam_layer == "features.29"
        x = torch.rand(1, 3, 224, 224)
        assert model.predict_probs(x).shape == (1, 20)

    def test_unknown_arch_rejected(self):
        with pytest.raises(ValueError):
            build_torchvision_classifier("alexnet", class_count=5)


class TestF1Helpers:
    def test_micro_f1_hand_example(self):
        pred = torch.tensor([[1, 0], [1, 1]], dtype=torch.bool)
        target = torch.tensor([[1, 1], [0, 1]], dtype=torch.bool)
        p, r, f = micro_f1(pred, target)
        assert p == pytest.approx(2 / 3)
        assert r == pytest.approx(2 / 3)
        assert f == pytest.approx(2 / 3)

    def test_perfect_prediction(self):
        t = torch.tensor([[1, 0, 1]], dtype=torch.bool)
        p, r, f = micro_f1(t, t)
        assert (p, r, f) == (1.0, 1.0, 1.0)

    def test_empty_predictions(self):
        pred = torch.zeros(2, 2, dtype=torch.bool)
        target = torch.ones(2, 2, dtype=torch.bool)
        p, r, f = micro_f1(pred, target)
        assert (p, r, f) == (0.0, 0.0, 0.0)
