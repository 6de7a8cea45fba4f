import numpy as np
import pytest
import torch

from eendvc.encoders import ToyFilterbankEncoder
from eendvc.segmentation import (
    ConformerConfig,
    LayerFusion,
    NonFiniteActivationError,
    SegmentationModel,
    load_checkpoint_payload,
    model_from_payload,
    powerset_loss,
    save_checkpoint,
    segment_window,
)
from eendvc.timeline import Annotation, Segment

SMALL = ConformerConfig(num_layers=2, dim=32, ff_hidden=64, num_heads=2, conv_kernel=7)


@pytest.fixture
def small_model(codec42):
    torch.manual_seed(0)
    return SegmentationModel(3, 32, codec42, SMALL)


class TestLayerFusion:
    def test_equal_logits_is_plain_mean(self):
        fusion = LayerFusion(4)
        stack = torch.randn(4, 10, 8)
        assert torch.allclose(fusion(stack), stack.mean(dim=0), atol=1e-6)

    def test_dominant_logit_selects_layer(self):
        fusion = LayerFusion(3)
        with torch.no_grad():
            fusion.logits[1] = 50.0
        stack = torch.randn(3, 5, 4)
        assert torch.allclose(fusion(stack), stack[1], atol=1e-6)

    def test_matches_hand_computed_weighted_sum(self):
        fusion = LayerFusion(3)
        with torch.no_grad():
            fusion.logits.copy_(torch.tensor([0.3, -1.2, 0.7]))
        stack = torch.randn(3, 6, 5)
        weights = torch.softmax(fusion.logits, dim=0)
        expected = sum(weights[l] * stack[l] for l in range(3))
        assert torch.allclose(fusion(stack), expected, atol=1e-6)

    def test_shift_invariance(self):
        fusion = LayerFusion(3)
        with torch.no_grad():
            fusion.logits.copy_(torch.tensor([0.1, 0.5, -0.4]))
        stack = torch.randn(3, 6, 5)
        before = fusion(stack)
        with torch.no_grad():
            fusion.logits += 3.7
        assert torch.allclose(fusion(stack), before, atol=1e-6)

    def test_weights_sum_to_one(self):
        fusion = LayerFusion(5)
        with torch.no_grad():
            fusion.logits.copy_(torch.randn(5))
            weights = fusion.weights
        assert float(weights.sum()) == pytest.approx(1.0, abs=1e-6)
        assert (weights >= 0).all()

    def test_layer_count_mismatch(self):
        with pytest.raises(ValueError, match="layers"):
            LayerFusion(4)(torch.randn(3, 5, 4))


class TestConformerConfig:
    def test_defaults(self):
        config = ConformerConfig()
        assert (config.num_layers, config.dim, config.ff_hidden) == (4, 256, 1024)
        assert (config.num_heads, config.conv_kernel, config.dropout) == (4, 31, 0.1)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            ConformerConfig(dim=30, num_heads=4)


class TestSegmentWindow:
    def test_row_stochastic_output(self, small_model):
        small_model.eval()
        out = segment_window(torch.randn(3, 50, 32), small_model)
        sums = out.class_distribution.sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_frame_count_preserved(self, small_model):
        small_model.eval()
        out = segment_window(torch.randn(3, 400, 32), small_model)
        assert out.log_probs.shape == (400, 11)
        assert out.decoded_activity.shape == (400, 4)

    def test_eval_mode_deterministic(self, small_model):
        small_model.eval()
        stack = torch.randn(3, 60, 32)
        a = segment_window(stack, small_model)
        b = segment_window(stack, small_model)
        assert torch.equal(a.log_probs, b.log_probs)

    def test_decoded_matches_argmax_decode(self, small_model, codec42):
        from eendvc.powerset import decode

        small_model.eval()
        out = segment_window(torch.randn(3, 30, 32), small_model)
        best = out.class_distribution.argmax(axis=1)
        expected = np.stack([decode(i, codec42) for i in best])
        assert (out.decoded_activity == expected).all()

    def test_dim_mismatch_rejected(self, small_model):
        with pytest.raises(ValueError, match="hidden size"):
            small_model(torch.randn(3, 10, 16))

    def test_non_finite_activations_identified(self, small_model):
        with pytest.raises(NonFiniteActivationError, match="layer fusion"):
            small_model(torch.full((3, 10, 32), float("inf")))

    def test_overfit_single_window(self, codec42):
        """A small model memorizes one synthetic window almost perfectly."""
        torch.manual_seed(7)
        rng = np.random.default_rng(7)
        reference = Annotation(
            "w",
            (
                (Segment(0.0, 1.2), "A"),
                (Segment(0.9, 2.0), "B"),
                (Segment(2.4, 3.0), "A"),
            ),
        )
        frames = 150
        stack = torch.from_numpy(
            rng.standard_normal((3, frames, 32)).astype(np.float32)
        )
        model = SegmentationModel(3, 32, codec42, SMALL)
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
        model.train()
        for _ in range(180):
            out = segment_window(stack, model)
            loss = powerset_loss(out, reference, codec42)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        model.eval()
        out = segment_window(stack, model)
        activity = reference.discretize(0.02, frames, reference.labels())
        decoded = out.decoded_activity
        # compare as sets of active slots per frame, using the learned mapping
        from eendvc.powerset import assign_slots

        injection, targets = assign_slots(
            activity, out.class_distribution, codec42
        )
        induced = np.zeros((frames, 4), dtype=np.int8)
        induced[:, list(injection)] = activity
        accuracy = (decoded == induced).all(axis=1).mean()
        assert accuracy >= 0.95


class TestPowersetLoss:
    def test_one_hot_correct_prediction_zero_loss(self, codec42):
        reference = Annotation("w", ((Segment(0.0, 1.0), "A"),))
        frames = 50
        activity = reference.discretize(0.02, frames, ("A",))
        log_probs = torch.full((frames, 11), -1e9)
        for t in range(frames):
            log_probs[t, 1 if activity[t, 0] else 0] = 0.0
        from eendvc.segmentation import SegmentationOutput

        out = SegmentationOutput(log_probs, codec42)
        assert float(powerset_loss(out, reference, codec42)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_prediction_log_num_classes(self, codec42):
        from eendvc.segmentation import SegmentationOutput

        reference = Annotation("w", ((Segment(0.0, 1.0), "A"),))
        log_probs = torch.full((50, 11), -np.log(11.0))
        out = SegmentationOutput(log_probs, codec42)
        assert float(powerset_loss(out, reference, codec42)) == pytest.approx(
            np.log(11.0), abs=1e-6
        )

    def test_relabeling_reference_leaves_loss_unchanged(self, small_model, codec42):
        small_model.eval()
        with torch.no_grad():
            out = segment_window(torch.randn(3, 100, 32), small_model)
        reference = Annotation(
            "w", ((Segment(0.0, 1.0), "A"), (Segment(0.8, 2.0), "B"))
        )
        relabeled = Annotation(
            "w", ((Segment(0.0, 1.0), "zz"), (Segment(0.8, 2.0), "aa"))
        )
        a = float(powerset_loss(out, reference, codec42))
        b = float(powerset_loss(out, relabeled, codec42))
        assert a == pytest.approx(b, abs=1e-12)

    def test_too_many_speakers_propagates(self, small_model, codec42):
        from eendvc.powerset import TooManySpeakersError

        small_model.eval()
        out = segment_window(torch.randn(3, 100, 32), small_model)
        entries = tuple(
            (Segment(0.1 * i, 0.1 * i + 0.5), f"s{i}") for i in range(5)
        )
        with pytest.raises(TooManySpeakersError):
            powerset_loss(out, Annotation("w", entries), codec42)


def _loss_for_gradcheck(model, stack, reference, codec):
    out = segment_window(stack, model)
    return powerset_loss(out, reference, codec)


class TestGradients:
    def test_finite_difference_match(self, codec42):
        """Analytic gradients of the loss match central finite differences."""
        torch.manual_seed(3)
        config = ConformerConfig(
            num_layers=1, dim=32, ff_hidden=48, num_heads=2, conv_kernel=5, dropout=0.0
        )
        model = SegmentationModel(3, 32, codec42, config).double()
        model.eval()
        stack = torch.randn(3, 10, 32, dtype=torch.float64)
        reference = Annotation("w", ((Segment(0.0, 0.12), "A"), (Segment(0.08, 0.2), "B")))

        loss = _loss_for_gradcheck(model, stack, reference, codec42)
        model.zero_grad()
        loss.backward()

        h = 1e-6
        for name, param in (
            ("fusion", model.fusion.logits),
            ("head", model.head.weight),
        ):
            analytic = param.grad.detach().clone().reshape(-1)
            flat = param.data.reshape(-1)
            indices = range(len(flat)) if name == "fusion" else range(0, len(flat), 7)
            fd = {}
            with torch.no_grad():
                for i in indices:
                    original = float(flat[i])
                    flat[i] = original + h
                    up = float(_loss_for_gradcheck(model, stack, reference, codec42))
                    flat[i] = original - h
                    down = float(_loss_for_gradcheck(model, stack, reference, codec42))
                    flat[i] = original
                    fd[i] = (up - down) / (2 * h)
            for i, estimate in fd.items():
                denom = max(abs(estimate), abs(float(analytic[i])), 1e-6)
                assert abs(estimate - float(analytic[i])) / denom < 1e-4, (
                    f"{name}[{i}]: fd {estimate} vs analytic {float(analytic[i])}"
                )


class TestCheckpoint:
    def test_roundtrip(self, small_model, tmp_path, codec42):
        path = tmp_path / "model.pt"
        save_checkpoint(
            path,
            small_model,
            encoder_name="toy",
            surface="frozen",
            train_config={"window": 8.0},
        )
        payload = load_checkpoint_payload(path)
        assert payload["format_version"] == 1
        assert payload["codec"] == {"max_speakers": 4, "max_concurrent": 2}
        assert payload["encoder_name"] == "toy"
        rebuilt = model_from_payload(payload)
        small_model.eval()
        rebuilt.eval()
        stack = torch.randn(3, 20, 32)
        assert torch.equal(small_model(stack), rebuilt(stack))

    def test_unknown_version_rejected(self, small_model, tmp_path):
        path = tmp_path / "model.pt"
        save_checkpoint(path, small_model, encoder_name="toy", surface="frozen")
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError, match="format version"):
            load_checkpoint_payload(path)


def test_end_to_end_with_toy_encoder(codec42):
    encoder = ToyFilterbankEncoder()
    torch.manual_seed(0)
    model = SegmentationModel(4, 32, codec42)
    model.eval()
    wav = np.random.default_rng(0).standard_normal(8 * 16000).astype(np.float32) * 0.1
    stack = encoder.encode_window(wav, 16000)
    out = segment_window(stack, model)
    assert out.log_probs.shape == (400, 11)
