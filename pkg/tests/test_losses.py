"""Loss primitives: task CE/BCE, confusion, GRL, SupCon, KL, resampling."""

import math

import numpy as np
import pytest
import torch

from dermfair.errors import NumericError
from dermfair.losses import (
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_TEMPERATURE,
    LossBreakdown,
    adaptive_resampling_weights,
    baseline_loss,
    confusion_loss,
    expected_uniform_confusion,
    gradient_reversal,
    GradientReversal,
    kl_diag_gaussian,
    supervised_contrastive_loss,
    task_loss,
)

torch.manual_seed(0)


class TestTaskLoss:
    def test_binary_uses_single_logit_bce(self):
        logits = torch.zeros(4, dtype=torch.float64)
        labels = torch.tensor([0, 1, 0, 1])
        # sigmoid(0) = 0.5 for both labels -> BCE = ln 2
        assert task_loss(logits, labels).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_binary_column_vector_accepted(self):
        logits = torch.zeros(4, 1, dtype=torch.float64)
        labels = torch.tensor([1, 0, 1, 0])
        assert task_loss(logits, labels).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_binary_rejects_nonbinary_labels(self):
        with pytest.raises(ValueError, match="binary labels"):
            task_loss(torch.zeros(3), torch.tensor([0, 1, 2]))

    def test_binary_known_value(self):
        # p = sigmoid(2) for a positive: loss = -ln sigmoid(2) = 0.126928...
        logits = torch.tensor([2.0], dtype=torch.float64)
        labels = torch.tensor([1])
        expected = -math.log(1.0 / (1.0 + math.exp(-2.0)))
        assert task_loss(logits, labels).item() == pytest.approx(expected, abs=1e-12)

    def test_multiclass_cross_entropy(self):
        logits = torch.zeros(3, 4, dtype=torch.float64)
        labels = torch.tensor([0, 1, 3])
        assert task_loss(logits, labels).item() == pytest.approx(math.log(4.0), abs=1e-9)

    def test_multiclass_label_range_checked(self):
        with pytest.raises(ValueError, match="labels must be in"):
            task_loss(torch.zeros(2, 3), torch.tensor([0, 3]))

    def test_baseline_breakdown_verifies(self):
        out = baseline_loss(torch.zeros(4, 3), torch.tensor([0, 1, 2, 0]))
        out.verify()
        assert set(out.components) == {"task"}
        assert out.scalar() == pytest.approx(out.component("task"))


class TestConfusionLoss:
    def test_uniform_rows_hit_log_k(self):
        for k in (2, 4, 6):
            probs = torch.full((5, k), 1.0 / k, dtype=torch.float64)
            assert confusion_loss(probs).item() == pytest.approx(math.log(k), abs=1e-9)
        assert expected_uniform_confusion(6) == pytest.approx(math.log(6.0))

    def test_worked_confident_row(self):
        # row (0.95, 0.01 × 5): −(1/6)(ln .95 + 5 ln .01) = 3.8462...
        row = torch.tensor([[0.95, 0.01, 0.01, 0.01, 0.01, 0.01]], dtype=torch.float64)
        expected = -(math.log(0.95) + 5 * math.log(0.01)) / 6.0
        value = confusion_loss(row).item()
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(3.8462, abs=1e-4)

    def test_exceeds_uniform_for_confident_rows(self):
        confident = torch.tensor([[0.99, 0.002, 0.002, 0.002, 0.002, 0.002]], dtype=torch.float64)
        assert confusion_loss(confident).item() > math.log(6.0)

    def test_zero_probabilities_floored_not_inf(self):
        probs = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        value = confusion_loss(probs).item()
        assert math.isfinite(value)
        assert value == pytest.approx(-(math.log(1.0) + math.log(1e-12)) / 2.0, rel=1e-9)

    def test_row_sum_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            confusion_loss(torch.tensor([[0.5, 0.4]]))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            confusion_loss(torch.ones(4))
        with pytest.raises(ValueError):
            confusion_loss(torch.ones(4, 1))

    def test_gradient_pushes_toward_uniform(self):
        probs_logits = torch.tensor([[2.0, -1.0, -1.0]], requires_grad=True)
        probs = torch.softmax(probs_logits, dim=1)
        confusion_loss(probs).backward()
        # decreasing the dominant logit reduces the loss
        assert probs_logits.grad[0, 0] > 0


class TestGradientReversal:
    def test_forward_identity(self):
        x = torch.randn(3, 4)
        assert torch.equal(gradient_reversal(x, 0.7), x)

    def test_backward_negates_and_scales(self):
        x = torch.randn(5, requires_grad=True, dtype=torch.float64)
        y = gradient_reversal(x, 2.5)
        y.sum().backward()
        assert torch.allclose(x.grad, torch.full_like(x, -2.5))

    def test_lambda_zero_blocks_gradient(self):
        x = torch.randn(5, requires_grad=True)
        gradient_reversal(x, 0.0).sum().backward()
        assert torch.allclose(x.grad, torch.zeros_like(x))

    def test_module_wrapper(self):
        layer = GradientReversal(1.5)
        x = torch.randn(2, 2, requires_grad=True)
        layer(x).sum().backward()
        assert torch.allclose(x.grad, torch.full_like(x, -1.5))
        assert "1.5" in repr(layer)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            gradient_reversal(torch.zeros(1), -1.0)
        with pytest.raises(ValueError):
            GradientReversal(-0.1)


class TestSupervisedContrastive:
    def test_identical_embeddings_give_log_n_minus_1(self):
        # all similarities tie, so each anchor's log-probability over the
        # n−1 candidates is −log(n−1) regardless of temperature
        for n in (3, 5, 8):
            z = torch.ones(n, 16, dtype=torch.float64)
            labels = torch.tensor([i % 2 for i in range(n)])
            value = supervised_contrastive_loss(z, labels).item()
            assert value == pytest.approx(math.log(n - 1), abs=1e-9)

    def test_no_positive_pairs_warns_and_zero(self):
        z = torch.randn(4, 8)
        labels = torch.tensor([0, 1, 2, 3])
        with pytest.warns(UserWarning, match="no positive"):
            assert supervised_contrastive_loss(z, labels).item() == 0.0

    def test_singleton_batch_warns_and_zero(self):
        with pytest.warns(UserWarning, match="smaller than 2"):
            value = supervised_contrastive_loss(torch.randn(1, 4), torch.tensor([0]))
        assert value.item() == 0.0

    def test_tight_classes_beat_shuffled_classes(self):
        rng = torch.Generator().manual_seed(3)
        a = torch.randn(8, 4, generator=rng) * 0.01 + torch.tensor([5.0, 0, 0, 0])
        b = torch.randn(8, 4, generator=rng) * 0.01 + torch.tensor([0, 5.0, 0, 0])
        z = torch.cat([a, b])
        coherent = torch.tensor([0] * 8 + [1] * 8)
        shuffled = torch.tensor([0, 1] * 8)
        tight = supervised_contrastive_loss(z, coherent).item()
        loose = supervised_contrastive_loss(z, shuffled).item()
        assert tight < loose

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            supervised_contrastive_loss(torch.randn(4, 4), torch.zeros(4), temperature=0.0)

    def test_default_temperature(self):
        assert DEFAULT_TEMPERATURE == 0.1

    def test_differentiable(self):
        z = torch.randn(6, 8, requires_grad=True, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        supervised_contrastive_loss(z, labels).backward()
        assert z.grad is not None and torch.isfinite(z.grad).all()


class TestKlDiagGaussian:
    def test_standard_normal_is_zero(self):
        mu = torch.zeros(4, 8, dtype=torch.float64)
        var = torch.ones(4, 8, dtype=torch.float64)
        assert kl_diag_gaussian(mu, var).item() == pytest.approx(0.0, abs=1e-9)

    def test_worked_scalar_case(self):
        # mu=1, var=0.25 per dim: ½(0.25 + 1 − 1 − ln 0.25) = 0.8181...
        mu = torch.full((1, 1), 1.0, dtype=torch.float64)
        var = torch.full((1, 1), 0.25, dtype=torch.float64)
        expected = 0.5 * (0.25 + 1.0 - 1.0 - math.log(0.25))
        value = kl_diag_gaussian(mu, var).item()
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.8181, abs=1e-4)

    def test_sums_over_dimensions_means_over_batch(self):
        mu = torch.full((3, 2), 1.0, dtype=torch.float64)
        var = torch.full((3, 2), 0.25, dtype=torch.float64)
        per_dim = 0.5 * (0.25 + 1.0 - 1.0 - math.log(0.25))
        assert kl_diag_gaussian(mu, var).item() == pytest.approx(2 * per_dim, abs=1e-12)

    def test_nonpositive_variance_fatal(self):
        with pytest.raises(NumericError):
            kl_diag_gaussian(torch.zeros(1, 2), torch.tensor([[1.0, 0.0]]))
        with pytest.raises(NumericError):
            kl_diag_gaussian(torch.zeros(1, 1), torch.tensor([[-0.5]]))

    def test_differentiable(self):
        mu = torch.randn(4, 3, requires_grad=True, dtype=torch.float64)
        log_var = torch.randn(4, 3, requires_grad=True, dtype=torch.float64)
        kl_diag_gaussian(mu, log_var.exp()).backward()
        assert torch.isfinite(mu.grad).all() and torch.isfinite(log_var.grad).all()


class TestAdaptiveResampling:
    def test_nine_in_one_bin_one_in_another(self):
        # 9 points cluster at 0, 1 point at 1: the lone point's weight is the
        # sum of the nine others' -> 0.5 of total mass
        latents = np.array([[0.0]] * 9 + [[1.0]])
        weights = adaptive_resampling_weights(latents)
        assert weights.sum() == pytest.approx(1.0)
        assert weights[-1] == pytest.approx(0.5, abs=1e-6)
        assert np.allclose(weights[:9], weights[0])

    def test_uniform_when_degenerate(self):
        weights = adaptive_resampling_weights(np.zeros((7, 3)))
        assert np.allclose(weights, 1.0 / 7)

    def test_single_sample(self):
        assert adaptive_resampling_weights(np.array([[0.3, 0.4]])).tolist() == [1.0]

    def test_1d_input_promoted(self):
        weights = adaptive_resampling_weights(np.array([0.0] * 5 + [1.0]))
        assert weights.shape == (6,)
        assert weights[-1] > weights[0]

    def test_multidim_product_density(self):
        rng = np.random.default_rng(0)
        dense = rng.normal(0, 0.01, size=(50, 2))
        sparse = np.array([[5.0, 5.0]])
        weights = adaptive_resampling_weights(np.vstack([dense, sparse]))
        assert weights[-1] > weights[:-1].max()

    def test_default_bins(self):
        assert DEFAULT_HISTOGRAM_BINS == 10

    def test_bad_shapes_rejected(self):
        with pytest.raises(ValueError):
            adaptive_resampling_weights(np.zeros((2, 2, 2)))


class TestLossBreakdown:
    def test_verify_accepts_weighted_sum(self):
        parts = {"task": torch.tensor(2.0), "confusion": torch.tensor(3.0)}
        weights = {"task": 1.0, "confusion": 0.5}
        breakdown = LossBreakdown(
            total=torch.tensor(3.5), components=parts, weights=weights
        )
        breakdown.verify()

    def test_verify_rejects_mismatch(self):
        breakdown = LossBreakdown(
            total=torch.tensor(9.0),
            components={"task": torch.tensor(2.0)},
            weights={"task": 1.0},
        )
        with pytest.raises(NumericError, match="mismatch"):
            breakdown.verify()
