import math

import numpy as np
import pytest
import torch

from mate import objective
from mate.errors import DataError
from mate.nets import PosteriorParams
from mate.objective import (
    LossWeights,
    kl_divergence_mc,
    orthogonality_penalty,
    reconstruction_loss,
    shared_alignment_loss,
    task_loss,
    total_loss,
)
from mate.priors import AffineResidual, FlowPrior, shared_prior_log_density

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class TestReconstructionLoss:
    def test_zero_residual(self):
        x = torch.randn(3, 4, 5)
        ll = reconstruction_loss(x, x.clone())
        assert ll.item() == pytest.approx(-HALF_LOG_2PI * 4 * 5, rel=1e-6)

    def test_unit_offset(self):
        x = torch.randn(2, 3, 2)
        ll = reconstruction_loss(x, x + 1.0)
        expected = (-0.5 - HALF_LOG_2PI) * 3 * 2
        assert ll.item() == pytest.approx(expected, rel=1e-6)

    def test_random_case_vs_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 2))
        xh = rng.standard_normal((4, 3, 2))
        ll = reconstruction_loss(torch.tensor(x), torch.tensor(xh)).item()
        per_elem = -0.5 * (x - xh) ** 2 - HALF_LOG_2PI
        assert ll == pytest.approx(per_elem.reshape(4, -1).sum(axis=1).mean(), rel=1e-10)

    def test_multi_modality_sums(self):
        xs = [torch.randn(2, 3, 2), torch.randn(2, 3, 4)]
        single = sum(reconstruction_loss(x, x + 0.5).item() for x in xs)
        both = reconstruction_loss(xs, [x + 0.5 for x in xs]).item()
        assert both == pytest.approx(single, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reconstruction_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4))


def standard_normal_total(z):
    return (-0.5 * z**2 - HALF_LOG_2PI).flatten(1).sum(dim=1)


class TestKLMonteCarlo:
    def test_identical_distributions_near_zero(self):
        torch.manual_seed(0)
        b, t, n = 1, 4, 2
        posterior = PosteriorParams(torch.zeros(b, t, n), torch.zeros(b, t, n))
        prior = FlowPrior(n, n, residuals=[AffineResidual(1.0) for _ in range(n)])
        gen = torch.Generator().manual_seed(1)
        est, se = kl_divergence_mc(
            posterior,
            lambda z: shared_prior_log_density(prior, z).total,
            num_samples=10_000,
            generator=gen,
            return_se=True,
        )
        assert abs(est.item()) < 3 * se + 1e-6

    def test_closed_form_gaussian_kl(self):
        # q = N(1, 1) vs p = N(0, 1): KL = 0.5
        posterior = PosteriorParams(torch.ones(1, 1, 1), torch.zeros(1, 1, 1))
        gen = torch.Generator().manual_seed(2)
        est, se = kl_divergence_mc(
            posterior, standard_normal_total, num_samples=10_000, generator=gen, return_se=True
        )
        assert est.item() == pytest.approx(0.5, abs=3 * se)

    def test_sample_size_self_consistency(self):
        torch.manual_seed(3)
        posterior = PosteriorParams(torch.randn(1, 3, 2) * 0.5, torch.randn(1, 3, 2) * 0.2)
        prior = FlowPrior(2, 2, hidden=(8,))
        fn = lambda z: shared_prior_log_density(prior, z).total
        gen = torch.Generator().manual_seed(4)
        est1, se1 = kl_divergence_mc(posterior, fn, 1_000, gen, return_se=True)
        est2, se2 = kl_divergence_mc(posterior, fn, 10_000, gen, return_se=True)
        combined = math.hypot(se1, se2)
        assert abs(est1.item() - est2.item()) < 3 * combined

    def test_nonnegative_in_expectation(self):
        torch.manual_seed(5)
        posterior = PosteriorParams(torch.randn(1, 2, 2) * 0.3, torch.randn(1, 2, 2) * 0.3)
        prior = FlowPrior(2, 2, hidden=(8,))
        fn = lambda z: shared_prior_log_density(prior, z).total
        runs = []
        gen = torch.Generator().manual_seed(6)
        for _ in range(10):
            est, se = kl_divergence_mc(posterior, fn, 10_000, gen, return_se=True)
            runs.append((est.item(), se))
        mean = np.mean([r[0] for r in runs])
        combined_se = math.sqrt(sum(r[1] ** 2 for r in runs)) / len(runs)
        assert mean >= -3 * combined_se

    def test_zero_samples_rejected(self):
        posterior = PosteriorParams(torch.zeros(1, 1, 1), torch.zeros(1, 1, 1))
        with pytest.raises(ValueError):
            kl_divergence_mc(posterior, standard_normal_total, num_samples=0)


class TestAlignmentLoss:
    def test_identical_latents_zero(self):
        z = torch.randn(3, 4, 2)
        assert shared_alignment_loss([z, z.clone()]).item() == pytest.approx(0.0, abs=1e-6)

    def test_antipodal_two(self):
        z = torch.randn(3, 4, 2)
        assert shared_alignment_loss([z, -z]).item() == pytest.approx(2.0, abs=1e-6)

    def test_orthogonal_one(self):
        a = torch.zeros(1, 1, 2)
        b = torch.zeros(1, 1, 2)
        a[0, 0, 0] = 1.0
        b[0, 0, 1] = 1.0
        assert shared_alignment_loss([a, b]).item() == pytest.approx(1.0, abs=1e-6)

    def test_scale_invariance(self):
        a, b = torch.randn(4, 3, 2), torch.randn(4, 3, 2)
        base = shared_alignment_loss([a, b]).item()
        scaled = shared_alignment_loss([2.5 * a, b]).item()
        assert scaled == pytest.approx(base, rel=1e-5)

    def test_bounds_random(self):
        rng = torch.Generator().manual_seed(7)
        for _ in range(20):
            a = torch.randn(5, 2, 3, generator=rng)
            b = torch.randn(5, 2, 3, generator=rng)
            v = shared_alignment_loss([a, b]).item()
            assert 0.0 <= v <= 2.0

    def test_zero_norm_counts_as_zero_cosine(self):
        before = objective.zero_norm_warning_count()
        a = torch.zeros(2, 2, 2)
        b = torch.randn(2, 2, 2)
        with pytest.warns(UserWarning):
            v = shared_alignment_loss([a, b]).item()
        assert v == pytest.approx(1.0)
        assert objective.zero_norm_warning_count() > before

    def test_temperature_divisor(self):
        z = torch.randn(3, 4, 2)
        v = shared_alignment_loss([z, z.clone()], temperature=0.5).item()
        assert v == pytest.approx(1.0 - 1.0 / 0.5, abs=1e-5)

    def test_pair_count_three_modalities(self):
        z = torch.randn(2, 3, 2)
        v = shared_alignment_loss([z, z.clone(), -z]).item()
        # pairs: (1,2)=0, (1,3)=2, (2,3)=2 -> mean 4/3
        assert v == pytest.approx(4.0 / 3.0, abs=1e-5)


class TestTaskLoss:
    def test_confident_correct_logits(self):
        logits = torch.tensor([[100.0, 0.0], [0.0, 100.0]])
        labels = torch.tensor([0, 1])
        assert task_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits_log_k(self):
        k = 5
        logits = torch.zeros(3, k)
        labels = torch.tensor([0, 2, 4])
        assert task_loss(logits, labels).item() == pytest.approx(math.log(k), rel=1e-6)

    def test_against_manual_softmax_ce(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, size=6)
        got = task_loss(torch.tensor(logits), torch.tensor(labels)).item()
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -log_probs[np.arange(6), labels].mean()
        assert got == pytest.approx(expected, rel=1e-6)

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            task_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


class TestTotalLoss:
    def rand_components(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        return dict(
            recon=torch.randn((), generator=g),
            shared_kl=torch.randn((), generator=g),
            private_kls=[torch.randn((), generator=g), torch.randn((), generator=g)],
            alignment=torch.randn((), generator=g).abs(),
            task=torch.randn((), generator=g).abs(),
        )

    def test_zero_weights_leave_task(self):
        c = self.rand_components()
        weights = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
        out = total_loss(**c, weights=weights)
        assert out.total.item() == pytest.approx(c["task"].item(), rel=1e-6)

    def test_full_ablation_leaves_task(self):
        c = self.rand_components(1)
        weights = LossWeights(
            alpha=3.0,
            beta=2.0,
            gamma=5.0,
            drop_private_kl=True,
            drop_shared_kl=True,
            drop_reconstruction=True,
            drop_alignment=True,
        )
        out = total_loss(**c, weights=weights)
        assert out.total.item() == pytest.approx(c["task"].item(), rel=1e-6)
        assert out.recon.item() == 0.0
        assert out.shared_kl.item() == 0.0
        assert all(v.item() == 0.0 for v in out.private_kl)
        assert out.alignment.item() == 0.0

    def test_hand_summed_combination(self):
        c = self.rand_components(2)
        weights = LossWeights(alpha=0.7, beta=1.3, gamma=2.1)
        out = total_loss(**c, weights=weights)
        expected = (
            -0.7 * c["recon"]
            + 1.3 * (c["shared_kl"] + sum(c["private_kls"]))
            + 2.1 * c["alignment"]
            + c["task"]
        ).item()
        assert out.total.item() == pytest.approx(expected, rel=1e-6)
        row = out.to_row()
        assert set(row) == {"L_r", "L_c", "L_s1", "L_s2", "L_align", "L_y", "total"}

    def test_breakdown_invariant_matches_exposed_parts(self):
        c = self.rand_components(3)
        weights = LossWeights(alpha=1.1, beta=0.4, gamma=0.9, drop_reconstruction=True)
        out = total_loss(**c, weights=weights)
        recomposed = (
            -weights.alpha * out.recon
            + weights.beta * (out.shared_kl + sum(out.private_kl))
            + weights.gamma * out.alignment
            + out.task
        )
        assert out.total.item() == pytest.approx(recomposed.item(), rel=1e-6)

    def test_missing_task_contributes_zero(self):
        c = self.rand_components(4)
        c["task"] = None
        weights = LossWeights(alpha=1.0, beta=1.0, gamma=1.0)
        out = total_loss(**c, weights=weights)
        assert out.task.item() == 0.0


class TestOrthogonalityPenalty:
    def test_correlated_blocks_penalized(self):
        torch.manual_seed(8)
        z_c = torch.randn(64, 8, 2)
        z_s = z_c + 0.1 * torch.randn_like(z_c)
        dependent = orthogonality_penalty(z_c, [z_s]).item()
        independent = orthogonality_penalty(z_c, [torch.randn_like(z_c)]).item()
        assert dependent > 10 * independent

    def test_zero_for_constant_specific(self):
        z_c = torch.randn(16, 4, 2)
        z_s = torch.zeros(16, 4, 2)
        assert orthogonality_penalty(z_c, [z_s]).item() == pytest.approx(0.0, abs=1e-8)
