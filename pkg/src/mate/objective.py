"""Training objective: ELBO terms, alignment constraint, task loss, and the
weighted total with ablation switches.

The total minimized during training is

    total = -alpha * L_r + beta * (L_c + sum_m L_sm) + gamma * L_align + L_y

where L_r is a unit-variance Gaussian log-likelihood (higher is better), the
KL terms are Monte-Carlo estimates against the flow priors, L_align is the
mean pairwise (1 - cosine) between per-modality shared latents, and L_y is
cross-entropy. Ablation flags zero a term and remove it from gradient flow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor
from torch.nn import functional as F

from .errors import DataError
from .nets import PosteriorParams

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# incremented whenever a zero-norm vector forces cosine to 0
_zero_norm_events = 0


def zero_norm_warning_count() -> int:
    return _zero_norm_events


@dataclass
class LossWeights:
    """Hyper-parameters and ablation switches for the total loss."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    temperature: float | None = None  # optional divisor on cosine similarity
    drop_private_kl: bool = False  # variant mate-p
    drop_shared_kl: bool = False  # variant mate-s
    drop_reconstruction: bool = False  # variant mate-r
    drop_alignment: bool = False  # variant mate-c

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Scalar components of one training step.

    ``ortho`` is nonzero only for the orthogonality-penalty baseline, where
    it replaces the private KL terms in the total.
    """

    recon: Tensor
    shared_kl: Tensor
    private_kl: list[Tensor]
    alignment: Tensor
    task: Tensor
    total: Tensor
    ortho: Tensor | None = None

    def to_row(self) -> dict[str, float]:
        def f(t):
            return float(t.detach() if isinstance(t, Tensor) else t)

        row = {"L_r": f(self.recon), "L_c": f(self.shared_kl)}
        for m, v in enumerate(self.private_kl, start=1):
            row[f"L_s{m}"] = f(v)
        row["L_align"] = f(self.alignment)
        row["L_y"] = f(self.task)
        if self.ortho is not None:
            row["L_ortho"] = f(self.ortho)
        row["total"] = f(self.total)
        return row


def reconstruction_loss(x, x_hat) -> Tensor:
    """Unit-variance Gaussian log-likelihood of the reconstruction.

    Per element: -0.5 (x - x_hat)^2 - 0.5 log(2 pi); summed over each
    sample's elements, averaged over the batch, summed over modalities when
    sequences are given. Higher is better; Eq-style negation happens in
    ``total_loss``.
    """
    if isinstance(x, Tensor):
        x, x_hat = [x], [x_hat]
    if len(x) != len(x_hat):
        raise ValueError(f"{len(x)} observations vs {len(x_hat)} reconstructions")
    total = None
    for xm, xh in zip(x, x_hat):
        if xm.shape != xh.shape:
            raise ValueError(f"shape mismatch {tuple(xm.shape)} vs {tuple(xh.shape)}")
        per_elem = -0.5 * (xm - xh) ** 2 - _HALF_LOG_2PI
        ll = per_elem.flatten(1).sum(dim=1).mean()
        total = ll if total is None else total + ll
    return total


def gaussian_posterior_logpdf(params: PosteriorParams, z: Tensor) -> Tensor:
    """Per-sample log q(z) of a factorized Gaussian, summed over all but the
    leading batch axis."""
    var = torch.exp(params.log_var)
    per = -0.5 * ((z - params.mean) ** 2 / var + params.log_var) - _HALF_LOG_2PI
    return per.flatten(1).sum(dim=1)


def kl_divergence_mc(
    posterior: PosteriorParams,
    prior_log_density: Callable[[Tensor], Tensor],
    num_samples: int = 1,
    generator: torch.Generator | None = None,
    return_se: bool = False,
):
    """Monte-Carlo KL(q || p) with reparameterized samples.

    ``prior_log_density`` maps a [B, ...] sample to per-sample log p of shape
    [B]. Returns the batch-mean estimate, optionally with its standard error
    over the ``num_samples`` Monte-Carlo replicates.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    shape = posterior.mean.shape
    batch = shape[0]
    # draws fold into the batch axis so the prior evaluates in large blocks
    chunk = max(1, 16384 // max(1, batch))
    per_draw = []
    done = 0
    while done < num_samples:
        s = min(chunk, num_samples - done)
        noise = torch.randn(
            (s, *shape), generator=generator, dtype=posterior.mean.dtype
        )
        z = posterior.mean + torch.exp(0.5 * posterior.log_var) * noise
        flat = z.reshape(s * batch, *shape[1:])
        wide = PosteriorParams(
            posterior.mean.repeat(s, *([1] * (len(shape) - 1))),
            posterior.log_var.repeat(s, *([1] * (len(shape) - 1))),
        )
        log_q = gaussian_posterior_logpdf(wide, flat)
        log_p = prior_log_density(flat)
        per_draw.append((log_q - log_p).reshape(s, batch).mean(dim=1))
        done += s
    stacked = torch.cat(per_draw)
    estimate = stacked.mean()
    if not return_se:
        return estimate
    if num_samples == 1:
        return estimate, float("nan")
    se = float(stacked.detach().std(unbiased=True) / math.sqrt(num_samples))
    return estimate, se


def shared_alignment_loss(
    shared_latents: Sequence[Tensor], temperature: float | None = None
) -> Tensor:
    """Mean over unordered modality pairs of (1 - cosine similarity).

    Cosine is computed per sample over the flattened [T * n_c] vector, then
    averaged over the batch. Zero-norm vectors count as cosine 0 and bump a
    module warning counter. Range [0, 2]; minimizing drives similarity to 1.
    """
    global _zero_norm_events
    latents = [z.flatten(1) for z in shared_latents]
    if len(latents) < 2:
        raise ValueError("alignment needs at least two modalities")
    pair_losses = []
    for i in range(len(latents)):
        for j in range(i + 1, len(latents)):
            a, b = latents[i], latents[j]
            norm_a = a.norm(dim=1)
            norm_b = b.norm(dim=1)
            zero = (norm_a == 0) | (norm_b == 0)
            denom = (norm_a * norm_b).clamp_min(1e-30)
            cos = (a * b).sum(dim=1) / denom
            if bool(zero.any()):
                _zero_norm_events += int(zero.sum())
                warnings.warn("zero-norm shared latent; cosine treated as 0")
                cos = torch.where(zero, torch.zeros_like(cos), cos)
            if temperature is not None:
                cos = cos / temperature
            pair_losses.append((1.0 - cos).mean())
    return torch.stack(pair_losses).mean()


def orthogonality_penalty(z_c: Tensor, z_s_all: Sequence[Tensor]) -> Tensor:
    """Mean squared cross-correlation between shared and specific coordinates.

    Used by the baseline that swaps the private flow priors for an
    orthogonality constraint: coordinates are correlated over the pooled
    [B * T] axis and every shared/specific pair is pushed to zero correlation.
    """
    flat_c = z_c.reshape(-1, z_c.shape[-1])
    flat_c = flat_c - flat_c.mean(dim=0)
    flat_c = flat_c / flat_c.norm(dim=0).clamp_min(1e-12)
    penalties = []
    for z_s in z_s_all:
        flat_s = z_s.reshape(-1, z_s.shape[-1])
        flat_s = flat_s - flat_s.mean(dim=0)
        flat_s = flat_s / flat_s.norm(dim=0).clamp_min(1e-12)
        corr = flat_c.T @ flat_s
        penalties.append((corr**2).mean())
    return torch.stack(penalties).mean()


def task_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy over the batch."""
    num_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


def total_loss(
    recon: Tensor,
    shared_kl: Tensor,
    private_kls: Sequence[Tensor],
    alignment: Tensor,
    task: Tensor | None,
    weights: LossWeights,
    ortho: Tensor | None = None,
    ortho_weight: float | None = None,
) -> LossBreakdown:
    """Combine components per the weighted total; ablated terms are zeroed
    and detached from gradient flow by never entering the sum."""
    zero = torch.zeros(())

    recon = zero if weights.drop_reconstruction else recon
    shared_kl = zero if weights.drop_shared_kl else shared_kl
    private_kls = [zero for _ in private_kls] if weights.drop_private_kl else list(private_kls)
    alignment = zero if weights.drop_alignment else alignment
    task = zero if task is None else task

    total = (
        -weights.alpha * recon
        + weights.beta * (shared_kl + sum(private_kls, zero))
        + weights.gamma * alignment
        + task
    )
    if ortho is not None:
        total = total + (weights.beta if ortho_weight is None else ortho_weight) * ortho
    return LossBreakdown(
        recon=recon,
        shared_kl=shared_kl,
        private_kl=private_kls,
        alignment=alignment,
        task=task,
        total=total,
        ortho=ortho,
    )
