"""Flow-based priors over latent sequences via inverse transition residuals.

Each latent coordinate i has its own scalar residual network r_i mapping
(current coordinate, context) to an estimated driving noise. Because r_i
never reads other current coordinates, the map (z_{t-1}, z_t) -> (z_{t-1},
eps_t) has a lower-triangular Jacobian whose current-block diagonal is
d r_i / d z_{t,i}, so the conditional log-density is

    log p(z_t | context_t) = sum_i log N(eps_i; 0, 1) + sum_i log |d r_i / d z_{t,i}|

and a sequence scores as the standard-normal density of z_1 plus the sum of
conditional terms for t >= 2. The shared prior uses context z_{t-1}; private
priors use (z^s_{t-1}, z^c_t), which is where the shared-to-specific
dependency enters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

LOG_JAC_FLOOR = 1e-8
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def standard_normal_logpdf(x: Tensor) -> Tensor:
    return -0.5 * x * x - _HALF_LOG_2PI


@dataclass
class PriorLogDensity:
    """Per-sample log-density with its components exposed.

    total = initial_term + noise_term + jac_term, all shaped [B].
    """

    total: Tensor
    initial_term: Tensor
    noise_term: Tensor
    jac_term: Tensor


class ScalarResidual(nn.Module):
    """Interface: forward(z [P, 1], context [P, C]) -> eps_hat [P, 1]."""


class ResidualMLP(ScalarResidual):
    """Default residual network: stacked dense layers with LeakyReLU."""

    def __init__(self, context_dim: int, hidden: tuple[int, ...] = (128, 128, 128)):
        super().__init__()
        layers: list[nn.Module] = []
        d = 1 + context_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.LeakyReLU()]
            d = h
        layers.append(nn.Linear(d, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z: Tensor, context: Tensor) -> Tensor:
        return self.net(torch.cat([z, context], dim=1))


class AffineResidual(ScalarResidual):
    """r = scale * z + <context_weight, context> + bias; analytic test double."""

    def __init__(self, scale: float, context_weight: Tensor | None = None, bias: float = 0.0):
        super().__init__()
        self.register_buffer("scale", torch.as_tensor(float(scale)))
        self.register_buffer("bias", torch.as_tensor(float(bias)))
        if context_weight is not None:
            self.register_buffer("context_weight", torch.as_tensor(context_weight))
        else:
            self.context_weight = None

    def forward(self, z: Tensor, context: Tensor) -> Tensor:
        out = self.scale * z + self.bias
        if self.context_weight is not None:
            out = out + (context * self.context_weight).sum(dim=1, keepdim=True)
        return out


class MonotoneResidual(ScalarResidual):
    """Random residual strictly increasing in z: a positive linear slope plus
    tanh bumps whose z-coefficients share the sign of their amplitudes. Used
    by normalization checks, where r must be a bijection in z."""

    def __init__(self, context_dim: int, num_terms: int = 6, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        # slope close to 1 and small bump amplitudes keep r(+-10) far into the
        # standard-normal tails, so the density over [-10, 10] integrates to 1
        self.register_buffer("slope", 0.75 + 0.5 * torch.rand((), generator=g))
        self.register_buffer("amp", torch.randn(num_terms, generator=g).abs() * 0.25)
        self.register_buffer("freq", torch.randn(num_terms, generator=g).abs() * 0.5 + 0.2)
        self.register_buffer("ctx_w", torch.randn(num_terms, context_dim, generator=g) * 0.5)
        self.register_buffer("offset", torch.randn(num_terms, generator=g))

    def forward(self, z: Tensor, context: Tensor) -> Tensor:
        pre = z * self.freq + context @ self.ctx_w.T + self.offset
        return self.slope * z + (self.amp * torch.tanh(pre)).sum(dim=1, keepdim=True)


class FlowPrior(nn.Module):
    """A set of per-coordinate residual networks over one latent block."""

    def __init__(
        self,
        dim: int,
        context_dim: int,
        hidden: tuple[int, ...] = (128, 128, 128),
        residuals: list[ScalarResidual] | None = None,
    ):
        super().__init__()
        if residuals is not None and len(residuals) != dim:
            raise ValueError(f"expected {dim} residual networks, got {len(residuals)}")
        self.dim = dim
        self.context_dim = context_dim
        self.residuals = nn.ModuleList(
            residuals if residuals is not None else [ResidualMLP(context_dim, hidden) for _ in range(dim)]
        )

    def residual_noise(self, z_cur: Tensor, context: Tensor) -> Tensor:
        """eps_hat [P, dim] from current coordinates [P, dim] and context [P, C]."""
        cols = [r(z_cur[:, i : i + 1], context) for i, r in enumerate(self.residuals)]
        return torch.cat(cols, dim=1)

    def noise_and_jacobian(
        self, z_cur: Tensor, context: Tensor, create_graph: bool = False
    ) -> tuple[Tensor, Tensor]:
        """eps_hat and the diagonal d r_i / d z_i, both [P, dim].

        The derivative comes from one reverse-mode pass: gradients of
        sum(eps_hat) w.r.t. z_cur hit only the diagonal because residual i
        never reads coordinate j != i.
        """
        with torch.enable_grad():
            if not z_cur.requires_grad:
                z_cur = z_cur.detach().requires_grad_(True)
            eps = self.residual_noise(z_cur, context)
            (diag,) = torch.autograd.grad(eps.sum(), z_cur, create_graph=create_graph)
        return eps, diag


def jacobian_diag(prior: FlowPrior, z_t: Tensor, context: Tensor) -> Tensor:
    """Autodiff diagonal d r_i / d z_{t,i} at the given points, [P, dim]."""
    _, diag = prior.noise_and_jacobian(z_t, context, create_graph=False)
    return diag.detach()


def _sequence_log_density(
    prior: FlowPrior, z: Tensor, context: Tensor, create_graph: bool
) -> PriorLogDensity:
    b, steps, dim = z.shape[0], z.shape[1] - 1, z.shape[2]
    initial = standard_normal_logpdf(z[:, 0]).sum(dim=1)

    flat_z = z[:, 1:].reshape(b * steps, dim)
    flat_ctx = context.reshape(b * steps, -1)
    eps, diag = prior.noise_and_jacobian(flat_z, flat_ctx, create_graph=create_graph)
    noise = standard_normal_logpdf(eps).reshape(b, steps, dim).sum(dim=(1, 2))
    jac = torch.log(diag.abs() + LOG_JAC_FLOOR).reshape(b, steps, dim).sum(dim=(1, 2))
    return PriorLogDensity(
        total=initial + noise + jac, initial_term=initial, noise_term=noise, jac_term=jac
    )


def shared_prior_log_density(
    prior: FlowPrior, z_c: Tensor, create_graph: bool = False
) -> PriorLogDensity:
    """log p(z^c_{1:T}) with context z^c_{t-1} for each step t >= 2."""
    if z_c.dim() != 3:
        raise ValueError(f"expected [B, T, n] latents, got shape {tuple(z_c.shape)}")
    if z_c.shape[1] < 2:
        raise ValueError("sequence length must be >= 2 to score transitions")
    if z_c.shape[2] != prior.dim:
        raise ValueError(f"latent dim {z_c.shape[2]} != prior dim {prior.dim}")
    return _sequence_log_density(prior, z_c, z_c[:, :-1], create_graph)


def private_prior_log_density(
    prior: FlowPrior, z_s: Tensor, z_c: Tensor, create_graph: bool = False
) -> PriorLogDensity:
    """log p(z^s_{1:T} | z^c_{1:T}) with context (z^s_{t-1}, z^c_t)."""
    if z_s.dim() != 3 or z_c.dim() != 3:
        raise ValueError("expected [B, T, n] latents")
    if z_s.shape[:2] != z_c.shape[:2]:
        raise ValueError(
            f"specific {tuple(z_s.shape[:2])} and shared {tuple(z_c.shape[:2])} disagree on B, T"
        )
    if z_s.shape[1] < 2:
        raise ValueError("sequence length must be >= 2 to score transitions")
    if z_s.shape[2] != prior.dim:
        raise ValueError(f"latent dim {z_s.shape[2]} != prior dim {prior.dim}")
    context = torch.cat([z_s[:, :-1], z_c[:, 1:]], dim=2)
    return _sequence_log_density(prior, z_s, context, create_graph)
