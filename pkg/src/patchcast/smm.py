"""Student-T mixture distribution: log-density, training loss, sampling.

log_prob/nll_loss are torch (differentiable); sampling is numpy-based with
explicit seeds so forecasts are reproducible and parallelizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class MixtureSpec:
    """Constrained mixture parameters; last axis indexes the k components.

    weights sum to 1, scales > 0, dofs > 0. Leading axes broadcast (one
    mixture per variate/step in batched use). The decoder head keeps its
    dofs above 2 (finite variance); the density itself is well-defined for
    any positive dof, including Cauchy (dof 1).
    """

    weights: torch.Tensor
    locations: torch.Tensor
    scales: torch.Tensor
    dofs: torch.Tensor

    def __post_init__(self):
        w_sum = self.weights.sum(dim=-1)
        if not torch.allclose(w_sum, torch.ones_like(w_sum), atol=1e-6):
            raise ValueError("mixture weights must sum to 1")
        if not (self.scales > 0).all():
            raise ValueError("scales must be strictly positive")
        if not (self.dofs > 0).all():
            raise ValueError("dofs must be strictly positive")


def _student_t_log_density(z: torch.Tensor, dof: torch.Tensor) -> torch.Tensor:
    """Log pdf of the standardized Student-T at z."""
    return (
        torch.lgamma((dof + 1) / 2)
        - torch.lgamma(dof / 2)
        - 0.5 * torch.log(math.pi * dof)
        - (dof + 1) / 2 * torch.log1p(z * z / dof)
    )


def log_prob(spec: MixtureSpec, y: torch.Tensor | float) -> torch.Tensor:
    """log sum_k w_k t_nu_k((y - mu_k)/sigma_k) / sigma_k via log-sum-exp."""
    y = torch.as_tensor(y, dtype=spec.locations.dtype, device=spec.locations.device)
    if not torch.isfinite(y).all():
        raise ValueError("log_prob requires finite y")
    z = (y.unsqueeze(-1) - spec.locations) / spec.scales
    comp = _student_t_log_density(z, spec.dofs) - torch.log(spec.scales)
    return torch.logsumexp(torch.log(spec.weights) + comp, dim=-1)


def mixture_log_prob_raw(
    weight_logits: torch.Tensor,
    locations: torch.Tensor,
    scale_raw: torch.Tensor,
    dof_raw: torch.Tensor,
    y: torch.Tensor,
) -> torch.Tensor:
    """log_prob computed directly from unconstrained parameters.

    Uses log-softmax for the weights so gradients stay stable; matches
    log_prob(constrained_spec, y) numerically.
    """
    log_w = torch.log_softmax(weight_logits, dim=-1)
    scales = torch.nn.functional.softplus(scale_raw)
    dofs = 2.0 + torch.nn.functional.softplus(dof_raw)
    z = (y.unsqueeze(-1) - locations) / scales
    comp = _student_t_log_density(z, dofs) - torch.log(scales)
    return torch.logsumexp(log_w + comp, dim=-1)


def nll_loss(params, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the next patch.

    ``params`` is a decoder SmmParams bundle whose position j parameterizes
    patch j+1; ``targets`` are the normalized values (..., M, T) and
    ``loss_mask`` marks scoreable steps. The final patch position has no
    target and is dropped; masked steps are excluded from the mean.
    """
    if not torch.isfinite(targets[loss_mask]).all():
        raise ValueError("targets contain non-finite values at unmasked steps")
    p = params.patch_size
    num_pos = params.weight_logits.shape[-3]
    t = targets.shape[-1]
    if t != num_pos * p:
        raise ValueError(f"targets length {t} != positions*patch {num_pos * p}")

    # step t >= P is scored by position t//P - 1
    tgt = targets[..., p:].reshape(*targets.shape[:-1], num_pos - 1, p)
    msk = loss_mask[..., p:].reshape(*loss_mask.shape[:-1], num_pos - 1, p)
    lp = mixture_log_prob_raw(
        params.weight_logits[..., : num_pos - 1, :, :],
        params.locations[..., : num_pos - 1, :, :],
        params.scale_raw[..., : num_pos - 1, :, :],
        params.dof_raw[..., : num_pos - 1, :, :],
        tgt,
    )
    count = msk.sum()
    if count.item() == 0:
        raise ValueError("nll_loss needs at least one unmasked step")
    return -(lp * msk).sum() / count


def sample(spec: MixtureSpec, n: int, seed) -> np.ndarray:
    """Draw n values per mixture; output shape (n, *leading_shape).

    Component choice is inverse-CDF on a 64-bit uniform; the Student-T draw
    is the normal / sqrt(chi-square / dof) ratio. Deterministic per seed
    (an int or a numpy SeedSequence).
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    weights = spec.weights.detach().cpu().numpy().astype(np.float64)
    locs = spec.locations.detach().cpu().numpy().astype(np.float64)
    scales = spec.scales.detach().cpu().numpy().astype(np.float64)
    dofs = spec.dofs.detach().cpu().numpy().astype(np.float64)

    lead = weights.shape[:-1]
    k = weights.shape[-1]
    flat_w = weights.reshape(-1, k)
    cum = np.cumsum(flat_w, axis=-1)
    cum[:, -1] = 1.0  # kill rounding drift at the top

    u = rng.integers(0, 2**64, size=(n, flat_w.shape[0]), dtype=np.uint64) / 2.0**64
    comp = np.empty_like(u, dtype=np.int64)
    for i in range(flat_w.shape[0]):
        comp[:, i] = np.searchsorted(cum[i], u[:, i], side="right")
    comp = np.minimum(comp, k - 1)

    flat_loc = locs.reshape(-1, k)
    flat_scale = scales.reshape(-1, k)
    flat_dof = dofs.reshape(-1, k)
    rows = np.arange(flat_w.shape[0])[None, :]
    mu = flat_loc[rows, comp]
    sigma = flat_scale[rows, comp]
    nu = flat_dof[rows, comp]

    z = rng.standard_normal(size=u.shape)
    chi2 = rng.chisquare(nu)
    t = z / np.sqrt(chi2 / nu)
    out = mu + sigma * t
    return out.reshape(n, *lead) if lead else out.reshape(n)
