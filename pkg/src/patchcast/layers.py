"""Differentiable primitives: RMSNorm, SwiGLU, rotary embeddings with XPOS
decay, and masked scaled dot-product attention.

Everything here is a pure function of torch tensors; gradients come from
autograd and are validated against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

CAUSAL_TIME = "causal-time"
BLOCK_DIAGONAL_SPACE = "block-diagonal-space"


@dataclass(frozen=True)
class RotaryParams:
    head_dim: int
    base: float = 10000.0
    xpos_decay: float = 0.999  # ζ; 1.0 disables the decay

    def __post_init__(self):
        if self.head_dim % 2 != 0 or self.head_dim < 2:
            raise ValueError("head_dim must be a positive even integer")
        if not 0.0 < self.xpos_decay <= 1.0:
            raise ValueError("xpos_decay must lie in (0, 1]")


@dataclass(frozen=True)
class AttentionMask:
    """Which (query, key) pairs may interact.

    ``causal-time`` allows j <= i. ``block-diagonal-space`` allows pairs with
    equal non-negative ids; id -1 marks empty variate slots, which get no
    keys at all (their attention output is defined to be zero).
    """

    kind: str
    length: int
    id_values: torch.Tensor | None = None

    def __post_init__(self):
        if self.kind not in (CAUSAL_TIME, BLOCK_DIAGONAL_SPACE):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == BLOCK_DIAGONAL_SPACE:
            if self.id_values is None or self.id_values.shape[-1] != self.length:
                raise ValueError("block-diagonal mask needs id_values of the mask length")

    def allowed(self, device=None) -> torch.Tensor:
        """Boolean (length, length) matrix, True where attention is allowed."""
        if self.kind == CAUSAL_TIME:
            return torch.ones(self.length, self.length, dtype=torch.bool, device=device).tril()
        ids = self.id_values.to(device=device)
        return build_space_mask(ids)


def build_space_mask(ids: torch.Tensor) -> torch.Tensor:
    """(..., S) integer ids -> (..., S, S) boolean allowed matrix.

    Pairs attend iff their ids match and are >= 0.
    """
    eq = ids.unsqueeze(-1) == ids.unsqueeze(-2)
    return eq & (ids >= 0).unsqueeze(-1)


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """gain * x / sqrt(mean(x^2) + eps), normalizing over the last axis."""
    ms = x.pow(2).mean(dim=-1, keepdim=True)
    return gain * x * torch.rsqrt(ms + eps)


def swiglu_ffn(
    x: torch.Tensor,
    w_gate: torch.Tensor,
    w_val: torch.Tensor,
    w_out: torch.Tensor,
) -> torch.Tensor:
    """W_out @ (swish(W_gate x) * (W_val x)); no biases.

    ``w_gate``/``w_val`` are (F, D), ``w_out`` is (D, F); x is (..., D).
    """
    gate = x @ w_gate.T
    val = x @ w_val.T
    hidden = torch.nn.functional.silu(gate) * val
    return hidden @ w_out.T


def apply_rotary_xpos(
    q: torch.Tensor,
    k: torch.Tensor,
    params: RotaryParams,
    positions: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate consecutive dim pairs of q/k by pos * theta_i and apply XPOS
    scaling (q by ζ^pos, k by ζ^-pos).

    q, k: (..., S, head_dim); positions: (S,) integers. Positions are offset
    to the window center before exponentiation so ζ^pos stays in range for
    long contexts; attention scores depend only on position differences, so
    the offset never changes results.
    """
    hd = params.head_dim
    if q.shape[-1] != hd or k.shape[-1] != hd:
        raise ValueError("q/k last dim must equal params.head_dim")
    dtype = q.dtype
    pos = positions.to(dtype)
    center = (pos.max() + pos.min()) / 2
    pos = pos - center

    half = hd // 2
    theta = params.base ** (
        -2.0 * torch.arange(half, dtype=dtype, device=q.device) / hd
    )
    angles = pos[:, None] * theta[None, :]  # (S, half)
    cos, sin = angles.cos(), angles.sin()

    def rotate(x: torch.Tensor) -> torch.Tensor:
        x1, x2 = x[..., 0::2], x[..., 1::2]
        r1 = x1 * cos - x2 * sin
        r2 = x1 * sin + x2 * cos
        return torch.stack([r1, r2], dim=-1).flatten(start_dim=-2)

    q_rot, k_rot = rotate(q), rotate(k)
    if params.xpos_decay != 1.0:
        zeta = torch.as_tensor(params.xpos_decay, dtype=dtype, device=q.device)
        scale = zeta ** pos[:, None]
        q_rot = q_rot * scale
        k_rot = k_rot / scale
    return q_rot, k_rot


def attention_with_allowed(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    allowed: torch.Tensor,
) -> torch.Tensor:
    """Scaled dot-product attention with an explicit boolean allowed matrix.

    q, k, v: (..., S, head_dim); allowed broadcastable to (..., S, S).
    Disallowed pairs get -inf logits; query rows with no allowed key output
    exactly zero.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-2, -1)) * scale
    neg_inf = torch.tensor(float("-inf"), dtype=scores.dtype, device=scores.device)
    scores = torch.where(allowed, scores, neg_inf)
    has_key = allowed.any(dim=-1, keepdim=True)  # (..., S, 1)
    # keep softmax finite on fully masked rows, then zero them out
    scores = torch.where(has_key, scores, torch.zeros_like(scores))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return torch.where(has_key, out, torch.zeros_like(out))


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: AttentionMask,
) -> torch.Tensor:
    """Attention over (..., S, head_dim) tensors under an AttentionMask."""
    if q.shape[-2] != mask.length:
        raise ValueError("mask length must match the sequence axis")
    return attention_with_allowed(q, k, v, mask.allowed(device=q.device))
