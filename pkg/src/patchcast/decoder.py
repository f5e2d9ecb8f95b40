"""Patch-based decoder-only transformer with proportional factorized
space-time attention and a Student-T mixture output head.

The stack repeats a segment of ``spacewise_cadence`` blocks: one bidirectional
space-wise attention block (restricted by the group-id mask) followed by
cadence-1 causal time-wise blocks with rotary/XPOS positions. Each block is
pre-norm (RMSNorm -> attention -> residual, RMSNorm -> SwiGLU -> residual).
Position j of the output head parameterizes the distribution of patch j+1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import PackedBatch
from .layers import (
    RotaryParams,
    apply_rotary_xpos,
    attention_with_allowed,
    build_space_mask,
    rmsnorm,
    swiglu_ffn,
)

SPACE = "space"
TIME = "time"

# raw-parameter channels of the mixture head, in payload order
_HEAD_FIELDS = ("weight_logit", "location", "scale_raw", "dof_raw")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    mlp_dim: int = 256
    num_layers: int = 6
    num_heads: int = 4
    patch_size: int = 8
    spacewise_cadence: int = 3
    smm_components: int = 3
    max_variates: int = 8
    rotary_base: float = 10000.0
    xpos_decay: float = 0.999
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_layers % self.spacewise_cadence != 0:
            raise ValueError("num_layers must be divisible by spacewise_cadence")
        if self.patch_size < 1 or self.smm_components < 1:
            raise ValueError("patch_size and smm_components must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def rotary(self) -> RotaryParams:
        return RotaryParams(
            head_dim=self.head_dim, base=self.rotary_base, xpos_decay=self.xpos_decay
        )

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Small preset that trains in minutes on a laptop CPU."""
        return cls()

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-scale preset (103M-parameter class)."""
        return cls(
            embed_dim=512,
            mlp_dim=2048,
            num_layers=24,
            num_heads=8,
            patch_size=32,
            spacewise_cadence=3,
            smm_components=16,
            max_variates=32,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def layer_layout(num_layers: int, cadence: int) -> list[str]:
    """Repeating [space, time, ..., time] segment labels, space first."""
    if cadence < 1 or num_layers % cadence != 0:
        raise ValueError("num_layers must be a positive multiple of cadence")
    return [SPACE if i % cadence == 0 else TIME for i in range(num_layers)]


@dataclass
class Weights:
    """All learnable parameters, keyed by name; order is deterministic."""

    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def requires_grad_(self, flag: bool = True) -> "Weights":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "Weights":
        return Weights(
            config=self.config,
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.embed_dim, config.mlp_dim
    p, k = config.patch_size, config.smm_components
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, p),
        "patch_embed.bias": (d,),
    }
    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.attn_norm.gain"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (d, d)
        shapes[f"{prefix}.ffn_norm.gain"] = (d,)
        shapes[f"{prefix}.ffn.w_gate"] = (f, d)
        shapes[f"{prefix}.ffn.w_val"] = (f, d)
        shapes[f"{prefix}.ffn.w_out"] = (d, f)
    shapes["final_norm.gain"] = (d,)
    shapes["head.weight"] = (p * k * 4, d)
    shapes["head.bias"] = (p * k * 4,)
    return shapes


def _softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_weights(config: ModelConfig, seed: int, dtype=torch.float32) -> Weights:
    """Variance-scaled init; the head bias starts the mixtures near standard
    (locations 0, scales 1, uniform weights, dof 5)."""
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = torch.ones(shape, dtype=dtype)
        elif name == "head.bias":
            p, k = config.patch_size, config.smm_components
            bias = torch.zeros(p, k, 4, dtype=dtype)
            bias[..., 2] = _softplus_inverse(1.0)  # scale 1
            bias[..., 3] = _softplus_inverse(3.0)  # dof 2 + 3 = 5
            tensors[name] = bias.reshape(-1)
        elif name.endswith(".bias"):
            tensors[name] = torch.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[-1]
            std = 0.02 if name == "head.weight" else fan_in**-0.5
            tensors[name] = torch.empty(shape, dtype=dtype).normal_(
                0.0, std, generator=gen
            )
    return Weights(config=config, tensors=tensors)


@dataclass(frozen=True)
class SmmParams:
    """Raw mixture-head outputs, shape (B, M, positions, P, k) per field.

    Position j parameterizes the distribution of the steps of patch j+1.
    Constrained views: softmax weights, softplus scales, dof 2 + softplus.
    """

    weight_logits: torch.Tensor
    locations: torch.Tensor
    scale_raw: torch.Tensor
    dof_raw: torch.Tensor
    patch_size: int

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.weight_logits, dim=-1)

    def scales(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.scale_raw)

    def dofs(self) -> torch.Tensor:
        return 2.0 + torch.nn.functional.softplus(self.dof_raw)


def patch_embed(
    values: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    patch_size: int,
) -> torch.Tensor:
    """(..., M, T) values -> (..., M, T/P, D) via a linear map per patch."""
    t = values.shape[-1]
    if t % patch_size != 0:
        raise ValueError(f"length {t} not divisible by patch size {patch_size}")
    patches = values.reshape(*values.shape[:-1], t // patch_size, patch_size)
    return patches @ weight.T + bias


def _attention_block(
    x: torch.Tensor,
    w: dict[str, torch.Tensor],
    prefix: str,
    config: ModelConfig,
    *,
    spacewise: bool,
    allowed: torch.Tensor,
    rotary: RotaryParams | None,
) -> torch.Tensor:
    """Pre-norm attention sub-block over x of shape (B, M, N, D).

    Time-wise attends along N per variate; space-wise attends along M per
    patch position. ``allowed`` broadcasts against the (S, S) score matrix.
    """
    b, m, n, d = x.shape
    h, hd = config.num_heads, config.head_dim
    normed = rmsnorm(x, w[f"{prefix}.attn_norm.gain"], config.rmsnorm_eps)
    q = normed @ w[f"{prefix}.attn.wq"].T
    k = normed @ w[f"{prefix}.attn.wk"].T
    v = normed @ w[f"{prefix}.attn.wv"].T

    if spacewise:
        # (B, M, N, D) -> (B, N, H, M, hd)
        def split(t):
            return t.reshape(b, m, n, h, hd).permute(0, 2, 3, 1, 4)

        out = attention_with_allowed(split(q), split(k), split(v), allowed)
        out = out.permute(0, 3, 1, 2, 4).reshape(b, m, n, d)
    else:
        # (B, M, N, D) -> (B, M, H, N, hd)
        def split(t):
            return t.reshape(b, m, n, h, hd).permute(0, 1, 3, 2, 4)

        qh, kh = split(q), split(k)
        positions = torch.arange(n, device=x.device)
        qh, kh = apply_rotary_xpos(qh, kh, rotary, positions)
        out = attention_with_allowed(qh, kh, split(v), allowed)
        out = out.permute(0, 1, 3, 2, 4).reshape(b, m, n, d)

    return x + out @ w[f"{prefix}.attn.wo"].T


def forward(batch: PackedBatch, config: ModelConfig, weights: Weights) -> SmmParams:
    """Run the decoder over a packed batch and emit raw mixture parameters."""
    w = weights.tensors
    values = batch.values
    b, m, t = values.shape
    if m > config.max_variates:
        raise ValueError(f"batch has {m} variates > max_variates {config.max_variates}")
    p = config.patch_size
    if t % p != 0:
        raise ValueError(f"batch length {t} not divisible by patch size {p}")
    num_pos = t // p

    x = patch_embed(values, w["patch_embed.weight"], w["patch_embed.bias"], p)

    causal = torch.ones(num_pos, num_pos, dtype=torch.bool, device=values.device).tril()
    # (B, 1, 1, M, M): same group mask for every patch position and head
    space_allowed = build_space_mask(batch.id_mask.to(values.device))[:, None, None, :, :]
    rotary = config.rotary

    for i, kind in enumerate(layer_layout(config.num_layers, config.spacewise_cadence)):
        prefix = f"layers.{i}"
        x = _attention_block(
            x,
            w,
            prefix,
            config,
            spacewise=(kind == SPACE),
            allowed=space_allowed if kind == SPACE else causal,
            rotary=None if kind == SPACE else rotary,
        )
        normed = rmsnorm(x, w[f"{prefix}.ffn_norm.gain"], config.rmsnorm_eps)
        x = x + swiglu_ffn(
            normed,
            w[f"{prefix}.ffn.w_gate"],
            w[f"{prefix}.ffn.w_val"],
            w[f"{prefix}.ffn.w_out"],
        )

    x = rmsnorm(x, w["final_norm.gain"], config.rmsnorm_eps)
    raw = x @ w["head.weight"].T + w["head.bias"]  # (B, M, N, P*k*4)
    k = config.smm_components
    raw = raw.reshape(b, m, num_pos, p, k, 4)
    return SmmParams(
        weight_logits=raw[..., 0],
        locations=raw[..., 1],
        scale_raw=raw[..., 2],
        dof_raw=raw[..., 3],
        patch_size=p,
    )
