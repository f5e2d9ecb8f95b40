"""Next-patch pre-training: schedule, AdamW, augmentations, training loop.

Every source of randomness is keyed by (seed, purpose, step), so a resumed
run reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import MultivariateSeries, PackedBatch, pack_batch
from .decoder import ModelConfig, Weights, forward, init_weights
from .smm import nll_loss


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient goes non-finite."""


@dataclass(frozen=True)
class AugmentConfig:
    offset_prob: float = 1.0
    shuffle_prob: float = 0.1
    shuffle_sigma: float = 1000.0

    def __post_init__(self):
        if not 0.0 <= self.shuffle_prob <= 1.0:
            raise ValueError("shuffle_prob must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    eps: float = 1e-8
    warmup_steps: int = 5000
    total_steps: int = 193000
    batch_size: int = 192
    context_len: int = 512
    lookahead_len: int = 0
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 100
    keep_checkpoints: int = 3
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.lookahead_len < 0:
            raise ValueError("lookahead_len must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.95)))
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to 0 at total_steps."""
    if step < 0 or step > config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span == 0:
        return 0.0
    frac = (step - config.warmup_steps) / span
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, weights: Weights) -> "OptimizerState":
        return cls(
            m={k: torch.zeros_like(t) for k, t in weights.tensors.items()},
            v={k: torch.zeros_like(t) for k, t in weights.tensors.items()},
            step=0,
        )


def _decayable(name: str) -> bool:
    # RMSNorm gains (and biases) are excluded from weight decay
    return not (name.endswith(".gain") or name.endswith(".bias"))


@torch.no_grad()
def adamw_step(
    weights: Weights,
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    b1, b2 = config.betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, w in weights.tensors.items():
        g = grads[name]
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        if config.weight_decay and _decayable(name):
            w.mul_(1.0 - lr * config.weight_decay)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        w.addcdiv_(m / bc1, (v / bc2).sqrt().add_(config.eps), value=-lr)


def augment_offset(
    series: MultivariateSeries, context_len: int, rng: np.random.Generator
) -> MultivariateSeries:
    """Pick a random context_len window (uniform start offset); series
    shorter than the window are returned whole (left-padding happens at
    packing time)."""
    extra = series.length - context_len
    if extra <= 0:
        return series
    start = int(rng.integers(0, extra + 1))
    return series.slice_time(start, start + context_len)


def augment_shuffle(
    dataset_size: int,
    index: int,
    rng: np.random.Generator,
    shuffle_prob: float,
    sigma: float,
    group_size_range: tuple[int, int] = (2, 4),
) -> list[int]:
    """Return member dataset indices for one training sample.

    Usually just [index] (the natural grouping). With probability
    shuffle_prob, builds a synthetic group of round(index + N(0, sigma))
    indices clamped to bounds, drawn without replacement.
    """
    if dataset_size < 1:
        raise ValueError("dataset must be non-empty")
    if rng.random() >= shuffle_prob:
        return [index]
    lo, hi = group_size_range
    size = min(int(rng.integers(lo, hi + 1)), dataset_size)
    members: list[int] = []
    attempts = 0
    while len(members) < size and attempts < 100 * size:
        cand = int(round(index + rng.normal(0.0, sigma)))
        cand = min(max(cand, 0), dataset_size - 1)
        if cand not in members:
            members.append(cand)
        attempts += 1
    if not members:
        members = [index]
    return members


def _combine_group(
    dataset: list[MultivariateSeries], members: list[int], max_variates: int
) -> MultivariateSeries:
    """Stack member series variates into one shared-id group, right-aligned
    on the time axis and capped at max_variates."""
    if len(members) == 1:
        return dataset[members[0]]
    length = max(dataset[i].length for i in members)
    rows, masks = [], []
    for i in members:
        s = dataset[i]
        pad = length - s.length
        v = np.pad(s.values, ((0, 0), (pad, 0)))
        mk = np.pad(s.valid_mask, ((0, 0), (pad, 0)))
        rows.append(v)
        masks.append(mk)
        if sum(r.shape[0] for r in rows) >= max_variates:
            break
    values = np.concatenate(rows)[:max_variates]
    mask = np.concatenate(masks)[:max_variates]
    return MultivariateSeries(
        values=values,
        group_ids=np.zeros(values.shape[0], dtype=np.int64),
        valid_mask=mask,
        series_name="shuffled-" + "-".join(str(i) for i in members),
    )


def _epoch_permutation(seed: int, epoch: int, size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xE, epoch]))
    return rng.permutation(size)


def assemble_batch(
    dataset: list[MultivariateSeries],
    step: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> PackedBatch:
    """Deterministic batch for a given step: epoch-shuffled sample indices,
    variate-shuffle and offset augmentations, then packing.

    Windows span context_len + lookahead_len steps. With a non-zero
    lookahead, scaler statistics come from the leading context_len steps
    only, so the model is trained to predict values that can fall outside
    the standardized range of its context — the same condition it meets
    when forecasting past the end of a normalized context window.
    """
    n = len(dataset)
    window_len = train_config.context_len + train_config.lookahead_len
    rng = np.random.default_rng(
        np.random.SeedSequence([train_config.seed & 0xFFFFFFFFFFFFFFFF, 0x5, step])
    )
    groups: list[MultivariateSeries] = []
    perms: dict[int, np.ndarray] = {}
    for j in range(train_config.batch_size):
        pos = step * train_config.batch_size + j
        epoch, within = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = _epoch_permutation(train_config.seed, epoch, n)
        index = int(perms[epoch][within])
        members = augment_shuffle(
            n,
            index,
            rng,
            train_config.augment.shuffle_prob,
            train_config.augment.shuffle_sigma,
        )
        series = _combine_group(dataset, members, model_config.max_variates)
        if rng.random() < train_config.augment.offset_prob:
            series = augment_offset(series, window_len, rng)
        else:
            if series.length > window_len:
                series = series.slice_time(series.length - window_len, series.length)
        groups.append(series)
    return pack_batch(
        groups,
        model_config.patch_size,
        model_config.max_variates,
        window_len,
        norm_len=train_config.context_len if train_config.lookahead_len else None,
    )


def compute_loss(
    batch: PackedBatch, config: ModelConfig, weights: Weights
) -> torch.Tensor:
    params = forward(batch, config, weights)
    return nll_loss(params, batch.values, batch.pad_mask)


def train_loop(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: list[MultivariateSeries],
    out_dir=None,
    resume: bool = False,
    log_fn=None,
) -> tuple[Weights, list[dict]]:
    """Run the pre-training loop; returns final weights and the metrics log.

    If ``out_dir`` is set, writes periodic checkpoints (keeping the most
    recent few), a final checkpoint, and an NDJSON metrics log. ``resume``
    continues from the newest checkpoint in out_dir.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")

    start_step = 0
    if resume:
        if out_dir is None:
            raise ValueError("resume requires out_dir")
        latest = _latest_checkpoint(out_dir)
        if latest is None:
            raise FileNotFoundError(f"no checkpoint to resume from in {out_dir}")
        weights, meta, extra = load_checkpoint(latest)
        state = OptimizerState(
            m={k: extra[f"opt.m.{k}"] for k in weights.tensors},
            v={k: extra[f"opt.v.{k}"] for k in weights.tensors},
            step=int(meta["step"]),
        )
        start_step = int(meta["step"])
    else:
        weights = init_weights(model_config, train_config.seed)
        state = OptimizerState.zeros_like(weights)

    metrics: list[dict] = []
    log_path = os.path.join(out_dir, "metrics.ndjson") if out_dir else None
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None
    kept: list[str] = []

    try:
        for step in range(start_step, train_config.total_steps):
            t0 = time.perf_counter()
            batch = assemble_batch(dataset, step, model_config, train_config)
            weights.requires_grad_(True)
            loss = compute_loss(batch, model_config, weights)
            if not torch.isfinite(loss):
                if out_dir:
                    # abort, keeping the last good checkpoint on disk
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                raise TrainingDiverged(f"non-finite loss at step {step}")
            loss.backward()
            grads = {k: t.grad for k, t in weights.tensors.items()}
            with torch.no_grad():
                if train_config.grad_clip > 0:
                    total = torch.sqrt(
                        sum(g.pow(2).sum() for g in grads.values())
                    )
                    if total > train_config.grad_clip:
                        scale = train_config.grad_clip / total
                        for g in grads.values():
                            g.mul_(scale)
            weights.requires_grad_(False)
            lr = lr_at(step, train_config)
            adamw_step(weights, grads, state, lr, train_config)
            for t in weights.tensors.values():
                t.grad = None

            record = {
                "step": step,
                "lr": lr,
                "loss": float(loss.item()),
                "wallclock_ms": (time.perf_counter() - t0) * 1000.0,
            }
            metrics.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if log_fn:
                log_fn(record)

            if out_dir and (step + 1) % train_config.checkpoint_every == 0:
                path = os.path.join(out_dir, f"checkpoint-{step + 1:08d}.ckpt")
                _save_training_checkpoint(path, weights, state, train_config)
                kept.append(path)
                while len(kept) > train_config.keep_checkpoints:
                    stale = kept.pop(0)
                    if os.path.exists(stale):
                        os.remove(stale)
    finally:
        if log_fh:
            log_fh.close()

    if out_dir:
        final = os.path.join(out_dir, "checkpoint-final.ckpt")
        _save_training_checkpoint(final, weights, state, train_config)
    return weights, metrics


def _save_training_checkpoint(
    path, weights: Weights, state: OptimizerState, train_config: TrainConfig
) -> None:
    extra = {}
    for k in weights.tensors:
        extra[f"opt.m.{k}"] = state.m[k]
        extra[f"opt.v.{k}"] = state.v[k]
    meta = {"step": state.step, "train_config": train_config.to_dict()}
    save_checkpoint(path, weights, meta=meta, extra_tensors=extra)


def _latest_checkpoint(out_dir) -> str | None:
    names = [
        n
        for n in os.listdir(out_dir)
        if n.startswith("checkpoint-") and n.endswith(".ckpt") and n != "checkpoint-final.ckpt"
    ]
    if not names:
        final = os.path.join(out_dir, "checkpoint-final.ckpt")
        return final if os.path.exists(final) else None
    return os.path.join(out_dir, sorted(names)[-1])
