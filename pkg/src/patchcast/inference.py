"""Autoregressive Monte Carlo forecasting.

Each sample path evolves independently: patches are generated by forwarding
the context plus previously sampled patches, drawing one value per step from
the final-position mixtures, and appending. RNG streams are pre-assigned per
(path, group, variate, stage), so parallel and serial execution agree and a
longer horizon extends a shorter one bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import MultivariateSeries, ScalerStats, denormalize, instance_normalize
from .decoder import ModelConfig, Weights, forward
from .data import PackedBatch

DEFAULT_NUM_SAMPLES = 100


@dataclass(frozen=True)
class ForecastRequest:
    context: MultivariateSeries
    horizon: int
    num_samples: int = DEFAULT_NUM_SAMPLES
    quantiles: tuple[float, ...] = (0.025, 0.5, 0.975)
    seed: int = 0
    max_context: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantiles must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class ForecastResult:
    """Sample paths in original units plus median/quantile accessors."""

    samples: np.ndarray  # (num_samples, M, horizon)
    point: np.ndarray  # (M, horizon) median, lower-midpoint for even counts

    def quantile(self, q: float) -> np.ndarray:
        return np.quantile(self.samples, q, axis=0, method="linear")


def lower_median(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    """Median taking the lower of the two middle order statistics when the
    count is even."""
    n = samples.shape[axis]
    sorted_ = np.sort(samples, axis=axis)
    return np.take(sorted_, (n - 1) // 2, axis=axis)


def aggregate(samples: np.ndarray) -> ForecastResult:
    return ForecastResult(samples=samples, point=lower_median(samples, axis=0))


def _stream_seed(seed: int, path: int, group_id: int, idx_in_group: int, stage: int) -> int:
    key = f"{seed}|{path}|{group_id}|{idx_in_group}|{stage}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _sample_patch(
    weights_k: np.ndarray,
    locs: np.ndarray,
    scales: np.ndarray,
    dofs: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one value per step from per-step mixtures; arrays are (P, k)."""
    p, k = weights_k.shape
    cum = np.cumsum(weights_k, axis=-1)
    cum[:, -1] = 1.0
    u = rng.integers(0, 2**64, size=p, dtype=np.uint64) / 2.0**64
    comp = np.minimum(
        np.array([np.searchsorted(cum[i], u[i], side="right") for i in range(p)]),
        k - 1,
    )
    rows = np.arange(p)
    nu = dofs[rows, comp]
    z = rng.standard_normal(p)
    chi2 = rng.chisquare(nu)
    t = z / np.sqrt(chi2 / nu)
    return locs[rows, comp] + scales[rows, comp] * t


def forecast(
    request: ForecastRequest, config: ModelConfig, weights: Weights
) -> ForecastResult:
    """Monte Carlo forecast in original units.

    Generates ceil(horizon / P) patches autoregressively, then truncates to
    the horizon. Outputs are denormalized with the context scalers.
    """
    series = request.context
    if request.max_context is not None and series.length > request.max_context:
        series = series.slice_time(series.length - request.max_context, series.length)
    m = series.num_variates
    if m > config.max_variates:
        raise ValueError(f"context has {m} variates > max_variates {config.max_variates}")

    normalized, stats = instance_normalize(series)
    p = config.patch_size
    pad = (-series.length) % p
    t0 = series.length + pad
    values = np.zeros((m, t0), dtype=np.float32)
    values[:, pad:] = normalized
    valid = np.zeros((m, t0), dtype=bool)
    valid[:, pad:] = series.valid_mask

    stages = math.ceil(request.horizon / p)
    s = request.num_samples

    # per-variate identity for the RNG streams: (group id, index within group)
    group_ids = series.group_ids
    idx_in_group = np.zeros(m, dtype=int)
    for g in np.unique(group_ids):
        sel = np.where(group_ids == g)[0]
        idx_in_group[sel] = np.arange(len(sel))

    hist = np.repeat(values[None, :, :], s, axis=0)  # (S, M, T)
    hist_valid = np.repeat(valid[None, :, :], s, axis=0)

    for stage in range(stages):
        batch = PackedBatch(
            values=torch.from_numpy(hist.astype(np.float32)),
            pad_mask=torch.from_numpy(hist_valid),
            id_mask=torch.from_numpy(np.tile(group_ids, (s, 1))),
            scaler_mean=np.tile(stats.mean, (s, 1)),
            scaler_std=np.tile(stats.std, (s, 1)),
            patch_stride=p,
        )
        with torch.no_grad():
            params = forward(batch, config, weights)
        w_k = params.weights()[:, :, -1].numpy().astype(np.float64)  # (S, M, P, k)
        locs = params.locations[:, :, -1].numpy().astype(np.float64)
        scales = params.scales()[:, :, -1].numpy().astype(np.float64)
        dofs = params.dofs()[:, :, -1].numpy().astype(np.float64)

        new = np.empty((s, m, p), dtype=np.float64)
        for path in range(s):
            for var in range(m):
                rng = np.random.default_rng(
                    _stream_seed(
                        request.seed,
                        path,
                        int(group_ids[var]),
                        int(idx_in_group[var]),
                        stage,
                    )
                )
                new[path, var] = _sample_patch(
                    w_k[path, var], locs[path, var], scales[path, var], dofs[path, var], rng
                )
        hist = np.concatenate([hist, new.astype(np.float32)], axis=-1)
        hist_valid = np.concatenate(
            [hist_valid, np.ones((s, m, p), dtype=bool)], axis=-1
        )

    generated = hist[:, :, t0 : t0 + request.horizon].astype(np.float64)
    samples = denormalize(generated, stats)
    if not np.isfinite(samples).all():
        raise RuntimeError("forecast produced non-finite samples (model diverged)")
    return aggregate(samples)


def write_forecast_csv(path, result: ForecastResult, request: ForecastRequest) -> None:
    """CSV contract: series,variate,step,point,q{level}..."""
    qs = sorted(request.quantiles)
    q_arrays = {q: result.quantile(q) for q in qs}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["series", "variate", "step", "point"] + [f"q{q:g}" for q in qs]
        )
        m, h = result.point.shape
        name = request.context.series_name
        for var in range(m):
            for step in range(h):
                row = [name, var, step, repr(float(result.point[var, step]))]
                row += [repr(float(q_arrays[q][var, step])) for q in qs]
                writer.writerow(row)
