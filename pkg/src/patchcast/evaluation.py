"""Forecast metrics, the sliding-window backtest harness, and series
characterization labels."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MultivariateSeries

logger = logging.getLogger(__name__)

LABELS = ("sparse", "extreme_right_skew", "seasonal", "flat")


@dataclass(frozen=True)
class EvalConfig:
    context_len: int = 512
    horizons: tuple[int, ...] = (96, 192, 336, 720)
    stride: int = 512
    num_samples: int = 200
    seed: int = 0
    # optional per-series (mean, std) fitted on a training split, keyed by name
    normalization_stats: dict | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if any(h < 1 for h in self.horizons):
            raise ValueError("horizons must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "horizons" in d:
            d["horizons"] = tuple(d["horizons"])
        return cls(**d)


def mae_mse(
    y: np.ndarray, yhat: np.ndarray, stats: tuple[float, float] | None = None
) -> tuple[float, float]:
    """Mean absolute / squared error, optionally after standardizing both
    arrays with training-split (mean, std)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError("y and yhat must have equal nonzero lengths")
    if stats is not None:
        mean, std = stats
        y = (y - mean) / std
        yhat = (yhat - mean) / std
    diff = y - yhat
    return float(np.abs(diff).mean()), float((diff**2).mean())


def smape_smdape(y: np.ndarray, yhat: np.ndarray) -> tuple[float, float]:
    """Symmetric mean/median absolute percentage error.

    Per-step term 2|y - yhat| / (|y| + |yhat|), defined as 0 when both are
    zero; terms live in [0, 2].
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError("y and yhat must have equal nonzero lengths")
    denom = np.abs(y) + np.abs(yhat)
    terms = np.where(denom > 0, 2.0 * np.abs(y - yhat) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(terms.mean()), float(np.median(terms))


def sliding_eval(
    dataset: list[MultivariateSeries],
    forecaster,
    config: EvalConfig,
    dataset_name: str = "dataset",
) -> list[dict]:
    """Backtest a forecaster over sliding windows.

    ``forecaster(context_series, horizon) -> (M, horizon) point forecast``.
    Windows advance by ``config.stride``; metrics are macro-averaged over
    windows per (series, horizon), and summary rows average over series and
    then horizons. Returns rows {dataset, series, horizon, metric, value}.
    """
    rows: list[dict] = []
    per_horizon_acc: dict[int, dict[str, list[float]]] = {
        h: {m: [] for m in ("mae", "mse", "smape", "smdape")} for h in config.horizons
    }
    for series in dataset:
        stats = None
        if config.normalization_stats:
            stats = config.normalization_stats.get(series.series_name)
        for horizon in config.horizons:
            window_metrics = {m: [] for m in ("mae", "mse", "smape", "smdape")}
            start = 0
            while start + config.context_len + horizon <= series.length:
                context = series.slice_time(start, start + config.context_len)
                truth = series.values[
                    :, start + config.context_len : start + config.context_len + horizon
                ]
                point = forecaster(context, horizon)
                mae, mse = mae_mse(truth, point, stats)
                smape, smdape = smape_smdape(truth, point)
                window_metrics["mae"].append(mae)
                window_metrics["mse"].append(mse)
                window_metrics["smape"].append(smape)
                window_metrics["smdape"].append(smdape)
                start += config.stride
            if not window_metrics["mae"]:
                logger.warning(
                    "series %r too short for context %d + horizon %d; skipped",
                    series.series_name,
                    config.context_len,
                    horizon,
                )
                continue
            for metric, values in window_metrics.items():
                value = float(np.mean(values))
                rows.append(
                    {
                        "dataset": dataset_name,
                        "series": series.series_name,
                        "horizon": horizon,
                        "metric": metric,
                        "value": value,
                    }
                )
                per_horizon_acc[horizon][metric].append(value)

    for horizon, acc in per_horizon_acc.items():
        for metric, values in acc.items():
            if values:
                rows.append(
                    {
                        "dataset": dataset_name,
                        "series": "__all__",
                        "horizon": horizon,
                        "metric": metric,
                        "value": float(np.mean(values)),
                    }
                )
    # horizon-averaged summary
    for metric in ("mae", "mse", "smape", "smdape"):
        values = [
            r["value"]
            for r in rows
            if r["series"] == "__all__" and r["metric"] == metric
        ]
        if values:
            rows.append(
                {
                    "dataset": dataset_name,
                    "series": "__all__",
                    "horizon": 0,
                    "metric": metric,
                    "value": float(np.mean(values)),
                }
            )
    return rows


def persistence_forecast(context: MultivariateSeries, horizon: int) -> np.ndarray:
    """Naive baseline: repeat the last valid value of each variate."""
    out = np.empty((context.num_variates, horizon))
    for m in range(context.num_variates):
        valid_idx = np.where(context.valid_mask[m])[0]
        out[m] = context.values[m, valid_idx[-1]]
    return out


@dataclass(frozen=True)
class CharacterizeThresholds:
    sparse_fraction: float = 0.5
    skewness: float = 2.0
    autocorr: float = 0.5
    flat_ratio: float = 0.01


def _autocorr_max(x: np.ndarray, lag_lo: int, lag_hi: int) -> float:
    # linear detrend first so trends do not masquerade as seasonality
    t = np.arange(len(x))
    coeffs = np.polyfit(t, x, 1)
    resid = x - np.polyval(coeffs, t)
    resid = resid - resid.mean()
    denom = (resid**2).sum()
    if denom == 0:
        return 0.0
    best = -1.0
    for lag in range(lag_lo, lag_hi + 1):
        num = (resid[:-lag] * resid[lag:]).sum()
        best = max(best, num / denom)
    return best


def characterize(
    series: MultivariateSeries,
    thresholds: CharacterizeThresholds = CharacterizeThresholds(),
) -> set[str]:
    """Non-exclusive labels for a series: sparse, extreme_right_skew,
    seasonal, flat. A label applies when it holds for at least half of the
    variates."""
    t = series.length
    if series.valid_mask.sum(axis=1).min() < 32:
        raise ValueError("characterize needs >= 32 valid steps per variate")

    votes = {label: 0 for label in LABELS}
    m = series.num_variates
    eps = 1e-12
    for i in range(m):
        valid = series.valid_mask[i]
        x = series.values[i, valid]
        zero_or_invalid = (~valid).sum() + (series.values[i][valid] == 0).sum()
        if zero_or_invalid / t > thresholds.sparse_fraction:
            votes["sparse"] += 1
        centered = x - x.mean()
        m2 = (centered**2).mean()
        skew = (centered**3).mean() / m2**1.5 if m2 > 0 else 0.0
        if skew > thresholds.skewness:
            votes["extreme_right_skew"] += 1
        if len(x) >= 8 and _autocorr_max(x, 4, len(x) // 2) > thresholds.autocorr:
            votes["seasonal"] += 1
        if np.sqrt(m2) / (abs(x.mean()) + eps) < thresholds.flat_ratio:
            votes["flat"] += 1
    return {label for label, v in votes.items() if 2 * v >= m}


def write_metric_report(csv_path, json_path, rows: list[dict]) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "series", "horizon", "metric", "value"])
        for r in rows:
            writer.writerow(
                [r["dataset"], r["series"], r["horizon"], r["metric"], repr(r["value"])]
            )
    summary: dict[str, float] = {}
    for r in rows:
        if r["series"] == "__all__":
            key = f"{r['metric']}@{r['horizon'] or 'avg'}"
            summary[key] = r["value"]
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_characterization_csv(path, labeled: list[tuple[str, set[str]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "labels"])
        for name, labels in labeled:
            writer.writerow([name, "|".join(sorted(labels))])
