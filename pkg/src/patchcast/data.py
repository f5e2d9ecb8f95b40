"""Time series data model: CSV ingestion, instance scaling, and batch packing.

All arrays are numpy on the way in; :func:`pack_batch` produces the torch
tensors consumed by the decoder. Types are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

EPSILON = 1e-6

CSV_HEADER = ["series", "variate", "timestamp", "value"]


class DataError(ValueError):
    """Raised for malformed input files or inconsistent series."""


@dataclass(frozen=True)
class MultivariateSeries:
    """A group of aligned variates: values (M, T), per-variate group ids,
    and a validity mask (False where missing/padded)."""

    values: np.ndarray
    group_ids: np.ndarray
    valid_mask: np.ndarray
    series_name: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid_mask, dtype=bool)
        gids = np.asarray(self.group_ids, dtype=np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid_mask", valid)
        object.__setattr__(self, "group_ids", gids)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D (M, T), got shape {values.shape}")
        if values.shape != valid.shape:
            raise DataError(
                f"values shape {values.shape} != valid_mask shape {valid.shape}"
            )
        if gids.shape != (values.shape[0],):
            raise DataError("group_ids must have one entry per variate")
        if values.shape[0] and not valid.any(axis=1).all():
            raise DataError("every variate needs at least one valid step")
        # group ids must be contiguous: same-group variates adjacent
        seen = set()
        prev = None
        for g in gids.tolist():
            if g != prev:
                if g in seen:
                    raise DataError("group_ids must be contiguous blocks")
                seen.add(g)
                prev = g

    @property
    def num_variates(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def slice_time(self, start: int, stop: int) -> "MultivariateSeries":
        return MultivariateSeries(
            values=self.values[:, start:stop],
            group_ids=self.group_ids,
            valid_mask=self.valid_mask[:, start:stop],
            series_name=self.series_name,
        )


@dataclass(frozen=True)
class ScalerStats:
    """Per-variate mean and population std computed over valid steps only."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float = EPSILON

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if np.any(self.std + self.epsilon <= 0):
            raise DataError("std + epsilon must be positive")


def instance_normalize(
    series: MultivariateSeries, stats_len: int | None = None
) -> tuple[np.ndarray, ScalerStats]:
    """Standardize each variate to zero mean / unit population std over its
    valid steps. Invalid steps are set to 0. Constant variates map to all
    zeros via the epsilon guard.

    When ``stats_len`` is given, the statistics are computed from the first
    ``stats_len`` steps only (the whole series is still rescaled by them), so
    later values may fall outside the standardized range. A variate with no
    valid step in that prefix falls back to its full valid span.
    """
    if stats_len is not None and stats_len < 1:
        raise DataError("stats_len must be >= 1")
    values, valid = series.values, series.valid_mask
    m = values.shape[0]
    mean = np.empty(m)
    std = np.empty(m)
    for i in range(m):
        stat_valid = valid[i]
        if stats_len is not None:
            prefix = np.zeros_like(stat_valid)
            prefix[:stats_len] = stat_valid[:stats_len]
            if prefix.any():
                stat_valid = prefix
        v = values[i, stat_valid]
        mean[i] = v.mean()
        std[i] = v.std()  # population std
    stats = ScalerStats(mean=mean, std=std)
    normalized = (values - mean[:, None]) / (std + stats.epsilon)[:, None]
    normalized[~valid] = 0.0
    return normalized, stats


def denormalize(values: np.ndarray, stats: ScalerStats) -> np.ndarray:
    """Invert :func:`instance_normalize`. ``values`` has variates on axis -2."""
    values = np.asarray(values, dtype=np.float64)
    m = stats.mean.shape[0]
    if values.shape[-2] != m:
        raise DataError(
            f"variate axis has size {values.shape[-2]}, scaler has {m} variates"
        )
    scale = (stats.std + stats.epsilon)[:, None]
    return values * scale + stats.mean[:, None]


def load_csv(path) -> list[MultivariateSeries]:
    """Parse the ``series,variate,timestamp,value`` CSV contract.

    Rows may arrive in any order; output series are keyed by name with
    variates sorted by variate id and aligned to the union of timestamps.
    Gaps and ``nan`` values are marked invalid.
    """
    rows: dict[str, dict[int, dict[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"bad header {header!r}, expected {CSV_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 columns, got {len(row)}")
            name = row[0]
            try:
                variate = int(row[1])
                ts = int(row[2])
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if variate < 0:
                raise DataError(f"line {lineno}: negative variate id")
            try:
                value = float(row[3])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric value {row[3]!r}") from None
            per_variate = rows.setdefault(name, {}).setdefault(variate, {})
            if ts in per_variate:
                raise DataError(
                    f"line {lineno}: duplicate timestamp {ts} for "
                    f"series {name!r} variate {variate}"
                )
            per_variate[ts] = value

    out = []
    for name in sorted(rows):
        variates = rows[name]
        all_ts = sorted({t for per in variates.values() for t in per})
        ts_index = {t: i for i, t in enumerate(all_ts)}
        vids = sorted(variates)
        values = np.zeros((len(vids), len(all_ts)))
        valid = np.zeros((len(vids), len(all_ts)), dtype=bool)
        for i, vid in enumerate(vids):
            for ts, value in variates[vid].items():
                j = ts_index[ts]
                if math.isfinite(value):
                    values[i, j] = value
                    valid[i, j] = True
        if not valid.any(axis=1).all():
            raise DataError(f"series {name!r} has a variate with no valid values")
        out.append(
            MultivariateSeries(
                values=values,
                group_ids=np.zeros(len(vids), dtype=np.int64),
                valid_mask=valid,
                series_name=name,
            )
        )
    return out


def write_csv(path, series_list: list[MultivariateSeries]) -> None:
    """Inverse of :func:`load_csv`; timestamps are step indices, invalid
    steps written as ``nan``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for series in series_list:
            for m in range(series.num_variates):
                for t in range(series.length):
                    v = series.values[m, t] if series.valid_mask[m, t] else float("nan")
                    writer.writerow([series.series_name, m, t, repr(float(v))])


@dataclass(frozen=True)
class PackedEntry:
    """Location of one packed series chunk: row, slot offset, source info."""

    series_name: str
    row: int
    slot: int
    num_variates: int
    source_variate_offset: int


@dataclass(frozen=True)
class PackedBatch:
    """Model-ready batch: instance-normalized values, left-padding mask,
    per-variate group id mask (-1 for empty slots), and per-row scalers."""

    values: torch.Tensor  # (B, M_max, T) float32
    pad_mask: torch.Tensor  # (B, M_max, T) bool, True on real data
    id_mask: torch.Tensor  # (B, M_max) int64, -1 for empty variate slots
    scaler_mean: np.ndarray  # (B, M_max)
    scaler_std: np.ndarray  # (B, M_max)
    patch_stride: int
    entries: tuple[PackedEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.values.shape[-1] % self.patch_stride != 0:
            raise DataError("packed length must be divisible by patch_stride")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    def row_scalers(self, row: int) -> ScalerStats:
        return ScalerStats(mean=self.scaler_mean[row], std=self.scaler_std[row])


def pack_batch(
    series_list: list[MultivariateSeries],
    patch_stride: int,
    max_variates: int,
    context_len: int,
    norm_len: int | None = None,
) -> PackedBatch:
    """Pack whole series along the variate axis of shared batch rows.

    Each series keeps a distinct id within its row; series wider than
    ``max_variates`` are split across rows (same id per row, so split groups
    never attend across rows by construction). The time axis is truncated to
    the most recent ``context_len`` steps and left-padded; scalers are
    computed per variate on the truncated window before padding.

    ``norm_len`` restricts the scaler statistics to the first ``norm_len``
    steps of each window, so the trailing steps may lie outside the
    standardized range — the regime a forecaster faces when generating past
    the end of its normalized context.
    """
    if context_len % patch_stride != 0:
        raise DataError("context_len must be divisible by patch_stride")
    if norm_len is not None and not 1 <= norm_len <= context_len:
        raise DataError("norm_len must lie in [1, context_len]")
    if not series_list:
        raise DataError("cannot pack an empty series list")

    chunks = []  # (series_name, values_norm, valid, group_rank, mean, std, src_offset)
    for series in series_list:
        window = series
        if series.length > context_len:
            window = series.slice_time(series.length - context_len, series.length)
        normalized, stats = instance_normalize(window, stats_len=norm_len)
        # rank of each variate's group within the series, so internal groups
        # stay distinct after packing
        ranks = np.empty(window.num_variates, dtype=np.int64)
        seen: dict[int, int] = {}
        for i, g in enumerate(series.group_ids.tolist()):
            ranks[i] = seen.setdefault(g, len(seen))
        for start in range(0, window.num_variates, max_variates):
            stop = min(start + max_variates, window.num_variates)
            chunks.append(
                (
                    series.series_name,
                    normalized[start:stop],
                    window.valid_mask[start:stop],
                    ranks[start:stop],
                    stats.mean[start:stop],
                    stats.std[start:stop],
                    start,
                )
            )

    # first-fit row assignment
    rows: list[list] = []
    row_fill: list[int] = []
    placements = []  # (chunk, row, slot)
    for chunk in chunks:
        size = chunk[1].shape[0]
        target = None
        for r, fill in enumerate(row_fill):
            if fill + size <= max_variates:
                target = r
                break
        if target is None:
            rows.append([])
            row_fill.append(0)
            target = len(rows) - 1
        placements.append((chunk, target, row_fill[target]))
        rows[target].append(chunk)
        row_fill[target] += size

    b = len(rows)
    values = np.zeros((b, max_variates, context_len), dtype=np.float32)
    pad_mask = np.zeros((b, max_variates, context_len), dtype=bool)
    id_mask = np.full((b, max_variates), -1, dtype=np.int64)
    mean = np.zeros((b, max_variates))
    std = np.ones((b, max_variates))
    entries = []
    next_id = [0] * b
    for chunk, row, slot in placements:
        name, norm, valid, ranks, c_mean, c_std, src_offset = chunk
        size, t = norm.shape
        pad = context_len - t
        values[row, slot : slot + size, pad:] = norm
        pad_mask[row, slot : slot + size, pad:] = valid
        id_mask[row, slot : slot + size] = next_id[row] + ranks
        next_id[row] += int(ranks.max()) + 1
        mean[row, slot : slot + size] = c_mean
        std[row, slot : slot + size] = c_std
        entries.append(
            PackedEntry(
                series_name=name,
                row=row,
                slot=slot,
                num_variates=size,
                source_variate_offset=src_offset,
            )
        )

    return PackedBatch(
        values=torch.from_numpy(values),
        pad_mask=torch.from_numpy(pad_mask),
        id_mask=torch.from_numpy(id_mask),
        scaler_mean=mean,
        scaler_std=std,
        patch_stride=patch_stride,
        entries=tuple(entries),
    )
