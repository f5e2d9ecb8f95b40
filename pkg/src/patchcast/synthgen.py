"""Synthetic multivariate series built by composing random processes.

Each variate sums a fixed number of components drawn with replacement from
{piecewise-linear trend, stationary ARMA, sinusoid, residual noise}, applies
an optional monotone transformation, clips extreme values at empirical
quantiles, and rescales affinely into a target range.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import MultivariateSeries


@dataclass(frozen=True)
class SynthConfig:
    num_variates: int
    length: int
    components_per_variate: int = 5
    rescale_range: tuple[float, float] = (0.0, 1.0)
    clip_quantiles: tuple[float, float] = (0.001, 0.999)
    seed: int = 0

    def __post_init__(self):
        if self.num_variates < 1:
            raise ValueError("num_variates must be positive")
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.components_per_variate < 1:
            raise ValueError("components_per_variate must be >= 1")
        low, high = self.rescale_range
        if not low < high:
            raise ValueError("rescale_range must satisfy low < high")
        q_low, q_high = self.clip_quantiles
        if not 0 < q_low < q_high < 1:
            raise ValueError("clip_quantiles must satisfy 0 < q_low < q_high < 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rescale_range"] = list(self.rescale_range)
        d["clip_quantiles"] = list(self.clip_quantiles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["rescale_range"] = tuple(d.get("rescale_range", (0.0, 1.0)))
        d["clip_quantiles"] = tuple(d.get("clip_quantiles", (0.001, 0.999)))
        return cls(**d)


def _piecewise_trend(rng: np.random.Generator, length: int) -> np.ndarray:
    num_breaks = int(rng.integers(1, 5))
    breaks = np.sort(rng.choice(np.arange(1, length), size=min(num_breaks, length - 1), replace=False)) if length > 1 else np.array([], dtype=int)
    slopes = rng.uniform(-0.05, 0.05, size=len(breaks) + 1)
    increments = np.empty(length)
    bounds = np.concatenate([[0], breaks, [length]])
    for seg, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        increments[a:b] = slopes[seg]
    out = np.cumsum(increments)
    return out - out.mean()


def _stationary_arma(rng: np.random.Generator, length: int) -> np.ndarray:
    p = int(rng.integers(1, 4))
    q = int(rng.integers(0, 4))
    # reject-and-resample until AR polynomial roots are outside the unit circle
    while True:
        ar = rng.uniform(-1.0, 1.0, size=p)
        roots = np.roots(np.concatenate([[1.0], -ar])[::-1])
        if len(roots) == 0 or np.all(np.abs(roots) > 1.0):
            break
    ma = rng.uniform(-1.0, 1.0, size=q)
    std = rng.uniform(0.1, 1.0)
    burn = 50
    eps = rng.normal(0.0, std, size=length + burn)
    x = np.zeros(length + burn)
    for t in range(length + burn):
        acc = eps[t]
        for i in range(p):
            if t - 1 - i >= 0:
                acc += ar[i] * x[t - 1 - i]
        for j in range(q):
            if t - 1 - j >= 0:
                acc += ma[j] * eps[t - 1 - j]
        x[t] = acc
    return x[burn:]


def _sinusoid(rng: np.random.Generator, length: int) -> np.ndarray:
    lo, hi = 8.0, max(8.0 * 1.0001, length / 2.0)
    period = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    amplitude = rng.uniform(0.1, 2.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(length)
    return amplitude * np.sin(2.0 * np.pi * t / period + phase)


def _residual_noise(rng: np.random.Generator, length: int) -> np.ndarray:
    family = rng.integers(0, 3)
    std = rng.uniform(0.1, 1.0)
    if family == 0:
        return rng.normal(0.0, std, size=length)
    if family == 1:
        dof = rng.uniform(2.0, 10.0)
        return std * rng.standard_t(dof, size=length)
    draws = rng.lognormal(0.0, std, size=length)
    return draws - draws.mean()


_COMPONENTS = (_piecewise_trend, _stationary_arma, _sinusoid, _residual_noise)


def _transform(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    u = rng.random()
    if u < 0.2:
        # exponentiate after standardization: right-skewed shapes
        std = x.std()
        z = (x - x.mean()) / (std if std > 0 else 1.0)
        return np.exp(z)
    if u < 0.4:
        return np.abs(x)
    return x


def _generate_variate(seed_seq: np.random.SeedSequence, config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    base = np.zeros(config.length)
    for _ in range(config.components_per_variate):
        component = _COMPONENTS[rng.integers(0, len(_COMPONENTS))]
        base = base + component(rng, config.length)
    x = _transform(rng, base)
    q_low, q_high = config.clip_quantiles
    lo, hi = np.quantile(x, [q_low, q_high])
    x = np.clip(x, lo, hi)
    low, high = config.rescale_range
    span = x.max() - x.min()
    if span > 0:
        x = (x - x.min()) / span * (high - low) + low
    else:
        x = np.full_like(x, (low + high) / 2.0)
    return x


def generate(config: SynthConfig, max_workers: int = 1) -> MultivariateSeries:
    """Generate one multivariate series, deterministic for a given seed.

    Per-variate seeds are derived from the config seed, so results do not
    depend on ``max_workers``.
    """
    seeds = [np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFFF, v]) for v in range(config.num_variates)]
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            variates = list(pool.map(lambda s: _generate_variate(s, config), seeds))
    else:
        variates = [_generate_variate(s, config) for s in seeds]
    values = np.stack(variates)
    return MultivariateSeries(
        values=values,
        group_ids=np.zeros(config.num_variates, dtype=np.int64),
        valid_mask=np.ones_like(values, dtype=bool),
        series_name=f"synth-{config.seed}",
    )


def generate_mixture(
    dataset_size: int,
    synth_fraction: float,
    real_sets: list[MultivariateSeries],
    config: SynthConfig,
    max_workers: int = 1,
) -> list[MultivariateSeries]:
    """Blend synthetic and real series into a dataset of fixed size.

    round(synth_fraction * dataset_size) series are synthetic (distinct
    derived seeds); the rest cycle through ``real_sets``. The combined list
    is shuffled deterministically by the config seed.
    """
    if dataset_size < 1:
        raise ValueError("dataset_size must be positive")
    if not 0.0 <= synth_fraction <= 1.0:
        raise ValueError("synth_fraction must lie in [0, 1]")
    num_synth = round(synth_fraction * dataset_size)
    num_real = dataset_size - num_synth
    if num_real > 0 and not real_sets:
        raise ValueError("real_sets is empty but synth_fraction < 1")

    out: list[MultivariateSeries] = []
    for i in range(num_synth):
        child_seed = int(np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFFF, 0xA0, i]).generate_state(1)[0])
        sub = dataclasses.replace(config, seed=child_seed)
        series = generate(sub, max_workers=max_workers)
        out.append(
            MultivariateSeries(
                values=series.values,
                group_ids=series.group_ids,
                valid_mask=series.valid_mask,
                series_name=f"synth-{config.seed}-{i}",
            )
        )
    for i in range(num_real):
        out.append(real_sets[i % len(real_sets)])
    order = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFFF, 0xB0])).permutation(len(out))
    return [out[i] for i in order]
