"""Probabilistic multivariate time series forecasting with a patch-based
decoder-only transformer and a Student-T mixture output head."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    MultivariateSeries,
    PackedBatch,
    ScalerStats,
    denormalize,
    instance_normalize,
    load_csv,
    pack_batch,
    write_csv,
)
from .decoder import ModelConfig, SmmParams, Weights, forward, init_weights  # noqa: F401
from .inference import ForecastRequest, ForecastResult, forecast  # noqa: F401
from .synthgen import SynthConfig, generate, generate_mixture  # noqa: F401
from .training import TrainConfig, train_loop  # noqa: F401
