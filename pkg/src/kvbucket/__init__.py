"""Predictor-driven bucketed contiguous KV-cache allocation, simulated.

Serving stacks on accelerators whose memory punishes random access cannot use
fine-grained paging; static worst-case reservation wastes most of the device.
This package simulates the middle path: per-request length prediction feeding
quantile-derived bucket classes of contiguous blocks, with a reserved large
bucket absorbing uncertain requests and mid-decode overflows.
"""

from .buckets import BucketConfig, BucketManager, BucketTag, LengthWindow, select_bucket
from .config import ConfigError, ExperimentConfig, load_config
from .engine import Simulation, SimulationError, run
from .metrics import SimMetrics, aggregate, compare
from .pool import Block, DevicePool, ExactFitPool, ModelShape, OutOfMemoryError, StallError
from .predictor import (
    NoisyOraclePredictor,
    OnlineHistogramPredictor,
    OraclePredictor,
    Prediction,
    bucket_accuracy,
    inflate,
    make_predictor,
)
from .racm import RacmParams, copy_time, from_preset, step_time
from .workload import DriftSchedule, Request, Segment, load_trace, save_trace, synth_trace

__all__ = [
    "Block",
    "BucketConfig",
    "BucketManager",
    "BucketTag",
    "ConfigError",
    "DevicePool",
    "DriftSchedule",
    "ExactFitPool",
    "ExperimentConfig",
    "LengthWindow",
    "ModelShape",
    "NoisyOraclePredictor",
    "OnlineHistogramPredictor",
    "OraclePredictor",
    "OutOfMemoryError",
    "Prediction",
    "RacmParams",
    "Request",
    "Segment",
    "SimMetrics",
    "Simulation",
    "SimulationError",
    "StallError",
    "aggregate",
    "bucket_accuracy",
    "compare",
    "copy_time",
    "from_preset",
    "inflate",
    "load_config",
    "load_trace",
    "make_predictor",
    "run",
    "save_trace",
    "select_bucket",
    "step_time",
    "synth_trace",
]

__version__ = "0.1.0"
