"""Feature-aligned N-BEATS: multi-source forecasting with stack-wise feature alignment."""

from .align import AlignmentConfig, SinkhornConfig, alignment_loss, exact_w2, sinkhorn_divergence, sinkhorn_ot
from .data import Scenario, build_datasets, desk_benchmark_spec, make_scenario, synth_generate
from .estimator import FeatureAlignedNBeats, LinearForecaster
from .evaluation import MetricsReport, evaluate, mase_metric, smape_metric
from .model import NBeatsModel, build_model, load_checkpoint, predict, save_checkpoint
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "FeatureAlignedNBeats",
    "LinearForecaster",
    "MetricsReport",
    "NBeatsModel",
    "Scenario",
    "SinkhornConfig",
    "TrainConfig",
    "alignment_loss",
    "build_datasets",
    "build_model",
    "desk_benchmark_spec",
    "evaluate",
    "exact_w2",
    "load_checkpoint",
    "make_scenario",
    "mase_metric",
    "predict",
    "save_checkpoint",
    "sinkhorn_divergence",
    "sinkhorn_ot",
    "smape_metric",
    "synth_generate",
    "train_loop",
]
