from .runner import run_episode, oracle_model_outputs
from .metrics import (
    EpisodeMetrics,
    MetricReport,
    compare_models,
    evaluate_suite,
    metric_barge_in,
    metric_task_success,
    metric_turn_taking,
    metrics_from_trace,
)

__all__ = [
    "EpisodeMetrics",
    "MetricReport",
    "compare_models",
    "evaluate_suite",
    "metric_barge_in",
    "metric_task_success",
    "metric_turn_taking",
    "metrics_from_trace",
    "oracle_model_outputs",
    "run_episode",
]
