"""Synthetic-data quality metrics: discriminative score, predictive score,
2-D embedding visualization, and the combined report harness."""

from .scores import MetricConfig, ScoreResult, discriminative_score, predictive_score
from .tsne import TSNEResult, tsne_embed
from .report import MetricsReport, MetricRow, run_report

__all__ = [
    "MetricConfig",
    "ScoreResult",
    "discriminative_score",
    "predictive_score",
    "TSNEResult",
    "tsne_embed",
    "MetricsReport",
    "MetricRow",
    "run_report",
]
