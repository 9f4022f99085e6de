"""Combined metric reports over one or more named synthetic sets."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from ..dataio import WindowSet
from .scores import MetricConfig, ScoreResult, discriminative_score, predictive_score
from .tsne import TSNEResult, tsne_embed


@dataclass
class MetricRow:
    name: str
    discriminative_mean: float
    discriminative_std: float
    predictive_mean: float
    predictive_std: float


@dataclass
class MetricsReport:
    """Scores per synthetic set plus optional embedding coordinates."""

    rows: List[MetricRow]
    config: MetricConfig
    created_at: float = field(default_factory=time.time)
    embeddings: Dict[str, TSNEResult] = field(default_factory=dict)

    def to_table(self) -> str:
        header = f"{'model':<12} {'disc (mean±std)':>20} {'pred (mean±std)':>20}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row.name:<12} "
                f"{row.discriminative_mean:>12.4f}±{row.discriminative_std:<7.4f} "
                f"{row.predictive_mean:>12.4f}±{row.predictive_std:<7.4f}"
            )
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "created_at": self.created_at,
            "config": asdict(self.config),
            "rows": [asdict(r) for r in self.rows],
            "embeddings": {
                name: {"kl_initial": e.kl_initial, "kl_final": e.kl_final, "n": len(e.labels)}
                for name, e in self.embeddings.items()
            },
        }
        return json.dumps(payload, indent=2)

    def save(self, json_path: Union[str, Path], table_path: Optional[Union[str, Path]] = None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(self.to_json())
        if table_path is not None:
            Path(table_path).write_text(self.to_table() + "\n")


def run_report(
    real: Union[WindowSet, np.ndarray],
    synth_by_model: Dict[str, Union[WindowSet, np.ndarray]],
    cfg: Optional[MetricConfig] = None,
    with_tsne: bool = False,
    out_dir: Optional[Union[str, Path]] = None,
) -> MetricsReport:
    """Score every named synthetic set against the same real set.

    With ``with_tsne`` each set also gets embedding coordinates; with
    ``out_dir`` the report (JSON + aligned table) and any embedding CSV/plot
    files are written there.
    """
    cfg = (cfg or MetricConfig()).validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    report = MetricsReport(rows=[], config=cfg)
    for name, synth in synth_by_model.items():
        disc = discriminative_score(real, synth, cfg)
        pred = predictive_score(real, synth, cfg)
        report.rows.append(
            MetricRow(
                name=name,
                discriminative_mean=disc.mean,
                discriminative_std=disc.std,
                predictive_mean=pred.mean,
                predictive_std=pred.std,
            )
        )
        if with_tsne:
            csv_path = out_dir / f"tsne_{name}.csv" if out_dir else None
            plot_path = out_dir / f"tsne_{name}.png" if out_dir else None
            report.embeddings[name] = tsne_embed(
                real, synth, cfg, csv_path=csv_path, plot_path=plot_path
            )
    if out_dir is not None:
        report.save(out_dir / "report.json", out_dir / "report.txt")
    return report
