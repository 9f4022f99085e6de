"""GRU-based discriminative and predictive scores.

Both follow the post-hoc evaluation convention for synthetic time series:
a small recurrent classifier separates real from synthetic windows
(score = |held-out accuracy - 0.5|), and a small recurrent predictor is
trained on synthetic windows and tested on real ones (train-on-synthetic,
test-on-real; score = one-step-ahead MAE over all features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from ..dataio import WindowSet
from ..errors import ConfigError
from ..seeding import derive_seed


@dataclass(frozen=True)
class MetricConfig:
    """Knobs for the metric networks and the embedding visualization."""

    hidden: Optional[int] = None  # default max(8, 4 * D)
    layers: int = 1
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 64
    train_split: float = 0.8
    repetitions: int = 5
    seed: int = 0
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 500
    tsne_learning_rate: Optional[float] = None  # None: max(n / exaggeration / 4, 50)
    tsne_early_exaggeration: float = 4.0
    tsne_exaggeration_iters: int = 100
    tsne_sample_cap: int = 1000

    def validate(self) -> "MetricConfig":
        if not 0.0 < self.train_split < 1.0:
            raise ConfigError(f"train_split={self.train_split} outside (0, 1)")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions={self.repetitions} must be >= 1")
        if self.tsne_sample_cap < 4 * self.tsne_perplexity:
            raise ConfigError(
                f"tsne_sample_cap={self.tsne_sample_cap} < 4 * perplexity "
                f"({4 * self.tsne_perplexity:g})"
            )
        if self.epochs < 1 or self.layers < 1:
            raise ConfigError("epochs and layers must be >= 1")
        return self

    def hidden_for(self, D: int) -> int:
        return self.hidden if self.hidden is not None else max(8, 4 * D)


@dataclass
class ScoreResult:
    """Mean and dispersion of a metric over its repetitions."""

    mean: float
    std: float
    runs: List[float] = field(default_factory=list)


def _as_array(windows: Union[WindowSet, np.ndarray]) -> np.ndarray:
    arr = windows.windows if isinstance(windows, WindowSet) else np.asarray(windows)
    if arr.ndim != 3:
        raise ValueError("windows must be [N, L, D]")
    return np.asarray(arr, dtype=np.float32)


def _check_pair(real: np.ndarray, synth: np.ndarray) -> None:
    if real.shape[0] == 0 or synth.shape[0] == 0:
        raise ValueError("real and synthetic sets must both be nonempty")
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(
            f"window shapes differ: real {real.shape[1:]} vs synthetic {synth.shape[1:]}"
        )


class _GRUClassifier(nn.Module):
    def __init__(self, D: int, hidden: int, layers: int):
        super().__init__()
        self.gru = nn.GRU(D, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x: Tensor) -> Tensor:
        _, h = self.gru(x)
        return self.head(h[-1]).squeeze(-1)


class _GRUPredictor(nn.Module):
    def __init__(self, D: int, hidden: int, layers: int):
        super().__init__()
        self.gru = nn.GRU(D, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, D)

    def forward(self, x: Tensor) -> Tensor:
        out, _ = self.gru(x)
        return self.head(out)


def _epoch_batches(n: int, batch: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch):
        yield order[start : start + batch]


def discriminative_score(
    real: Union[WindowSet, np.ndarray],
    synth: Union[WindowSet, np.ndarray],
    cfg: Optional[MetricConfig] = None,
) -> ScoreResult:
    """|held-out accuracy - 0.5| of a real-vs-synthetic GRU classifier.

    The larger set is subsampled so classes stay balanced; each repetition
    redraws the subsample and the train/test split. Lower is better and the
    score always lies in [0, 0.5].
    """
    cfg = (cfg or MetricConfig()).validate()
    real_arr, synth_arr = _as_array(real), _as_array(synth)
    _check_pair(real_arr, synth_arr)
    n = min(real_arr.shape[0], synth_arr.shape[0])
    n_train = int(round(cfg.train_split * n))
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"degenerate split: {n} windows per class at split {cfg.train_split}")
    D = real_arr.shape[2]

    runs = []
    for rep in range(cfg.repetitions):
        seed = derive_seed(cfg.seed, f"disc:{rep}")
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(derive_seed(seed, "model"))
        rng = np.random.default_rng(seed)

        r = real_arr[rng.permutation(real_arr.shape[0])[:n]]
        s = synth_arr[rng.permutation(synth_arr.shape[0])[:n]]
        x = torch.from_numpy(np.concatenate([r, s]))
        y = torch.cat([torch.ones(n), torch.zeros(n)])
        perm = torch.randperm(2 * n, generator=gen)
        x, y = x[perm], y[perm]
        split = 2 * n_train
        x_train, y_train = x[:split], y[:split]
        x_test, y_test = x[split:], y[split:]

        model = _GRUClassifier(D, cfg.hidden_for(D), cfg.layers)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        loss_fn = nn.BCEWithLogitsLoss()
        for _ in range(cfg.epochs):
            for idx in _epoch_batches(split, cfg.batch_size, gen):
                opt.zero_grad()
                loss = loss_fn(model(x_train[idx]), y_train[idx])
                loss.backward()
                opt.step()
        model.eval()
        with torch.no_grad():
            pred = (model(x_test) > 0).float()
        acc = float((pred == y_test).float().mean())
        runs.append(abs(acc - 0.5))
    arr = np.asarray(runs)
    return ScoreResult(mean=float(arr.mean()), std=float(arr.std()), runs=runs)


def predictive_score(
    real: Union[WindowSet, np.ndarray],
    synth: Union[WindowSet, np.ndarray],
    cfg: Optional[MetricConfig] = None,
) -> ScoreResult:
    """One-step-ahead MAE of a GRU predictor trained on synthetic windows
    and evaluated on held-out real windows (all features predicted).

    The train-on-real baseline is simply ``predictive_score(real, real, cfg)``.
    """
    cfg = (cfg or MetricConfig()).validate()
    real_arr, synth_arr = _as_array(real), _as_array(synth)
    _check_pair(real_arr, synth_arr)
    if real_arr.shape[1] < 2:
        raise ValueError("windows must have length >= 2 for one-step prediction")
    D = real_arr.shape[2]

    runs = []
    for rep in range(cfg.repetitions):
        seed = derive_seed(cfg.seed, f"pred:{rep}")
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(derive_seed(seed, "model"))
        rng = np.random.default_rng(seed)

        n_train = max(1, int(round(cfg.train_split * synth_arr.shape[0])))
        train = torch.from_numpy(synth_arr[rng.permutation(synth_arr.shape[0])[:n_train]])
        held_out = rng.permutation(real_arr.shape[0])[
            int(round(cfg.train_split * real_arr.shape[0])) :
        ]
        if held_out.size == 0:
            held_out = np.arange(real_arr.shape[0])
        test = torch.from_numpy(real_arr[held_out])

        model = _GRUPredictor(D, cfg.hidden_for(D), cfg.layers)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        loss_fn = nn.L1Loss()
        for _ in range(cfg.epochs):
            for idx in _epoch_batches(train.shape[0], cfg.batch_size, gen):
                batch = train[idx]
                opt.zero_grad()
                loss = loss_fn(model(batch[:, :-1]), batch[:, 1:])
                loss.backward()
                opt.step()
        model.eval()
        with torch.no_grad():
            mae = float(torch.abs(model(test[:, :-1]) - test[:, 1:]).mean())
        runs.append(mae)
    arr = np.asarray(runs)
    return ScoreResult(mean=float(arr.mean()), std=float(arr.std()), runs=runs)
