"""Exact t-SNE for comparing real and synthetic window distributions.

Windows are reduced to length-L vectors by averaging over the feature
dimension per time step, then embedded in 2-D with the classic exact
algorithm: per-point bandwidth calibration by bisection to hit the target
perplexity, symmetrized joint affinities, early exaggeration, and momentum
gradient descent (with per-coordinate gains) on the KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from ..dataio import WindowSet
from ..errors import NumericsError
from ..seeding import derive_seed
from .scores import MetricConfig, _as_array

_EPS = 1e-12


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _conditional_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-5) -> np.ndarray:
    """Row-calibrated conditional probabilities with entropy log(perplexity)."""
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        beta_lo, beta_hi = -np.inf, np.inf
        beta = 1.0
        row = np.delete(d2[i], i)
        for _ in range(100):
            p = np.exp(-row * beta)
            total = max(p.sum(), _EPS)
            p /= total
            entropy = np.log(total) + beta * float((row * p).sum())
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == -np.inf else (beta + beta_lo) / 2.0
        P[i, np.arange(n) != i] = p
    return P


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized joint distribution: non-negative, symmetric, sums to 1."""
    cond = _conditional_affinities(_squared_distances(x), perplexity)
    P = (cond + cond.T) / (2.0 * x.shape[0])
    return np.maximum(P, _EPS)


def _kl_and_grad(P: np.ndarray, Y: np.ndarray) -> Tuple[float, np.ndarray]:
    d2 = _squared_distances(Y)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), _EPS)
    kl = float((P * np.log(P / Q)).sum())
    pq = (P - Q) * num
    grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ Y)
    return kl, grad


def _pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # Fix the sign convention so the projection is deterministic.
    signs = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    return centered @ (comps * signs[:, None]).T


@dataclass
class TSNEResult:
    """2-D coordinates with real(1)/synthetic(0) labels and the KL trace."""

    coords: np.ndarray
    labels: np.ndarray
    kl_initial: float
    kl_final: float


def tsne_embed(
    real: Union[WindowSet, np.ndarray],
    synth: Union[WindowSet, np.ndarray],
    cfg: Optional[MetricConfig] = None,
    csv_path: Optional[Union[str, Path]] = None,
    plot_path: Optional[Union[str, Path]] = None,
) -> TSNEResult:
    """Embed real and synthetic windows together in 2-D.

    Each set is subsampled to the configured cap. Deterministic under the
    config seed: initialization comes from a sign-fixed PCA projection and
    duplicate rows get a seeded 1e-8 jitter. Raises if the optimization
    failed to reduce the KL divergence.
    """
    cfg = (cfg or MetricConfig()).validate()
    rng = np.random.default_rng(derive_seed(cfg.seed, "tsne"))

    sets = []
    for arr in (_as_array(real), _as_array(synth)):
        if arr.shape[0] > cfg.tsne_sample_cap:
            arr = arr[rng.permutation(arr.shape[0])[: cfg.tsne_sample_cap]]
        sets.append(arr.mean(axis=2).astype(np.float64))  # [n, L]: feature-mean
    X = np.concatenate(sets)
    labels = np.concatenate([np.ones(len(sets[0])), np.zeros(len(sets[1]))])
    n = X.shape[0]
    if n < 4 * cfg.tsne_perplexity:
        raise ValueError(
            f"{n} samples too few for perplexity {cfg.tsne_perplexity:g} (need >= 4x)"
        )

    # Identical points make the bandwidth search degenerate; jitter them.
    _, first_idx = np.unique(X, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(n), first_idx)
    if dup.size:
        X = X.copy()
        X[dup] += rng.normal(scale=1e-8, size=(dup.size, X.shape[1]))

    P = joint_affinities(X, cfg.tsne_perplexity)
    Y = _pca_2d(X)
    scale = Y[:, 0].std()
    Y = Y / (scale if scale > 0 else 1.0) * 1e-4

    learning_rate = cfg.tsne_learning_rate
    if learning_rate is None:
        learning_rate = max(n / cfg.tsne_early_exaggeration / 4.0, 50.0)

    kl_initial, _ = _kl_and_grad(P, Y)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    P_run = P * cfg.tsne_early_exaggeration
    kl = kl_initial
    for it in range(cfg.tsne_iterations):
        if it == cfg.tsne_exaggeration_iters:
            P_run = P
        momentum = 0.5 if it < 250 else 0.8
        _, grad = _kl_and_grad(P_run, Y)
        gains = np.where(np.sign(grad) != np.sign(update), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    kl, _ = _kl_and_grad(P, Y)
    if not np.isfinite(Y).all():
        raise NumericsError("t-SNE produced non-finite coordinates")
    if kl >= kl_initial:
        raise NumericsError(
            f"t-SNE failed to descend: KL {kl_initial:.4f} -> {kl:.4f}"
        )

    result = TSNEResult(coords=Y, labels=labels, kl_initial=kl_initial, kl_final=kl)
    if csv_path is not None:
        _write_csv(result, Path(csv_path))
    if plot_path is not None:
        _write_plot(result, Path(plot_path))
    return result


def _write_csv(result: TSNEResult, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,label"]
    for (x, y), lab in zip(result.coords, result.labels):
        lines.append(f"{x!r},{y!r},{'real' if lab > 0.5 else 'synthetic'}")
    path.write_text("\n".join(lines) + "\n")


def _write_plot(result: TSNEResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 6))
    real_mask = result.labels > 0.5
    ax.scatter(*result.coords[real_mask].T, s=8, c="red", alpha=0.5, label="real")
    ax.scatter(*result.coords[~real_mask].T, s=8, c="blue", alpha=0.5, label="synthetic")
    ax.legend()
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
