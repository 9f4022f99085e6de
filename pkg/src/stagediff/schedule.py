"""Closed-form diffusion mathematics.

Noise schedule construction, forward noising, reverse-posterior means for
both the data-prediction and noise-prediction parameterizations, the
training loss, sinusoidal step embeddings, and the reverse sampling loop.

Notation caveat: in this codebase ``alpha[k]`` is the per-step retention
factor, ``alpha_bar[k]`` its running product, and ``beta[k] = 1 - alpha_bar[k]``
the *cumulative* noise level. The per-step noise added at step k is
``1 - alpha[k]``. Step indices ``k`` are 1-based everywhere in the public API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import torch
from torch import Tensor

from .errors import ConfigError, NumericsError

DEFAULT_T = 500
DEFAULT_NOISE_START = 1e-4
DEFAULT_NOISE_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention factors and derived cumulative quantities.

    Invariants: every ``alpha[k]`` lies in (0, 1), ``alpha_bar`` is strictly
    decreasing, and ``beta = 1 - alpha_bar`` elementwise. Tensors are float64
    so downstream coefficient arithmetic keeps full precision.
    """

    alpha: Tensor
    alpha_bar: Tensor
    beta: Tensor

    @property
    def T(self) -> int:
        return int(self.alpha.shape[0])

    def _check_k(self, k: int) -> None:
        if not 1 <= k <= self.T:
            raise ValueError(f"step index k={k} outside 1..{self.T}")

    def alpha_at(self, k: int) -> float:
        self._check_k(k)
        return float(self.alpha[k - 1])

    def alpha_bar_at(self, k: int) -> float:
        """Cumulative product at step k, with the k=0 convention alpha_bar_0 = 1."""
        if k == 0:
            return 1.0
        self._check_k(k)
        return float(self.alpha_bar[k - 1])

    def beta_at(self, k: int) -> float:
        self._check_k(k)
        return float(self.beta[k - 1])


@dataclass(frozen=True)
class NoisyWindow:
    """A window noised to diffusion step k."""

    x_k: Tensor
    k: int
    seed_trace: str = ""


@dataclass(frozen=True)
class StepEmbedding:
    """Sinusoidal encoding of a diffusion step index."""

    k: int
    vector: Tensor


def _schedule_from_alphas(alpha: Tensor) -> NoiseSchedule:
    if alpha.ndim != 1 or alpha.shape[0] < 1:
        raise ConfigError("schedule needs at least one step")
    if not bool(((alpha > 0.0) & (alpha < 1.0)).all()):
        bad = int((~((alpha > 0.0) & (alpha < 1.0))).nonzero()[0]) + 1
        raise ConfigError(f"alpha_{bad}={float(alpha[bad - 1])} outside (0, 1)")
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(alpha=alpha, alpha_bar=alpha_bar, beta=1.0 - alpha_bar)


def build_schedule(
    T: int,
    kind: str = "linear",
    *,
    noise_start: float = DEFAULT_NOISE_START,
    noise_end: float = DEFAULT_NOISE_END,
    cosine_offset: float = 0.008,
    alphas: Optional[Sequence[float]] = None,
) -> NoiseSchedule:
    """Build a noise schedule of T steps.

    kinds:
      - "linear": per-step noise 1 - alpha_k linearly spaced from noise_start
        to noise_end (the default desk-scale schedule).
      - "cosine": squared-cosine cumulative schedule; per-step noise clipped
        to (1e-8, 0.999) to keep every alpha_k inside (0, 1).
      - "explicit": take ``alphas`` verbatim (T must match its length).
    """
    if T < 1:
        raise ConfigError(f"T={T} must be >= 1")
    if kind == "explicit" or alphas is not None:
        if alphas is None:
            raise ConfigError("kind='explicit' requires alphas")
        alpha = torch.as_tensor(list(alphas), dtype=torch.float64)
        if alpha.shape[0] != T:
            raise ConfigError(f"len(alphas)={alpha.shape[0]} != T={T}")
        return _schedule_from_alphas(alpha)
    if kind == "linear":
        step_noise = torch.linspace(noise_start, noise_end, T, dtype=torch.float64)
        return _schedule_from_alphas(1.0 - step_noise)
    if kind == "cosine":
        s = cosine_offset
        grid = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
        cum = f / f[0]
        step_noise = (1.0 - cum[1:] / cum[:-1]).clamp(1e-8, 0.999)
        return _schedule_from_alphas(1.0 - step_noise)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(
    x0: Tensor, k: int, eps: Tensor, sched: NoiseSchedule, seed_trace: str = ""
) -> NoisyWindow:
    """Noise a clean window to step k: x_k = sqrt(1-beta_k) x0 + sqrt(beta_k) eps."""
    _require_same_shape(x0, eps, "forward_noise")
    beta_k = sched.beta_at(k)
    x_k = math.sqrt(1.0 - beta_k) * x0 + math.sqrt(beta_k) * eps
    return NoisyWindow(x_k=x_k, k=k, seed_trace=seed_trace)


def forward_noise_batch(x0: Tensor, ks: Tensor, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Vectorized forward noising with a per-example step index.

    x0, eps: [B, ...]; ks: [B] long in 1..T. Returns the noised batch.
    """
    _require_same_shape(x0, eps, "forward_noise_batch")
    if ks.ndim != 1 or ks.shape[0] != x0.shape[0]:
        raise ValueError("ks must be a 1-D step index per example")
    if not bool(((ks >= 1) & (ks <= sched.T)).all()):
        raise ValueError(f"step indices outside 1..{sched.T}")
    beta = sched.beta.to(x0.dtype)[ks - 1]
    expand = (x0.shape[0],) + (1,) * (x0.ndim - 1)
    keep = torch.sqrt(1.0 - beta).view(expand)
    add = torch.sqrt(beta).view(expand)
    return keep * x0 + add * eps


def posterior_mean_data(x_k: Tensor, x0_hat: Tensor, k: int, sched: NoiseSchedule) -> Tensor:
    """Reverse-posterior mean under the data-prediction parameterization.

    mu = [sqrt(alpha_k)(1-abar_{k-1}) x_k + sqrt(abar_{k-1})(1-alpha_k) x0_hat] / (1-abar_k)
    with abar_0 = 1, so at k=1 the mean collapses to x0_hat exactly.
    """
    _require_same_shape(x_k, x0_hat, "posterior_mean_data")
    a_k = sched.alpha_at(k)
    ab_k = sched.alpha_bar_at(k)
    ab_prev = sched.alpha_bar_at(k - 1)
    c_xk = math.sqrt(a_k) * (1.0 - ab_prev) / (1.0 - ab_k)
    c_x0 = math.sqrt(ab_prev) * (1.0 - a_k) / (1.0 - ab_k)
    return c_xk * x_k + c_x0 * x0_hat


def posterior_mean_noise(x_k: Tensor, eps_hat: Tensor, k: int, sched: NoiseSchedule) -> Tensor:
    """Reverse-posterior mean under the noise-prediction parameterization.

    mu = x_k / sqrt(alpha_k) - (1-alpha_k) / (sqrt(1-abar_k) sqrt(alpha_k)) eps_hat
    """
    _require_same_shape(x_k, eps_hat, "posterior_mean_noise")
    a_k = sched.alpha_at(k)
    ab_k = sched.alpha_bar_at(k)
    c_eps = (1.0 - a_k) / (math.sqrt(1.0 - ab_k) * math.sqrt(a_k))
    return x_k / math.sqrt(a_k) - c_eps * eps_hat


def posterior_variance(k: int, sched: NoiseSchedule, mode: str = "ddpm") -> float:
    """Fixed per-step variance of the reverse transition.

    mode="ddpm" (default): (1-alpha_k)(1-abar_{k-1})/(1-abar_k), which is 0 at k=1.
    mode="paper": the alternative fixed form (1-alpha_k)/alpha_k, kept opt-in
    so the two can be compared.
    """
    a_k = sched.alpha_at(k)
    if mode == "paper":
        return (1.0 - a_k) / a_k
    if mode != "ddpm":
        raise ConfigError(f"unknown variance mode {mode!r}")
    ab_k = sched.alpha_bar_at(k)
    ab_prev = sched.alpha_bar_at(k - 1)
    return (1.0 - a_k) * (1.0 - ab_prev) / (1.0 - ab_k)


def training_loss(x0: Tensor, x0_hat: Tensor) -> Tensor:
    """Mean squared error over all entries (mean reduction)."""
    _require_same_shape(x0, x0_hat, "training_loss")
    return ((x0 - x0_hat) ** 2).mean()


def sinusoidal_embedding(k: Tensor, d_emb: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Interleaved sin/cos encoding: out[..., 2i] = sin(k / 10000^(2i/d)), 2i+1 = cos.

    k: integer tensor of any shape; returns shape ``k.shape + (d_emb,)``.
    """
    if d_emb % 2 != 0 or d_emb < 2:
        raise ConfigError(f"d_emb={d_emb} must be a positive even number")
    half = d_emb // 2
    freqs = torch.pow(
        torch.tensor(10000.0, dtype=torch.float64),
        -torch.arange(half, dtype=torch.float64) * 2.0 / d_emb,
    )
    angles = k.to(torch.float64).unsqueeze(-1) * freqs
    out = torch.empty(k.shape + (d_emb,), dtype=torch.float64)
    out[..., 0::2] = torch.sin(angles)
    out[..., 1::2] = torch.cos(angles)
    return out.to(dtype)


def step_embedding(k: int, d_emb: int) -> StepEmbedding:
    """Sinusoidal embedding of a single step index."""
    if k < 0:
        raise ValueError(f"k={k} must be >= 0")
    vec = sinusoidal_embedding(torch.tensor(k), d_emb, dtype=torch.float64)
    return StepEmbedding(k=k, vector=vec)


def sample(
    denoiser: Callable[[Tensor, int], Tensor],
    n: int,
    shape: Tuple[int, int],
    sched: NoiseSchedule,
    *,
    seed: int = 0,
    clip: Optional[Tuple[float, float]] = (0.0, 1.0),
    variance_mode: str = "ddpm",
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Reverse sampling loop driven by a caller-supplied clean-data denoiser.

    Starts from x_T ~ N(0, I) of shape [n, *shape]; for k = T..1 computes
    x0_hat = denoiser(x_k, k), the posterior mean/variance, and draws
    x_{k-1} = mu + sigma z (z = 0 when the variance is 0). The final batch is
    clipped to ``clip`` unless clip is None. Deterministic given ``seed``.
    """
    if n < 0:
        raise ValueError(f"n={n} must be >= 0")
    full_shape = (n,) + tuple(shape)
    if n == 0:
        return torch.empty(full_shape, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(full_shape, generator=gen, dtype=dtype)
    for k in range(sched.T, 0, -1):
        x0_hat = denoiser(x, k)
        if x0_hat.shape != x.shape:
            raise ValueError(
                f"denoiser output shape {tuple(x0_hat.shape)} != {tuple(x.shape)} at step k={k}"
            )
        if not bool(torch.isfinite(x0_hat).all()):
            raise NumericsError(f"non-finite denoiser output at step k={k}")
        mu = posterior_mean_data(x, x0_hat, k, sched)
        var = posterior_variance(k, sched, mode=variance_mode)
        if var > 0.0:
            z = torch.randn(full_shape, generator=gen, dtype=dtype)
            x = mu + math.sqrt(var) * z
        else:
            x = mu
        if not bool(torch.isfinite(x).all()):
            raise NumericsError(f"non-finite sample state at step k={k}")
    if clip is not None:
        x = x.clamp(clip[0], clip[1])
    return x
