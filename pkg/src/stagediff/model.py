"""Full denoiser assembly, training loop, generation, and ablation variants.

The denoiser splits a noisy window into M stages and runs the decomposition
backbone on each, passing fused trend histories forward between stages. One
diffusion step index covers the whole window; stages are sequential inside
a single denoiser call.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from . import schedule as sched_mod
from .dataio import NormStats, WindowSet
from .decomp import DecompStack, default_pool_kernels, patch_count
from .errors import ConfigError, NumericsError
from .fusion import FusionConv
from .schedule import NoiseSchedule, build_schedule, forward_noise_batch, sinusoidal_embedding, training_loss
from .seeding import derive_seed

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_ci", "no_cd", "no_stage")

CHECKPOINT_MAGIC = "stagediff-checkpoint"
CHECKPOINT_VERSION = 1

# Architecture/diffusion fields covered by the structure hash; training-only
# knobs (lr, batch size, steps, seed) deliberately excluded so retraining
# budgets do not invalidate generation.
_STRUCTURE_FIELDS = (
    "L_ser", "M", "D", "S", "L_patch", "L_win", "d_model", "heads", "d_k",
    "L_conv", "pool_kernels", "T", "schedule_kind", "noise_start", "noise_end",
    "variance_mode", "ablation", "per_channel_weights", "per_stage_weights",
    "norm", "step_emb_dim", "clip_samples",
)


@dataclass(frozen=True)
class StageDiffConfig:
    """Hyperparameters for the stage-wise diffusion model.

    ``M * L_sta == L_ser`` and the patch geometry must tile each stage; both
    are checked by ``resolved()``, which also fills derived defaults (d_k,
    pool kernels, step embedding width) and applies ablation rewiring.
    """

    L_ser: int
    M: int
    D: int
    S: int = 3
    L_patch: int = 8
    L_win: int = 4
    d_model: int = 64
    heads: int = 4
    d_k: Optional[int] = None
    L_conv: int = 5
    pool_kernels: Optional[Tuple[int, ...]] = None
    T: int = 500
    schedule_kind: str = "linear"
    noise_start: float = 1e-4
    noise_end: float = 0.02
    variance_mode: str = "ddpm"
    learning_rate: float = 1e-3
    batch_size: int = 64
    train_steps: int = 10_000
    grad_clip: float = 1.0
    seed: int = 0
    ablation: str = "none"
    per_channel_weights: bool = False
    per_stage_weights: bool = False
    norm: str = "instance"
    step_emb_dim: Optional[int] = None
    detach_stage_history: bool = False
    clip_samples: bool = True
    val_fraction: float = 0.0
    val_interval: int = 250
    log_interval: int = 100

    @property
    def L_sta(self) -> int:
        return self.L_ser // self.M

    def resolved(self) -> "StageDiffConfig":
        """Validated copy with every derived field made explicit."""
        cfg = self
        if cfg.ablation not in ABLATIONS:
            raise ConfigError(f"ablation {cfg.ablation!r} not one of {ABLATIONS}")
        if cfg.ablation == "no_stage" and cfg.M != 1:
            cfg = replace(cfg, M=1)
        if cfg.D < 1:
            raise ConfigError(f"D={cfg.D} must be >= 1")
        if cfg.M < 1 or cfg.L_ser < 2:
            raise ConfigError(f"M={cfg.M} and L_ser={cfg.L_ser} out of range")
        if cfg.L_ser % cfg.M != 0:
            raise ConfigError(f"L_ser={cfg.L_ser} not divisible by M={cfg.M}")
        if cfg.ablation == "no_ci" and cfg.per_channel_weights:
            raise ConfigError("per_channel_weights conflicts with ablation='no_ci'")
        patch_count(cfg.L_sta, cfg.L_patch, cfg.L_win)
        if cfg.S < 1:
            raise ConfigError(f"S={cfg.S} must be >= 1")
        if cfg.d_k is None:
            cfg = replace(cfg, d_k=max(1, cfg.d_model // cfg.heads))
        if cfg.pool_kernels is None:
            cfg = replace(cfg, pool_kernels=default_pool_kernels(cfg.S))
        else:
            cfg = replace(cfg, pool_kernels=tuple(int(k) for k in cfg.pool_kernels))
        if len(cfg.pool_kernels) != cfg.S:
            raise ConfigError(f"{len(cfg.pool_kernels)} pool kernels for S={cfg.S}")
        for k in cfg.pool_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"pool kernel {k} must be odd and >= 1")
        if cfg.step_emb_dim is None:
            cfg = replace(cfg, step_emb_dim=cfg.d_model)
        if cfg.step_emb_dim % 2 != 0:
            raise ConfigError(f"step_emb_dim={cfg.step_emb_dim} must be even")
        if cfg.T < 1:
            raise ConfigError(f"T={cfg.T} must be >= 1")
        if cfg.variance_mode not in ("ddpm", "paper"):
            raise ConfigError(f"variance_mode {cfg.variance_mode!r} unknown")
        if cfg.batch_size < 1 or cfg.train_steps < 0 or cfg.learning_rate <= 0:
            raise ConfigError("batch_size >= 1, train_steps >= 0, learning_rate > 0 required")
        if not 0.0 <= cfg.val_fraction < 1.0:
            raise ConfigError(f"val_fraction={cfg.val_fraction} outside [0, 1)")
        return cfg

    def structure_hash(self) -> str:
        cfg = self.resolved()
        payload = {name: getattr(cfg, name) for name in _STRUCTURE_FIELDS}
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def structure_diff(self, other: "StageDiffConfig") -> List[str]:
        """Human-readable field-by-field differences in the hashed structure."""
        a, b = self.resolved(), other.resolved()
        lines = []
        for name in _STRUCTURE_FIELDS:
            va, vb = getattr(a, name), getattr(b, name)
            if va != vb:
                lines.append(f"{name}: {va} != {vb}")
        return lines


def make_schedule(config: StageDiffConfig) -> NoiseSchedule:
    cfg = config.resolved()
    return build_schedule(
        cfg.T, cfg.schedule_kind, noise_start=cfg.noise_start, noise_end=cfg.noise_end
    )


class StageDiffDenoiser(nn.Module):
    """Clean-data denoiser x0_hat = f(x_k, k) over whole windows.

    Stage m's per-channel trends, fused across channels per scale, become
    stage m+1's history input; stage 1 sees zeros. Ablations rewire this:
    no_ci processes channels jointly, no_cd passes trends through unfused,
    no_stage collapses to one stage with an extra channel-mixing convolution
    inside the decomposition path.
    """

    def __init__(self, config: StageDiffConfig):
        super().__init__()
        cfg = config.resolved()
        self.cfg = cfg
        width = cfg.D if cfg.ablation == "no_ci" else 1
        self.width = width
        n_channel_copies = cfg.D if cfg.per_channel_weights and width == 1 else 1
        n_stage_copies = cfg.M if cfg.per_stage_weights else 1

        def new_stack() -> DecompStack:
            return DecompStack(
                cfg.L_sta, cfg.L_patch, cfg.L_win, cfg.d_model, cfg.heads, cfg.d_k,
                cfg.pool_kernels, cfg.step_emb_dim, norm=cfg.norm, width=width,
            )

        self.stacks = nn.ModuleList(
            nn.ModuleList(new_stack() for _ in range(n_channel_copies))
            for _ in range(n_stage_copies)
        )
        use_fusion = cfg.M > 1 and cfg.ablation not in ("no_cd", "no_stage")
        self.fusion = (
            nn.ModuleList(FusionConv(cfg.D, cfg.L_conv) for _ in range(cfg.S))
            if use_fusion
            else None
        )
        self.extra_conv = FusionConv(cfg.D, cfg.L_conv) if cfg.ablation == "no_stage" else None

    def _stage_stacks(self, m: int) -> nn.ModuleList:
        return self.stacks[m if self.cfg.per_stage_weights else 0]

    def _run_stage(
        self, m: int, x_stage: Tensor, histories: List[Tensor], step_vec: Tensor
    ) -> Tuple[Tensor, List[Tensor]]:
        # x_stage: [B, D, L_sta]; histories: S x [B, D, L_sta]
        cfg = self.cfg
        stacks = self._stage_stacks(m)
        if self.width > 1:
            estimate, trends = stacks[0].run_stack(x_stage, histories, step_vec)
        elif len(stacks) > 1:
            per_channel = [
                stacks[d].run_stack(
                    x_stage[:, d : d + 1], [h[:, d : d + 1] for h in histories], step_vec
                )
                for d in range(cfg.D)
            ]
            estimate = torch.cat([e for e, _ in per_channel], dim=1)
            trends = [
                torch.cat([t[s] for _, t in per_channel], dim=1) for s in range(cfg.S)
            ]
        else:
            batch = x_stage.shape[0]
            rows = x_stage.reshape(batch * cfg.D, 1, cfg.L_sta)
            hist_rows = [h.reshape(batch * cfg.D, 1, cfg.L_sta) for h in histories]
            step_rows = step_vec.repeat_interleave(cfg.D, dim=0)
            est_rows, trend_rows = stacks[0].run_stack(rows, hist_rows, step_rows)
            estimate = est_rows.reshape(batch, cfg.D, cfg.L_sta)
            trends = [t.reshape(batch, cfg.D, cfg.L_sta) for t in trend_rows]
        if self.extra_conv is not None:
            # Global-modeling variant: channel mixing happens inside the
            # decomposition path instead of between stages.
            fused = [self.extra_conv(t) for t in trends]
            estimate = torch.stack(fused).mean(dim=0)
        return estimate, trends

    def _next_history(self, trends: List[Tensor]) -> List[Tensor]:
        if self.fusion is not None:
            out = [conv(t) for conv, t in zip(self.fusion, trends)]
        else:
            out = list(trends)
        if self.cfg.detach_stage_history:
            out = [t.detach() for t in out]
        return out

    def forward(self, x_k: Tensor, k: Union[int, Tensor]) -> Tensor:
        cfg = self.cfg
        if x_k.ndim != 3 or x_k.shape[1] != cfg.L_ser or x_k.shape[2] != cfg.D:
            raise ValueError(
                f"expected input [B, {cfg.L_ser}, {cfg.D}], got {tuple(x_k.shape)}"
            )
        batch = x_k.shape[0]
        ks = torch.as_tensor(k, dtype=torch.long)
        if ks.ndim == 0:
            ks = ks.expand(batch)
        if ks.shape != (batch,):
            raise ValueError(f"step index shape {tuple(ks.shape)} != ({batch},)")
        step_vec = sinusoidal_embedding(ks, cfg.step_emb_dim, dtype=x_k.dtype)
        histories = [
            torch.zeros(batch, cfg.D, cfg.L_sta, dtype=x_k.dtype, device=x_k.device)
            for _ in range(cfg.S)
        ]
        outputs = []
        for m in range(cfg.M):
            x_stage = x_k[:, m * cfg.L_sta : (m + 1) * cfg.L_sta, :].transpose(1, 2)
            try:
                estimate, trends = self._run_stage(m, x_stage, histories, step_vec)
            except NumericsError as exc:
                raise NumericsError(f"stage {m + 1}: {exc}") from exc
            outputs.append(estimate.transpose(1, 2))
            if m < cfg.M - 1:
                histories = self._next_history(trends)
        return torch.cat(outputs, dim=1)

    def denoise_window(self, x_k: Tensor, k: int) -> Tensor:
        """Single-window convenience wrapper: [L_ser, D] -> [L_ser, D]."""
        return self.forward(x_k.unsqueeze(0), k).squeeze(0)


def build_variant(config: StageDiffConfig) -> StageDiffDenoiser:
    """Construct the denoiser for the configured ablation variant."""
    return StageDiffDenoiser(config)


@dataclass
class TrainTrace:
    """Per-step losses plus periodic validation losses and wall-clock time."""

    steps: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    val_steps: List[int] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_csv(self, path: Path | str) -> None:
        val = dict(zip(self.val_steps, self.val_loss))
        lines = ["step,loss,val_loss"]
        for s, l in zip(self.steps, self.loss):
            v = val.get(s, "")
            lines.append(f"{s},{l!r},{v!r}" if v != "" else f"{s},{l!r},")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    """Everything needed to rebuild the denoiser and reproduce generation."""

    config: StageDiffConfig
    state: Dict[str, Tensor]
    norm_stats: Optional[NormStats] = None
    step: int = 0
    format_version: int = CHECKPOINT_VERSION

    def build_denoiser(self) -> StageDiffDenoiser:
        model = StageDiffDenoiser(self.config)
        model.load_state_dict(self.state)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": ckpt.format_version,
        "config": asdict(ckpt.config.resolved()),
        "structure_hash": ckpt.config.structure_hash(),
        "state": ckpt.state,
        "norm_stats": None
        if ckpt.norm_stats is None
        else {
            "min": ckpt.norm_stats.minimum.tolist(),
            "max": ckpt.norm_stats.maximum.tolist(),
            "epsilon": ckpt.norm_stats.epsilon,
        },
        "step": ckpt.step,
    }
    torch.save(payload, path)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a stagediff checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    raw_cfg = dict(payload["config"])
    if raw_cfg.get("pool_kernels") is not None:
        raw_cfg["pool_kernels"] = tuple(raw_cfg["pool_kernels"])
    config = StageDiffConfig(**raw_cfg)
    if config.structure_hash() != payload["structure_hash"]:
        raise ConfigError(f"{path}: structure hash mismatch, file corrupted or edited")
    stats = None
    if payload["norm_stats"] is not None:
        ns = payload["norm_stats"]
        stats = NormStats(
            minimum=np.asarray(ns["min"], dtype=np.float64),
            maximum=np.asarray(ns["max"], dtype=np.float64),
            epsilon=float(ns["epsilon"]),
        )
    return Checkpoint(
        config=config,
        state=payload["state"],
        norm_stats=stats,
        step=int(payload["step"]),
        format_version=int(payload["version"]),
    )


def _as_tensor_windows(windows: Union[WindowSet, np.ndarray, Tensor]) -> Tensor:
    if isinstance(windows, WindowSet):
        data = torch.as_tensor(windows.windows, dtype=torch.float32)
    else:
        data = torch.as_tensor(windows, dtype=torch.float32)
    if data.ndim != 3:
        raise ValueError("training windows must be [N, L_ser, D]")
    return data


def train(
    windows: Union[WindowSet, np.ndarray, Tensor],
    config: StageDiffConfig,
    *,
    norm_stats: Optional[NormStats] = None,
    partial_path: Optional[Path] = None,
    partial_interval: int = 1000,
) -> Tuple[Checkpoint, TrainTrace]:
    """Train the denoiser with the clean-data objective.

    Each step draws a minibatch, a uniform step index in 1..T per example,
    and fresh Gaussian noise; the loss is the MSE between the clean batch
    and the denoiser output at the noised batch. Adam with gradient-norm
    clipping; fully deterministic under ``config.seed``.
    """
    cfg = config.resolved()
    data = _as_tensor_windows(windows)
    n_total = data.shape[0]
    if n_total == 0:
        raise ValueError("empty window set")
    if data.shape[1] != cfg.L_ser or data.shape[2] != cfg.D:
        raise ValueError(
            f"windows [{n_total}, {data.shape[1]}, {data.shape[2]}] do not match "
            f"config L_ser={cfg.L_ser}, D={cfg.D}"
        )

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = build_variant(cfg)
    model.train()
    sched = make_schedule(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "batches"))

    val_data: Optional[Tensor] = None
    if cfg.val_fraction > 0.0 and n_total >= 10:
        n_val = max(1, int(round(cfg.val_fraction * n_total)))
        perm = torch.randperm(n_total, generator=gen)
        val_data, data = data[perm[:n_val]], data[perm[n_val:]]
        n_total = data.shape[0]

    trace = TrainTrace()
    started = time.monotonic()
    batch = min(cfg.batch_size, n_total)
    for step in range(1, cfg.train_steps + 1):
        idx = torch.randint(n_total, (batch,), generator=gen)
        x0 = data[idx]
        ks = torch.randint(1, cfg.T + 1, (batch,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_k = forward_noise_batch(x0, ks, eps, sched)
        loss = training_loss(x0, model(x_k, ks))
        if not bool(torch.isfinite(loss)):
            hist = torch.bincount(ks, minlength=cfg.T + 1)
            top = torch.topk(hist, min(5, cfg.T)).indices.tolist()
            raise NumericsError(
                f"non-finite loss at step {step}; most frequent k in batch: {top}"
            )
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        trace.steps.append(step)
        trace.loss.append(float(loss.detach()))
        if step % cfg.log_interval == 0 or step == cfg.train_steps:
            recent = trace.loss[-cfg.log_interval :]
            log.info("step %d/%d loss %.5f", step, cfg.train_steps, sum(recent) / len(recent))
        if val_data is not None and (step % cfg.val_interval == 0 or step == cfg.train_steps):
            trace.val_steps.append(step)
            trace.val_loss.append(_validation_loss(model, val_data, cfg, sched, gen))
        if partial_path is not None and step % partial_interval == 0:
            save_checkpoint(
                Checkpoint(cfg, model.state_dict(), norm_stats=norm_stats, step=step),
                partial_path,
            )
    trace.wall_time = time.monotonic() - started
    ckpt = Checkpoint(cfg, model.state_dict(), norm_stats=norm_stats, step=cfg.train_steps)
    return ckpt, trace


def _validation_loss(
    model: StageDiffDenoiser,
    val_data: Tensor,
    cfg: StageDiffConfig,
    sched: NoiseSchedule,
    gen: torch.Generator,
) -> float:
    model.eval()
    with torch.no_grad():
        ks = torch.randint(1, cfg.T + 1, (val_data.shape[0],), generator=gen)
        eps = torch.randn(val_data.shape, generator=gen)
        x_k = forward_noise_batch(val_data, ks, eps, sched)
        loss = float(training_loss(val_data, model(x_k, ks)))
    model.train()
    return loss


def generate(ckpt: Checkpoint, n: int, seed: int = 0, batch_size: int = 256) -> WindowSet:
    """Sample n normalized windows from a trained checkpoint."""
    cfg = ckpt.config.resolved()
    model = ckpt.build_denoiser()
    sched = make_schedule(cfg)

    def denoiser(x: Tensor, k: int) -> Tensor:
        with torch.no_grad():
            return model(x, k)

    parts = []
    remaining = n
    chunk_index = 0
    while remaining > 0:
        m = min(batch_size, remaining)
        parts.append(
            sched_mod.sample(
                denoiser,
                m,
                (cfg.L_ser, cfg.D),
                sched,
                seed=derive_seed(seed, f"generate:{chunk_index}"),
                clip=(0.0, 1.0) if cfg.clip_samples else None,
            )
        )
        remaining -= m
        chunk_index += 1
    if parts:
        windows = torch.cat(parts).double().numpy()
    else:
        windows = np.empty((0, cfg.L_ser, cfg.D), dtype=np.float64)
    return WindowSet(windows=windows, L_ser=cfg.L_ser, stride=cfg.L_ser)
