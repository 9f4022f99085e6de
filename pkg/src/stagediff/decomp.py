"""Progressive sequence decomposition backbone.

Per stage and (normally) per channel: patch the sequence, encode it with
self-attention, fuse the previous stage's history through cross-attention,
unfold back to sequence length, and peel off a trend/residual pair at each
of S time scales. The residual feeds the next scale; the mean of the S
trends is the clean-data estimate for the stage.

Sequences travel as [B, C, L_sta] (C = 1 for channel-independent modeling,
C = D when channels are modeled jointly); latents as [B, P, d_model].
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, NumericsError


def patch_count(L_sta: int, L_patch: int, L_win: int) -> int:
    """P = (L_sta - L_patch)/L_win + 1; rejects geometries that do not tile."""
    if L_patch < 1 or L_win < 1:
        raise ConfigError(f"L_patch={L_patch} and L_win={L_win} must be >= 1")
    if L_patch > L_sta:
        raise ConfigError(f"L_patch={L_patch} exceeds stage length {L_sta}")
    if (L_sta - L_patch) % L_win != 0:
        raise ConfigError(
            f"(L_sta - L_patch) = {L_sta - L_patch} not divisible by L_win={L_win}"
        )
    return (L_sta - L_patch) // L_win + 1


def patchify(x: Tensor, L_patch: int, L_win: int) -> Tensor:
    """Slice the last axis into overlapping patches: [..., L] -> [..., P, L_patch]."""
    patch_count(x.shape[-1], L_patch, L_win)
    return x.unfold(-1, L_patch, L_win).contiguous()


def attend(
    q: Tensor, k: Tensor, v: Tensor, d_k: Optional[int] = None, return_weights: bool = False
):
    """Scaled dot-product attention with a row-stochastic weight matrix.

    q: [..., P_q, d_k], k: [..., P_k, d_k], v: [..., P_k, d_v]. Softmax runs
    over the key axis, so each query's weights sum to 1.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    scale = math.sqrt(d_k if d_k is not None else q.shape[-1])
    weights = torch.softmax(q @ k.transpose(-2, -1) / scale, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(nn.Module):
    """H heads with bias-free Q/K/V maps, concatenated and projected back.

    Per head the queries/keys are d_k wide and the values full d_model wide;
    the concatenation of head outputs (H * d_model) is projected to d_model.
    """

    def __init__(self, d_model: int, heads: int, d_k: int, store_weights: bool = False):
        super().__init__()
        if heads < 1 or d_k < 1:
            raise ConfigError("heads and d_k must be >= 1")
        self.heads = heads
        self.d_k = d_k
        self.d_model = d_model
        self.w_q = nn.Linear(d_model, heads * d_k, bias=False)
        self.w_k = nn.Linear(d_model, heads * d_k, bias=False)
        self.w_v = nn.Linear(d_model, heads * d_model, bias=False)
        self.w_o = nn.Linear(heads * d_model, d_model, bias=False)
        self.store_weights = store_weights
        self.last_weights: Optional[Tensor] = None

    def forward(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        # x_q: [B, P_q, d_model], x_kv: [B, P_k, d_model]
        bsz, p_q, _ = x_q.shape
        p_k = x_kv.shape[1]
        q = self.w_q(x_q).view(bsz, p_q, self.heads, self.d_k).transpose(1, 2)
        k = self.w_k(x_kv).view(bsz, p_k, self.heads, self.d_k).transpose(1, 2)
        v = self.w_v(x_kv).view(bsz, p_k, self.heads, self.d_model).transpose(1, 2)
        out, weights = attend(q, k, v, self.d_k, return_weights=True)
        if self.store_weights:
            self.last_weights = weights.detach()
        out = out.transpose(1, 2).reshape(bsz, p_q, self.heads * self.d_model)
        return self.w_o(out)


class SequenceNorm(nn.Module):
    """Normalization over the patch axis of [B, P, d_model] latents.

    mode="instance" (default) normalizes each sequence independently so that
    sequences at different noise levels do not share statistics; mode="batch"
    is standard BatchNorm1d over the feature channels.
    """

    def __init__(self, d_model: int, mode: str = "instance", eps: float = 1e-5):
        super().__init__()
        if mode not in ("instance", "batch"):
            raise ConfigError(f"norm mode {mode!r} not in ('instance', 'batch')")
        self.mode = mode
        self.eps = eps
        if mode == "batch":
            self.bn = nn.BatchNorm1d(d_model)
        else:
            self.weight = nn.Parameter(torch.ones(d_model))
            self.bias = nn.Parameter(torch.zeros(d_model))

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "batch":
            return self.bn(x.transpose(1, 2)).transpose(1, 2)
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class FeedForward(nn.Module):
    def __init__(self, d_model: int, expansion: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, expansion * d_model),
            nn.GELU(),
            nn.Linear(expansion * d_model, d_model),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PatchEmbedder(nn.Module):
    """Linear patch projection plus a learnable positional table.

    Patches of width ``in_width * L_patch`` map to d_model; position p gets
    its own additive embedding, so a zero projection returns the table.
    """

    def __init__(self, L_sta: int, L_patch: int, L_win: int, d_model: int, in_width: int = 1):
        super().__init__()
        self.L_patch = L_patch
        self.L_win = L_win
        self.in_width = in_width
        self.P = patch_count(L_sta, L_patch, L_win)
        self.proj = nn.Linear(in_width * L_patch, d_model, bias=False)
        self.pos = nn.Parameter(torch.zeros(self.P, d_model))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, x: Tensor) -> Tensor:
        # x: [B, C, L_sta] -> [B, P, C * L_patch] -> [B, P, d_model]
        if x.shape[-2] != self.in_width:
            raise ValueError(f"expected {self.in_width} input channels, got {x.shape[-2]}")
        patches = patchify(x, self.L_patch, self.L_win)  # [B, C, P, L_patch]
        patches = patches.permute(0, 2, 1, 3).flatten(-2)
        return self.proj(patches) + self.pos


def embed_patches(patches: Tensor, embedder: PatchEmbedder) -> Tensor:
    """Embed pre-cut patches [B, P, in_width * L_patch] without re-patching."""
    if patches.shape[-1] != embedder.in_width * embedder.L_patch:
        raise ValueError(
            f"patch width {patches.shape[-1]} != {embedder.in_width * embedder.L_patch}"
        )
    return embedder.proj(patches) + embedder.pos


class EncoderBlock(nn.Module):
    """Self-attention with residual, one normalization, then FFN with residual."""

    def __init__(self, d_model: int, heads: int, d_k: int, norm: str = "instance"):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, d_k)
        self.norm = SequenceNorm(d_model, mode=norm)
        self.ffn = FeedForward(d_model)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(x + self.attn(x, x))
        return y + self.ffn(y)


class DecoderBlock(nn.Module):
    """Cross-attention over history, FFN, and a linear unfolding head.

    Queries come from the current sequence encoding, keys/values from the
    history encoding; the flattened latent is mapped to ``out_width * L_sta``.
    """

    def __init__(
        self,
        L_sta: int,
        P: int,
        d_model: int,
        heads: int,
        d_k: int,
        norm: str = "instance",
        out_width: int = 1,
    ):
        super().__init__()
        self.L_sta = L_sta
        self.out_width = out_width
        self.attn = MultiHeadAttention(d_model, heads, d_k)
        self.norm = SequenceNorm(d_model, mode=norm)
        self.ffn = FeedForward(d_model)
        self.unfold = nn.Linear(P * d_model, out_width * L_sta)

    def forward(self, z: Tensor, z_his: Tensor) -> Tensor:
        # z, z_his: [B, P, d_model] -> [B, out_width, L_sta]
        y = self.norm(z + self.attn(z, z_his))
        h = y + self.ffn(y)
        out = self.unfold(h.flatten(-2))
        return out.view(out.shape[0], self.out_width, self.L_sta)


def decompose(x: Tensor, pool_kernel: int) -> Tuple[Tensor, Tensor]:
    """Split [..., L] into (trend, residual) with a centered moving average.

    Replicate edge padding keeps the length and leaves constant sequences
    fixed; residual = x - trend exactly.
    """
    if pool_kernel < 1 or pool_kernel % 2 == 0:
        raise ConfigError(f"pool kernel {pool_kernel} must be odd and >= 1")
    if pool_kernel == 1:
        return x, torch.zeros_like(x)
    pad = (pool_kernel - 1) // 2
    flat = x.reshape(-1, 1, x.shape[-1])
    padded = F.pad(flat, (pad, pad), mode="replicate")
    trend = F.avg_pool1d(padded, kernel_size=pool_kernel, stride=1).reshape(x.shape)
    return trend, x - trend


def default_pool_kernels(S: int, base: int = 25) -> Tuple[int, ...]:
    """Base kernel at the first scale, halved (rounded up to odd) per deeper scale."""
    kernels = []
    k = base
    for _ in range(S):
        kernels.append(k)
        k = max(1, k // 2)
        if k % 2 == 0:
            k += 1
    return tuple(kernels)


class DecompLayer(nn.Module):
    """One time scale: embed + encode the sequence and its history, decode, decompose."""

    def __init__(
        self,
        L_sta: int,
        L_patch: int,
        L_win: int,
        d_model: int,
        heads: int,
        d_k: int,
        pool_kernel: int,
        step_emb_dim: int,
        norm: str = "instance",
        width: int = 1,
    ):
        super().__init__()
        self.pool_kernel = pool_kernel
        self.embedder = PatchEmbedder(L_sta, L_patch, L_win, d_model, in_width=width)
        self.step_proj = nn.Linear(step_emb_dim, d_model)
        self.encoder = EncoderBlock(d_model, heads, d_k, norm=norm)
        # History runs through the same structure with its own parameters.
        self.hist_embedder = PatchEmbedder(L_sta, L_patch, L_win, d_model, in_width=width)
        self.hist_encoder = EncoderBlock(d_model, heads, d_k, norm=norm)
        self.decoder = DecoderBlock(
            L_sta, self.embedder.P, d_model, heads, d_k, norm=norm, out_width=width
        )

    def forward(self, x: Tensor, history: Tensor, step_vec: Tensor):
        # x, history: [B, C, L_sta]; step_vec: [B, step_emb_dim]
        step = self.step_proj(step_vec).unsqueeze(-2)
        z = self.encoder(self.embedder(x) + step)
        z_his = self.hist_encoder(self.hist_embedder(history) + step)
        decoded = self.decoder(z, z_his)
        trend, residual = decompose(decoded, self.pool_kernel)
        return decoded, trend, residual


class DecompStack(nn.Module):
    """S stacked decomposition layers sharing one patch geometry."""

    def __init__(
        self,
        L_sta: int,
        L_patch: int,
        L_win: int,
        d_model: int,
        heads: int,
        d_k: int,
        pool_kernels: Sequence[int],
        step_emb_dim: int,
        norm: str = "instance",
        width: int = 1,
    ):
        super().__init__()
        if len(pool_kernels) < 1:
            raise ConfigError("need at least one scale")
        self.width = width
        self.layers = nn.ModuleList(
            DecompLayer(
                L_sta, L_patch, L_win, d_model, heads, d_k, kernel, step_emb_dim,
                norm=norm, width=width,
            )
            for kernel in pool_kernels
        )

    @property
    def S(self) -> int:
        return len(self.layers)

    def run_stack(
        self, x: Tensor, histories: Sequence[Tensor], step_vec: Tensor
    ) -> Tuple[Tensor, List[Tensor]]:
        """Progressively decompose x given one history sequence per scale.

        x: [B, C, L_sta]; histories: S tensors of the same shape. Returns the
        stage estimate (mean of the per-scale trends) and the trend list for
        inter-stage fusion.
        """
        if len(histories) != self.S:
            raise ValueError(f"got {len(histories)} histories for S={self.S} scales")
        current = x
        trends: List[Tensor] = []
        for layer, history in zip(self.layers, histories):
            decoded, trend, residual = layer(current, history, step_vec)
            if not bool(torch.isfinite(decoded).all()):
                raise NumericsError(f"non-finite activations at scale {len(trends) + 1}")
            trends.append(trend)
            current = residual
        estimate = torch.stack(trends).mean(dim=0)
        return estimate, trends

    forward = run_stack
