"""Multi-channel information fusion between stages.

Per time scale, the D channels' trend sequences from stage m are fused with
a multi-channel temporal convolution; the result, split back into D
single-channel sequences, is the history handed to stage m+1.
"""

from __future__ import annotations

from typing import List, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError


class FusionConv(nn.Module):
    """Same-length temporal convolution mixing all D channels.

    Kernel shape [D_out=D, D_in=D, L_conv] with zero padding of
    (L_conv - 1)/2 on each side, so every output channel sees every input
    channel and the temporal length is preserved.
    """

    def __init__(self, D: int, L_conv: int = 5):
        super().__init__()
        if L_conv < 1 or L_conv % 2 == 0:
            raise ConfigError(f"L_conv={L_conv} must be odd and >= 1")
        self.D = D
        self.L_conv = L_conv
        self.conv = nn.Conv1d(D, D, L_conv, padding=(L_conv - 1) // 2)

    def forward(self, trends: Tensor) -> Tensor:
        # trends: [..., D, L_sta] -> same shape
        if trends.shape[-2] != self.D:
            raise ValueError(f"expected {self.D} channels, got {trends.shape[-2]}")
        flat = trends.reshape(-1, self.D, trends.shape[-1])
        return self.conv(flat).reshape(trends.shape)


def fuse_scale(trends: Tensor, conv: FusionConv) -> Tensor:
    """Fuse one scale's [D, L_sta] (or batched [..., D, L_sta]) trend matrix."""
    return conv(trends)


class HistoryBundle:
    """Per-scale fused trend histories passed from one stage to the next."""

    def __init__(self, per_scale: Sequence[Tensor]):
        if len(per_scale) < 1:
            raise ValueError("bundle needs at least one scale")
        shapes = {tuple(t.shape) for t in per_scale}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent per-scale shapes: {sorted(shapes)}")
        self.per_scale: List[Tensor] = list(per_scale)

    @property
    def S(self) -> int:
        return len(self.per_scale)

    def channel(self, s: int, d: int) -> Tensor:
        """Single-channel history sequence for scale s, channel d."""
        return self.per_scale[s][..., d, :]


def build_history(trends_all_scales: Sequence[Tensor], convs: Sequence[FusionConv]) -> HistoryBundle:
    """Fuse each scale's trends with its own convolution."""
    if len(trends_all_scales) != len(convs):
        raise ValueError(
            f"{len(trends_all_scales)} trend scales but {len(convs)} fusion convolutions"
        )
    return HistoryBundle([fuse_scale(t, conv) for t, conv in zip(trends_all_scales, convs)])


def initial_history(S: int, D: int, L_sta: int, batch: int = 0, dtype=torch.float32) -> HistoryBundle:
    """All-zero bundle used for the first stage (no history exists yet)."""
    if S < 1 or D < 1 or L_sta < 1:
        raise ValueError("S, D, L_sta must all be positive")
    shape = (batch, D, L_sta) if batch else (D, L_sta)
    return HistoryBundle([torch.zeros(shape, dtype=dtype) for _ in range(S)])
