"""TgramNet: learnable temporal front-end producing a Tgram with the same shape as the log-Mel map."""

from __future__ import annotations

import torch
from torch import nn

from .features import FeatureTensor, SpectralConfig


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (batch, channels, time) tensor, per time step."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class TgramBlock(nn.Module):
    def __init__(self, channels: int, negative_slope: float = 0.01):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.act = nn.LeakyReLU(negative_slope)
        self.conv = nn.Conv1d(channels, channels, kernel_size=3, stride=1, padding=1)

    def forward(self, x):
        return self.conv(self.act(self.norm(x)))


class TgramNet(nn.Module):
    """Large-kernel strided Conv1d (channels=M, kernel=W, stride=H, pad=W/2) followed by 3 blocks.

    ``forward`` maps ``(batch, L)`` waves to ``(batch, 1, M, L // H + 1)``.
    """

    def __init__(
        self,
        cfg: SpectralConfig,
        n_blocks: int = 3,
        negative_slope: float = 0.01,
        clip_length: int | None = None,
    ):
        super().__init__()
        self.mel_bins = cfg.mel_bins
        self.clip_length = clip_length
        self.front_conv = nn.Conv1d(
            1, cfg.mel_bins, kernel_size=cfg.window_size, stride=cfg.hop_length, padding=cfg.window_size // 2
        )
        self.blocks = nn.ModuleList(TgramBlock(cfg.mel_bins, negative_slope) for _ in range(n_blocks))
        # identity-bypass switches, used for ablating single blocks
        self.bypass = [False] * n_blocks

    def forward(self, waves: torch.Tensor) -> torch.Tensor:
        if waves.ndim == 1:
            waves = waves.unsqueeze(0)
        if self.clip_length is not None and waves.shape[-1] != self.clip_length:
            raise ValueError(f"TgramNet expects clips of {self.clip_length} samples, got {waves.shape[-1]}")
        x = self.front_conv(waves.unsqueeze(1))
        for block, skip in zip(self.blocks, self.bypass):
            if not skip:
                x = block(x)
        return x.unsqueeze(1)


def tgramnet_init(cfg: SpectralConfig, seed: int = 0, **kwargs) -> TgramNet:
    """Build a TgramNet whose weights depend only on ``seed`` (PyTorch fan-in uniform init)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TgramNet(cfg, **kwargs)


def tgramnet_forward(params: TgramNet, wave) -> FeatureTensor:
    """Single-clip forward returning a ``(1, M, N)`` Tgram. Gradients flow through."""
    wave = torch.as_tensor(wave)
    if wave.ndim != 1:
        raise ValueError(f"expected a 1-D wave, got shape {tuple(wave.shape)}")
    wave = wave.to(params.front_conv.weight.dtype)
    return FeatureTensor(params(wave)[0], "Tgram")
