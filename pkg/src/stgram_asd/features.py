"""Spectral features: power spectrogram, log-Mel (Sgram), log-spectrogram and STgram fusion."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataio import AudioClip, ConfigurationError

FEATURE_KINDS = ("Sgram", "Tgram", "Spec", "STgram")


@dataclass(frozen=True)
class SpectralConfig:
    window_size: int = 1024
    hop_length: int = 512
    mel_bins: int = 128
    sample_rate: int = 16_000
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist
    log_floor: float = 1e-8
    window: str = "hann"

    def __post_init__(self):
        if self.window_size < 2 or self.window_size % 2:
            raise ConfigurationError(f"window_size must be an even integer >= 2, got {self.window_size}")
        if not 1 <= self.hop_length <= self.window_size:
            raise ConfigurationError(f"hop_length must be in [1, window_size], got {self.hop_length}")
        if self.mel_bins < 1:
            raise ConfigurationError("mel_bins must be >= 1")
        if self.mel_bins > self.fft_bins:
            raise ConfigurationError(f"mel_bins={self.mel_bins} exceeds fft_bins={self.fft_bins}")
        if not self.log_floor > 0:
            raise ConfigurationError("log_floor must be > 0")
        if not 0 <= self.fmin < self.f_max <= self.sample_rate / 2:
            raise ConfigurationError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, fmax={self.f_max}"
            )
        if self.window not in _WINDOWS:
            raise ConfigurationError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")

    @property
    def fft_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def f_max(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    def n_frames(self, length: int) -> int:
        return length // self.hop_length + 1

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


_WINDOWS = {
    "hann": lambda n, dtype: torch.hann_window(n, periodic=True, dtype=dtype),
    "hamming": lambda n, dtype: torch.hamming_window(n, periodic=True, dtype=dtype),
    "rect": lambda n, dtype: torch.ones(n, dtype=dtype),
}


@dataclass
class FeatureTensor:
    data: torch.Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.data.ndim != 3:
            raise ValueError(f"{self.kind} must be (channels, rows, frames), got {tuple(self.data.shape)}")
        channels = 2 if self.kind == "STgram" else 1
        if self.data.shape[0] != channels:
            raise ValueError(f"{self.kind} must have {channels} channel(s), got {self.data.shape[0]}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_bank(cfg: SpectralConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (mel_bins, fft_bins), peak weight 1 at each centre."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.f_max), cfg.mel_bins + 2))
    freqs = np.arange(cfg.fft_bins) * cfg.sample_rate / cfg.window_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(cfg: SpectralConfig) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.f_max), cfg.mel_bins + 2))[1:-1]


def _reflect_index(length: int, pad: int) -> torch.Tensor:
    # numpy-style 'reflect' (edge sample not repeated); repeats the reflection when pad >= length
    i = torch.arange(-pad, length + pad)
    if length == 1:
        return torch.zeros_like(i)
    period = 2 * (length - 1)
    j = torch.remainder(i, period)
    return torch.where(j >= length, period - j, j)


def stft_power(waves: torch.Tensor, window: torch.Tensor, hop_length: int) -> torch.Tensor:
    """Centred power STFT of ``waves`` (..., L) -> (..., fft_bins, frames)."""
    if not torch.isfinite(waves).all():
        raise ValueError("non-finite samples in waveform")
    n_fft = window.shape[0]
    padded = waves[..., _reflect_index(waves.shape[-1], n_fft // 2).to(waves.device)]
    frames = padded.unfold(-1, n_fft, hop_length) * window
    spec = torch.fft.rfft(frames, n=n_fft)
    power = spec.real.square() + spec.imag.square()
    return power.transpose(-1, -2)


class SpectralFrontEnd(nn.Module):
    """Fixed (non-learned) log-Mel or log-spectrogram extractor working on batches.

    Input ``(batch, L)`` waves, output ``(batch, 1, rows, frames)`` where
    rows is ``mel_bins`` for ``mel=True`` and ``fft_bins`` otherwise.
    """

    def __init__(self, cfg: SpectralConfig, mel: bool = True):
        super().__init__()
        self.cfg = cfg
        self.hop_length = cfg.hop_length
        self.log_floor = cfg.log_floor
        self.register_buffer("window", _WINDOWS[cfg.window](cfg.window_size, torch.float32))
        if mel:
            self.register_buffer("mel_bank", torch.from_numpy(build_mel_bank(cfg)).float())
        else:
            self.mel_bank = None

    @property
    def kind(self) -> str:
        return "Sgram" if self.mel_bank is not None else "Spec"

    def forward(self, waves: torch.Tensor) -> torch.Tensor:
        power = stft_power(waves, self.window, self.hop_length)
        if self.mel_bank is not None:
            power = torch.matmul(self.mel_bank, power)
        return torch.log(torch.clamp(power, min=self.log_floor)).unsqueeze(-3)


def _clip_tensor(clip: AudioClip) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(clip.samples))


def power_spectrogram(clip: AudioClip, cfg: SpectralConfig) -> torch.Tensor:
    x = _clip_tensor(clip)
    window = _WINDOWS[cfg.window](cfg.window_size, x.dtype)
    return stft_power(x, window, cfg.hop_length)


def _log_features(clip: AudioClip, cfg: SpectralConfig, bank: np.ndarray | None) -> torch.Tensor:
    power = power_spectrogram(clip, cfg)
    if bank is not None:
        power = torch.from_numpy(bank).to(power.dtype) @ power
    return torch.log(torch.clamp(power, min=cfg.log_floor)).unsqueeze(0)


def log_mel(clip: AudioClip, cfg: SpectralConfig) -> FeatureTensor:
    return FeatureTensor(_log_features(clip, cfg, build_mel_bank(cfg)), "Sgram")


def log_spec(clip: AudioClip, cfg: SpectralConfig) -> FeatureTensor:
    return FeatureTensor(_log_features(clip, cfg, None), "Spec")


def fuse_stgram(f_s: FeatureTensor, f_t: FeatureTensor) -> FeatureTensor:
    """Stack the log-Mel (channel 0) and Tgram (channel 1) into one 2-channel map."""
    if f_s.shape != f_t.shape or f_s.shape[0] != 1:
        raise ValueError(f"cannot fuse Sgram of shape {f_s.shape} with Tgram of shape {f_t.shape}")
    return FeatureTensor(torch.cat([f_s.data, f_t.data], dim=0), "STgram")


def split_stgram(f_st: FeatureTensor) -> tuple[FeatureTensor, FeatureTensor]:
    return FeatureTensor(f_st.data[:1].clone(), "Sgram"), FeatureTensor(f_st.data[1:].clone(), "Tgram")


class FeatureCache:
    """One ``.npz`` file per (clip, kind); entries with a different config digest are ignored."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _file(self, source_path: str, kind: str) -> Path:
        key = hashlib.sha1(os.path.abspath(source_path).encode()).hexdigest()
        return self.directory / f"{key}_{kind}.npz"

    def get(self, source_path: str, kind: str, cfg: SpectralConfig) -> FeatureTensor | None:
        f = self._file(source_path, kind)
        if not f.exists():
            return None
        with np.load(f) as z:
            if str(z["config"]) != cfg.digest() or tuple(z["shape"]) != z["data"].shape:
                return None
            return FeatureTensor(torch.from_numpy(z["data"]), kind)

    def put(self, source_path: str, feature: FeatureTensor, cfg: SpectralConfig) -> Path:
        f = self._file(source_path, feature.kind)
        tmp = f.with_suffix(".tmp.npz")
        data = feature.data.detach().cpu().numpy()
        np.savez(tmp, data=data, shape=np.array(data.shape), config=np.array(cfg.digest()), kind=np.array(feature.kind))
        os.replace(tmp, f)
        return f

    def get_or_compute(self, clip: AudioClip, kind: str, cfg: SpectralConfig) -> FeatureTensor:
        hit = self.get(clip.source_path, kind, cfg)
        if hit is not None:
            return hit
        if kind == "Sgram":
            feat = log_mel(clip, cfg)
        elif kind == "Spec":
            feat = log_spec(clip, cfg)
        else:
            raise ValueError(f"only fixed spectral features can be cached, not {kind!r}")
        self.put(clip.source_path, feat, cfg)
        return feat
