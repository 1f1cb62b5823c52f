"""Full detector: feature front-end(s) -> MobileFaceNet -> head, for each ablation feature kind."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .classifier import MFNConfig, MobileFaceNet, make_head, resolve_mfn
from .features import SpectralConfig, SpectralFrontEnd
from .tgramnet import TgramNet

# input feature of the classifier; the Sgram is called LogMel at the model level
MODEL_FEATURE_KINDS = ("LogMel", "Tgram", "Spec", "STgram")


@dataclass
class ModelConfig:
    clip_length: int = 160_000
    mfn: str | dict = "mobilefacenet"
    arcface_margin: float = 0.7
    arcface_scale: float = 30.0
    leaky_slope: float = 0.01

    def mfn_config(self) -> MFNConfig:
        return resolve_mfn(self.mfn)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(self.mfn, str):
            d["mfn"] = asdict(self.mfn_config())
        return d


def input_shape(feature_kind: str, spectral: SpectralConfig, clip_length: int) -> tuple[int, int, int]:
    if feature_kind not in MODEL_FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {feature_kind!r}; expected one of {MODEL_FEATURE_KINDS}")
    rows = spectral.fft_bins if feature_kind == "Spec" else spectral.mel_bins
    channels = 2 if feature_kind == "STgram" else 1
    return channels, rows, spectral.n_frames(clip_length)


class ASDModel(nn.Module):
    def __init__(
        self,
        feature_kind: str,
        head_kind: str,
        n_classes: int,
        spectral: SpectralConfig = SpectralConfig(),
        config: ModelConfig = ModelConfig(),
    ):
        super().__init__()
        self.feature_kind = feature_kind
        self.head_kind = head_kind
        shape = input_shape(feature_kind, spectral, config.clip_length)

        self.spectral = None
        if feature_kind in ("LogMel", "STgram", "Spec"):
            self.spectral = SpectralFrontEnd(spectral, mel=feature_kind != "Spec")
        self.tgramnet = None
        if feature_kind in ("Tgram", "STgram"):
            self.tgramnet = TgramNet(spectral, negative_slope=config.leaky_slope, clip_length=config.clip_length)
        mfn_cfg = config.mfn_config()
        self.mfn = MobileFaceNet(*shape, mfn_cfg)
        self.head = make_head(head_kind, mfn_cfg.embedding_dim, n_classes, config.arcface_margin, config.arcface_scale)

    @property
    def input_channels(self) -> int:
        return self.mfn.input_shape[0]

    def features(self, waves: torch.Tensor, spectral: torch.Tensor | None = None) -> torch.Tensor:
        """Classifier input for a (batch, L) wave batch; ``spectral`` may carry precomputed Sgram/Spec maps."""
        parts = []
        if self.spectral is not None:
            parts.append(self.spectral(waves) if spectral is None else spectral.to(waves.dtype))
        if self.tgramnet is not None:
            parts.append(self.tgramnet(waves))
        return torch.cat(parts, dim=1)

    def embed(self, waves, spectral=None):
        return self.mfn(self.features(waves, spectral))

    def forward(self, waves, target=None, spectral=None):
        return self.head(self.embed(waves, spectral), target)


def build_model(
    feature_kind: str,
    head_kind: str,
    n_classes: int,
    spectral: SpectralConfig = SpectralConfig(),
    config: ModelConfig = ModelConfig(),
    seed: int = 0,
) -> ASDModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ASDModel(feature_kind, head_kind, n_classes, spectral, config)
