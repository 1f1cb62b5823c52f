"""MobileFaceNet backbone and the two classification heads (plain softmax / ArcFace)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .features import FeatureTensor

HEAD_KINDS = ("CEE", "ArcFace")

# (expansion t, output channels c, repeats n, first stride s)
MOBILEFACENET_BOTTLENECKS = (
    (2, 64, 5, 2),
    (4, 128, 1, 2),
    (2, 128, 6, 1),
    (4, 128, 1, 2),
    (2, 128, 2, 1),
)


@dataclass(frozen=True)
class MFNConfig:
    stem_channels: int = 64
    bottlenecks: tuple[tuple[int, int, int, int], ...] = MOBILEFACENET_BOTTLENECKS
    conv_channels: int = 512
    embedding_dim: int = 128

    @classmethod
    def from_dict(cls, d: dict) -> "MFNConfig":
        d = dict(d)
        if "bottlenecks" in d:
            d["bottlenecks"] = tuple(tuple(int(v) for v in b) for b in d["bottlenecks"])
        return cls(**d)


MFN_PRESETS = {
    "mobilefacenet": MFNConfig(),
    # desk-scale variant used for CI and synthetic data
    "small": MFNConfig(
        stem_channels=16,
        bottlenecks=((2, 16, 1, 2), (2, 32, 1, 2), (2, 32, 1, 1), (2, 64, 1, 2)),
        conv_channels=128,
        embedding_dim=64,
    ),
}


def resolve_mfn(spec: str | dict | MFNConfig) -> MFNConfig:
    if isinstance(spec, MFNConfig):
        return spec
    if isinstance(spec, str):
        try:
            return MFN_PRESETS[spec]
        except KeyError:
            raise ValueError(f"unknown MFN preset {spec!r}; known: {sorted(MFN_PRESETS)}") from None
    return MFNConfig.from_dict(spec)


class ConvBlock(nn.Module):
    def __init__(self, in_c, out_c, kernel=1, stride=1, padding=0, groups=1, linear=False):
        super().__init__()
        self.conv = nn.Conv2d(in_c, out_c, kernel, stride, padding, groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(out_c)
        self.prelu = None if linear else nn.PReLU(out_c)

    def forward(self, x):
        x = self.bn(self.conv(x))
        return x if self.prelu is None else self.prelu(x)


class Bottleneck(nn.Module):
    def __init__(self, in_c, out_c, stride, expansion):
        super().__init__()
        hidden = in_c * expansion
        self.residual = stride == 1 and in_c == out_c
        self.body = nn.Sequential(
            ConvBlock(in_c, hidden, 1),
            ConvBlock(hidden, hidden, 3, stride, 1, groups=hidden),
            ConvBlock(hidden, out_c, 1, linear=True),
        )

    def forward(self, x):
        return x + self.body(x) if self.residual else self.body(x)


def _after_conv3(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


class MobileFaceNet(nn.Module):
    """MobileFaceNet adapted to (channels, rows, frames) audio feature maps.

    The first conv takes ``input_channels`` (1 or 2) and the global depthwise
    conv is sized to whatever spatial map the strides leave behind, so the
    same backbone serves 128x313 log-Mel maps and 513x313 spectrograms.
    """

    def __init__(self, input_channels: int, input_rows: int, input_frames: int, cfg: MFNConfig = MFNConfig()):
        super().__init__()
        if input_channels not in (1, 2):
            raise ValueError(f"input_channels must be 1 or 2, got {input_channels}")
        self.input_shape = (input_channels, input_rows, input_frames)
        self.embedding_dim = cfg.embedding_dim

        h, w = _after_conv3(input_rows, 2), _after_conv3(input_frames, 2)
        layers = [
            ConvBlock(input_channels, cfg.stem_channels, 3, 2, 1),
            ConvBlock(cfg.stem_channels, cfg.stem_channels, 3, 1, 1, groups=cfg.stem_channels),
        ]
        c = cfg.stem_channels
        for t, out_c, n, s in cfg.bottlenecks:
            for i in range(n):
                stride = s if i == 0 else 1
                layers.append(Bottleneck(c, out_c, stride, t))
                h, w = _after_conv3(h, stride), _after_conv3(w, stride)
                c = out_c
        layers.append(ConvBlock(c, cfg.conv_channels, 1))
        self.features = nn.Sequential(*layers)
        self.final_map = (h, w)
        self.gdconv = ConvBlock(cfg.conv_channels, cfg.conv_channels, (h, w), groups=cfg.conv_channels, linear=True)
        self.embed = ConvBlock(cfg.conv_channels, cfg.embedding_dim, 1, linear=True)

    def check_input(self, x: torch.Tensor):
        if tuple(x.shape[-3:]) != self.input_shape:
            raise ValueError(f"MFN expects input of shape {self.input_shape}, got {tuple(x.shape[-3:])}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        x = self.embed(self.gdconv(self.features(x)))
        return x.flatten(1)


class CEEHead(nn.Module):
    kind = "CEE"

    def __init__(self, embedding_dim: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, n_classes)
        self.n_classes = n_classes

    def forward(self, embedding: torch.Tensor, target: torch.Tensor | None = None) -> torch.Tensor:
        # the target is irrelevant for plain softmax; accepted so heads are interchangeable
        return self.fc(embedding)


class ArcFaceHead(nn.Module):
    """Additive angular margin head.

    With a target, the true-class logit is ``s*cos(theta_y + m)`` (falling back
    to ``s*(cos theta_y - m*sin m)`` when ``theta_y + m > pi``); every other
    logit, and all logits when no target is given, is ``s*cos theta_j``.
    """

    kind = "ArcFace"
    eps = 1e-7

    def __init__(self, embedding_dim: int, n_classes: int, margin: float = 0.7, scale: float = 30.0):
        super().__init__()
        if margin < 0 or scale <= 0:
            raise ValueError(f"need margin >= 0 and scale > 0, got m={margin}, s={scale}")
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)
        self.margin = margin
        self.scale = scale
        self.n_classes = n_classes

    def cosine(self, embedding: torch.Tensor) -> torch.Tensor:
        if (embedding.norm(dim=-1) == 0).any():
            raise ValueError("ArcFace cannot normalise a zero-norm embedding")
        cos = F.linear(F.normalize(embedding, dim=-1), F.normalize(self.weight, dim=-1))
        return cos.clamp(-1 + self.eps, 1 - self.eps)

    def forward(self, embedding: torch.Tensor, target: torch.Tensor | None = None) -> torch.Tensor:
        cos = self.cosine(embedding)
        if target is None:
            return self.scale * cos
        target = torch.as_tensor(target, device=cos.device).reshape(-1, 1)
        cos_y = cos.gather(1, target)
        theta = torch.acos(cos_y)
        phi = torch.where(
            theta + self.margin <= math.pi,
            torch.cos(theta + self.margin),
            cos_y - self.margin * math.sin(self.margin),
        )
        logits = cos.scatter(1, target, phi)
        return self.scale * logits


def make_head(kind: str, embedding_dim: int, n_classes: int, margin: float = 0.7, scale: float = 30.0) -> nn.Module:
    if kind == "CEE":
        return CEEHead(embedding_dim, n_classes)
    if kind == "ArcFace":
        return ArcFaceHead(embedding_dim, n_classes, margin, scale)
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def mfn_forward(params: MobileFaceNet, feature: FeatureTensor) -> torch.Tensor:
    data = feature.data.to(next(params.parameters()).dtype)
    params.check_input(data)
    return params(data.unsqueeze(0))[0]


def _batched(embedding):
    embedding = torch.as_tensor(embedding)
    return embedding.unsqueeze(0) if embedding.ndim == 1 else embedding, embedding.ndim == 1


def cee_logits(embedding, head: CEEHead) -> torch.Tensor:
    if not isinstance(head, CEEHead):
        raise TypeError("cee_logits needs a CEE head")
    e, single = _batched(embedding)
    out = head(e)
    return out[0] if single else out


def arcface_logits(embedding, head: ArcFaceHead, true_class=None) -> torch.Tensor:
    if not isinstance(head, ArcFaceHead):
        raise TypeError("arcface_logits needs an ArcFace head")
    e, single = _batched(embedding)
    out = head(e, None if true_class is None else torch.as_tensor(true_class).reshape(-1))
    return out[0] if single else out


def classification_loss(logits: torch.Tensor, true_class) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[true_class]`` over the batch."""
    logits, _ = _batched(logits)
    target = torch.as_tensor(true_class, device=logits.device).reshape(-1).long()
    n_classes = logits.shape[-1]
    if target.shape[0] != logits.shape[0]:
        raise ValueError(f"{target.shape[0]} targets for {logits.shape[0]} logit rows")
    if ((target < 0) | (target >= n_classes)).any():
        raise IndexError(f"class index out of range for {n_classes} classes: {target.tolist()}")
    return F.cross_entropy(logits, target)
