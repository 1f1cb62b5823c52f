"""Anomalous machine-sound detection with fused spectral-temporal (STgram) features."""

from .dataio import AudioClip, ClipLabel, DatasetManifest, load_clip, scan_dataset
from .features import FeatureTensor, SpectralConfig, fuse_stgram, log_mel, log_spec, power_spectrogram
from .metrics import auc, build_report, mauc, pauc
from .model import ASDModel, ModelConfig, build_model
from .scorer import anomaly_score, score_split
from .tgramnet import TgramNet, tgramnet_forward, tgramnet_init
from .trainer import ModelBundle, TrainConfig, load_bundle, lr_at, save_bundle, train

__version__ = "0.1.0"

__all__ = [
    "ASDModel",
    "AudioClip",
    "ClipLabel",
    "DatasetManifest",
    "FeatureTensor",
    "ModelBundle",
    "ModelConfig",
    "SpectralConfig",
    "TgramNet",
    "TrainConfig",
    "anomaly_score",
    "auc",
    "build_model",
    "build_report",
    "fuse_stgram",
    "load_bundle",
    "load_clip",
    "log_mel",
    "log_spec",
    "lr_at",
    "mauc",
    "pauc",
    "power_spectrogram",
    "save_bundle",
    "scan_dataset",
    "score_split",
    "tgramnet_forward",
    "tgramnet_init",
    "train",
]
