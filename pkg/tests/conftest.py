import logging

import numpy as np
import pytest
import torch

from stgram_asd.dataio import AudioClip, scan_dataset
from stgram_asd.experiments.synthetic import generate_synthetic_dataset
from stgram_asd.features import SpectralConfig
from stgram_asd.model import ModelConfig
from stgram_asd.trainer import TrainConfig, train

torch.set_num_threads(1)

DESK_CLIP = 16_000
DESK_SPECTRAL = SpectralConfig(mel_bins=64)
DESK_MODEL = ModelConfig(clip_length=DESK_CLIP, mfn="small")


def desk_train_config(**kw) -> TrainConfig:
    """Reduced schedule for the synthetic corpus (200 clips): 30 epochs, batch 32, lr 1e-3."""
    base = dict(epochs=30, batch_size=32, base_lr=1e-3, seed=0, feature_kind="STgram", head_kind="ArcFace")
    base.update(kw)
    return TrainConfig(**base)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def sine_clip(freq=1000.0, sr=16_000, length=16_000, amp=0.5, dtype=np.float64) -> AudioClip:
    t = np.arange(length) / sr
    return AudioClip((amp * np.sin(2 * np.pi * freq * t)).astype(dtype), sr)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return generate_synthetic_dataset(tmp_path_factory.mktemp("synthetic"), clip_length=DESK_CLIP)


@pytest.fixture(scope="session")
def synthetic_manifests(synthetic_root):
    tr = scan_dataset(synthetic_root, "train")
    return tr, scan_dataset(synthetic_root, "test", id_map=tr.id_map)


@pytest.fixture(scope="session")
def trained_bundle(synthetic_manifests, tmp_path_factory):
    """STgram + ArcFace model trained on the synthetic corpus (shared by several modules)."""
    out = tmp_path_factory.mktemp("trained")
    return train(synthetic_manifests[0], desk_train_config(), DESK_SPECTRAL, DESK_MODEL, out_dir=out)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Small corpus for plumbing tests: 2 types x 2 IDs, 6 train / 3+3 test clips per ID, 0.5 s."""
    return generate_synthetic_dataset(
        tmp_path_factory.mktemp("tiny"), n_train=6, n_test_normal=3, n_test_anomaly=3, clip_length=8_000, seed=1
    )


TINY_MODEL = ModelConfig(clip_length=8_000, mfn="small")
TINY_SPECTRAL = SpectralConfig(mel_bins=32)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
