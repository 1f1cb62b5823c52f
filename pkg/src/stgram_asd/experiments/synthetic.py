"""Synthetic machine-sound corpus in the DCASE 2020 Task 2 layout, for desk-scale runs and CI.

Every virtual machine has its own harmonic tone (fundamental, harmonic
weights, amplitude-modulation rate) plus a band of filtered noise. Normal
clips jitter these slightly; anomalous clips shift the fundamental and
re-weight the harmonics, and some add impulsive rattle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from ..dataio import write_wav


@dataclass(frozen=True)
class VirtualMachine:
    machine_type: str
    machine_id: str
    f0: float
    harmonics: tuple[float, ...]
    am_rate: float
    noise_band: tuple[float, float]


def make_machines(n_types: int = 2, ids_per_type: int = 2, seed: int = 0) -> list[VirtualMachine]:
    rng = np.random.default_rng(seed)
    machines = []
    # fundamentals spread on a log grid so that neighbouring IDs stay well apart
    f0s = 300.0 * 1.45 ** np.arange(n_types * ids_per_type)
    # noise band and modulation are shared by a type, so only the tone tells IDs apart
    type_am = rng.uniform(2.0, 8.0, size=n_types)
    type_lo = rng.uniform(1500, 5000, size=n_types)
    for k, f0 in enumerate(f0s):
        t, i = divmod(k, ids_per_type)
        weights = rng.uniform(0.2, 1.0, size=6) * 0.8 ** np.arange(6)
        machines.append(
            VirtualMachine(
                machine_type=f"synth{t}",
                machine_id=f"{2 * i:02d}",
                f0=float(f0),
                harmonics=tuple(float(w) for w in weights / weights.sum()),
                am_rate=float(type_am[t]),
                noise_band=(float(type_lo[t]), float(type_lo[t] * 1.5)),
            )
        )
    return machines


def render_clip(m: VirtualMachine, length: int, sample_rate: int, rng: np.random.Generator, anomaly: bool = False) -> np.ndarray:
    t = np.arange(length) / sample_rate
    f0 = m.f0 * (1 + rng.normal(0, 0.004))
    weights = np.array(m.harmonics) * rng.uniform(0.9, 1.1, size=len(m.harmonics))
    if anomaly:
        f0 *= 1 + rng.choice([-1, 1]) * rng.uniform(0.08, 0.15)
        weights = weights * rng.uniform(0.2, 2.0, size=len(weights))
    tone = sum(w * np.sin(2 * np.pi * (k + 1) * f0 * t + rng.uniform(0, 2 * np.pi)) for k, w in enumerate(weights))
    tone *= 1 + 0.3 * np.sin(2 * np.pi * m.am_rate * t + rng.uniform(0, 2 * np.pi))

    sos = butter(4, m.noise_band, btype="bandpass", fs=sample_rate, output="sos")
    noise = sosfilt(sos, rng.normal(size=length))
    noise *= 0.3 / (noise.std() + 1e-12)
    x = tone / (np.abs(tone).max() + 1e-12) + noise

    if anomaly and rng.random() < 0.5:
        clicks = np.zeros(length)
        clicks[rng.integers(0, length, size=max(1, length // 2000))] = rng.uniform(1.0, 2.0)
        x += np.convolve(clicks, np.exp(-np.arange(64) / 8.0), mode="same")
    return (0.5 * x / np.abs(x).max()).astype(np.float32)


def generate_synthetic_dataset(
    root: str | os.PathLike,
    n_types: int = 2,
    ids_per_type: int = 2,
    n_train: int = 50,
    n_test_normal: int = 20,
    n_test_anomaly: int = 20,
    clip_length: int = 16_000,
    sample_rate: int = 16_000,
    seed: int = 0,
) -> Path:
    """Write ``<root>/<type>/{train,test}/<condition>_id_<ID>_<n>.wav`` and return ``root``."""
    root = Path(root)
    machines = make_machines(n_types, ids_per_type, seed)
    for k, m in enumerate(machines):
        rng = np.random.default_rng([seed, k])
        plan = [("train", "normal", n_train), ("test", "normal", n_test_normal), ("test", "anomaly", n_test_anomaly)]
        for split, condition, count in plan:
            d = root / m.machine_type / split
            d.mkdir(parents=True, exist_ok=True)
            for n in range(count):
                x = render_clip(m, clip_length, sample_rate, rng, anomaly=condition == "anomaly")
                write_wav(d / f"{condition}_id_{m.machine_id}_{n:08d}.wav", x, sample_rate)
    return root
