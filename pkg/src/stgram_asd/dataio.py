"""
Dataset discovery and WAV loading for DCASE 2020 Task 2 style trees.

Expected layout (one or more roots)::

    <root>/
        fan/
            train/normal_id_00_00000000.wav
            test/normal_id_00_00000000.wav
            test/anomaly_id_00_00000000.wav
        pump/
            ...

The condition is the filename prefix before the first underscore and the
machine ID is the token following ``id_``. Every distinct
(machine_type, machine_id) pair gets a dense class index, assigned in
lexicographic order so runs are reproducible.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

CONDITIONS = ("normal", "anomaly", "unknown")
SPLITS = ("train", "test")
MANIFEST_COLUMNS = ("path", "machine_type", "machine_id", "condition", "class_index")

DEFAULT_SAMPLE_RATE = 16_000
DEFAULT_CLIP_LENGTH = 160_000

_ID_RE = re.compile(r"(?:^|_)id_([0-9A-Za-z]+)(?:_|$)")


class ConfigurationError(ValueError):
    """Raised for bad paths or inconsistent settings."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("AudioClip must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"non-finite samples in {self.source_path or 'clip'}")

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class ClipLabel:
    machine_type: str
    machine_id: str
    condition: str
    class_index: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.machine_type, self.machine_id)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: ClipLabel


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    split: str
    id_map: Mapping[tuple[str, str], int]
    # (path, reason) pairs for files that could not be labeled
    rejects: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "rejects", tuple(self.rejects))
        object.__setattr__(self, "id_map", MappingProxyType(dict(self.id_map)))
        if sorted(self.id_map.values()) != list(range(len(self.id_map))):
            raise ValueError("id_map must be a bijection onto 0..class_count-1")

    @property
    def class_count(self) -> int:
        return len(self.id_map)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_rows(self) -> list[dict]:
        return [
            {
                "path": e.path,
                "machine_type": e.label.machine_type,
                "machine_id": e.label.machine_id,
                "condition": e.label.condition,
                "class_index": e.label.class_index,
            }
            for e in self.entries
        ]

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            writer.writerows(self.to_rows())

    def to_json(self, path: str | os.PathLike) -> None:
        payload = {
            "split": self.split,
            "id_map": [[t, i, c] for (t, i), c in sorted(self.id_map.items(), key=lambda kv: kv[1])],
            "entries": self.to_rows(),
            "rejects": [list(r) for r in self.rejects],
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text())
        id_map = {(t, i): int(c) for t, i, c in payload["id_map"]}
        return cls(
            entries=tuple(_entry_from_row(r) for r in payload["entries"]),
            split=payload["split"],
            id_map=id_map,
            rejects=tuple(tuple(r) for r in payload.get("rejects", ())),
        )

    @classmethod
    def from_csv(cls, path: str | os.PathLike, split: str) -> "DatasetManifest":
        """Rebuild a manifest from its CSV form. The id_map is recovered from the rows."""
        with open(path, newline="") as f:
            entries = tuple(_entry_from_row(r) for r in csv.DictReader(f))
        id_map = {e.label.key: e.label.class_index for e in entries}
        return cls(entries=entries, split=split, id_map=id_map)


def _entry_from_row(row: Mapping) -> ManifestEntry:
    return ManifestEntry(
        path=row["path"],
        label=ClipLabel(
            machine_type=row["machine_type"],
            machine_id=row["machine_id"],
            condition=row["condition"],
            class_index=int(row["class_index"]),
        ),
    )


def parse_filename(name: str) -> tuple[str, str]:
    """Return ``(condition, machine_id)`` parsed from a DCASE clip filename.

    ``normal_id_01_00000042.wav`` gives ``("normal", "01")``. Evaluation-set
    files without a condition prefix (``id_01_00000042.wav``) give
    ``"unknown"``. Raises ValueError when the name does not follow the grammar.
    """
    stem = Path(name).stem
    match = _ID_RE.search(stem)
    if match is None:
        raise ValueError(f"no 'id_<ID>' token in {name!r}")
    prefix = stem.split("_", 1)[0]
    if prefix == "id":
        return "unknown", match.group(1)
    if prefix not in ("normal", "anomaly"):
        raise ValueError(f"unrecognised condition token {prefix!r} in {name!r}")
    return prefix, match.group(1)


def _iter_wavs(roots: Sequence[Path], split: str) -> Iterable[tuple[str, Path]]:
    for root in roots:
        for type_dir in root.iterdir():
            split_dir = type_dir / split
            if not type_dir.is_dir() or not split_dir.is_dir():
                continue
            for p in split_dir.iterdir():
                if p.is_file() and p.suffix.lower() == ".wav":
                    yield type_dir.name, p


def _as_roots(root) -> list[Path]:
    roots = [root] if isinstance(root, (str, os.PathLike)) else list(root)
    out = []
    for r in roots:
        r = Path(r)
        if not r.is_dir():
            raise ConfigurationError(f"dataset root does not exist: {r}")
        out.append(r)
    if not out:
        raise ConfigurationError("no dataset root given")
    return out


def _collect(roots, split):
    labeled, rejects = [], []
    for machine_type, p in _iter_wavs(roots, split):
        try:
            condition, machine_id = parse_filename(p.name)
        except ValueError as exc:
            rejects.append((str(p), str(exc)))
            continue
        if split == "train" and condition != "normal":
            rejects.append((str(p), f"training clip has condition {condition!r}"))
            continue
        labeled.append((machine_type, machine_id, condition, str(p)))
    return labeled, rejects


def build_id_map(keys: Iterable[tuple[str, str]]) -> dict[tuple[str, str], int]:
    return {key: idx for idx, key in enumerate(sorted(set(keys)))}


def scan_dataset(
    root: str | os.PathLike | Sequence[str | os.PathLike],
    split: str,
    id_map: Mapping[tuple[str, str], int] | None = None,
) -> DatasetManifest:
    """Scan one or more dataset roots and label every WAV in ``split``.

    For the test split the class indices must agree with training, so when
    ``id_map`` is not given it is derived from the ``train`` folders under
    the same roots (falling back to the test files themselves if there are
    none). Test clips whose machine is absent from the id_map are reported
    in ``rejects`` and never given an index.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"split must be one of {SPLITS}, got {split!r}")
    roots = _as_roots(root)
    labeled, rejects = _collect(roots, split)

    if id_map is None:
        if split == "test":
            train_labeled, _ = _collect(roots, "train")
            source = train_labeled or labeled
        else:
            source = labeled
        id_map = build_id_map((t, i) for t, i, _, _ in source)

    entries = []
    for machine_type, machine_id, condition, path in labeled:
        key = (machine_type, machine_id)
        if key not in id_map:
            rejects.append((path, f"machine {machine_type}/id_{machine_id} not in id_map"))
            continue
        entries.append(ManifestEntry(path, ClipLabel(machine_type, machine_id, condition, id_map[key])))

    entries.sort(key=lambda e: (e.label.machine_type, e.label.machine_id, e.label.condition, Path(e.path).name, e.path))
    rejects.sort()
    for path, reason in rejects:
        logger.warning("rejected %s: %s", path, reason)
    return DatasetManifest(entries=tuple(entries), split=split, id_map=id_map, rejects=tuple(rejects))


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    # bit-depth divisor only; no per-clip gain normalisation
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    raise ValueError(f"unsupported WAV sample format {data.dtype}")


def fit_length(samples: np.ndarray, target_length: int, pad_mode: str = "zero") -> np.ndarray:
    """Truncate to the first ``target_length`` samples or pad at the end."""
    n = samples.shape[0]
    if n >= target_length:
        return samples[:target_length]
    if pad_mode == "zero":
        return np.concatenate([samples, np.zeros(target_length - n, dtype=samples.dtype)])
    if pad_mode == "wrap":
        return np.resize(samples, target_length)
    raise ValueError(f"unknown pad_mode {pad_mode!r} (expected 'zero' or 'wrap')")


def load_clip(
    path: str | os.PathLike,
    target_sample_rate: int = DEFAULT_SAMPLE_RATE,
    target_length: int = DEFAULT_CLIP_LENGTH,
    pad_mode: str = "zero",
    resample: bool = False,
) -> AudioClip:
    if target_length <= 0:
        raise ValueError("target_length must be positive")
    sr, data = wavfile.read(path)
    samples = _pcm_to_float(data)
    if samples.ndim == 2:
        logger.warning("%s has %d channels; averaging to mono", path, samples.shape[1])
        samples = samples.mean(axis=1).astype(np.float32)
    if sr != target_sample_rate:
        if not resample:
            raise ConfigurationError(
                f"{path}: sample rate {sr} Hz does not match target {target_sample_rate} Hz "
                "(pass resample=True to convert)"
            )
        g = np.gcd(sr, target_sample_rate)
        samples = resample_poly(samples, target_sample_rate // g, sr // g).astype(np.float32)
    samples = fit_length(samples, target_length, pad_mode)
    return AudioClip(samples=samples, sample_rate=target_sample_rate, source_path=str(path))


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)
