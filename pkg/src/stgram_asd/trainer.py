"""Joint training of front-end, MobileFaceNet and head on machine-ID labels, plus bundle I/O."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .classifier import HEAD_KINDS
from .dataio import DatasetManifest, load_clip
from .features import FeatureCache, SpectralConfig
from .model import MODEL_FEATURE_KINDS, ASDModel, ModelConfig, build_model

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"STGRAMB\x00"
BUNDLE_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
LOG_COLUMNS = ("epoch", "mean_loss", "train_accuracy", "lr", "wall_time")


class BundleFormatError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 1e-4
    eta_min: float = 0.0
    seed: int = 0
    head_kind: str = "ArcFace"
    feature_kind: str = "STgram"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    checkpoint_every: int = 0  # epochs between intermediate checkpoints; 0 = final only
    pad_mode: str = "zero"
    resample: bool = False
    num_workers: int = 0
    preload: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or not self.base_lr > 0:
            raise ValueError("need epochs >= 1 and base_lr > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples per batch)")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.feature_kind not in MODEL_FEATURE_KINDS:
            raise ValueError(f"feature_kind must be one of {MODEL_FEATURE_KINDS}, got {self.feature_kind!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate for a 0-based epoch; reaches eta_min at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.base_lr
    return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


@dataclass
class ModelBundle:
    model: ASDModel
    spectral: SpectralConfig
    train_config: TrainConfig
    model_config: ModelConfig
    id_map: dict[tuple[str, str], int]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.id_map = dict(self.id_map)
        if len(self.id_map) != self.model.head.n_classes:
            raise ValueError(f"id_map has {len(self.id_map)} classes but head has {self.model.head.n_classes}")

    @property
    def n_classes(self) -> int:
        return len(self.id_map)

    @property
    def feature_kind(self) -> str:
        return self.model.feature_kind

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle of range(n) cut into batches; a trailing batch of one joins the previous one."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


class ClipDataset(Dataset):
    """Waves (and optionally cached spectral maps) for manifest entries, in manifest order."""

    def __init__(
        self,
        manifest: DatasetManifest,
        sample_rate: int,
        clip_length: int,
        pad_mode: str = "zero",
        resample: bool = False,
        preload: bool = False,
        cache: FeatureCache | None = None,
        cache_kind: str | None = None,
        spectral: SpectralConfig | None = None,
    ):
        self.entries = manifest.entries
        self.load_args = dict(target_sample_rate=sample_rate, target_length=clip_length, pad_mode=pad_mode, resample=resample)
        self.cache, self.cache_kind, self.spectral = cache, cache_kind, spectral
        self._waves = [self._load(i) for i in range(len(self.entries))] if preload else None

    def _load(self, i):
        return load_clip(self.entries[i].path, **self.load_args)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        clip = self._waves[i] if self._waves is not None else self._load(i)
        spec = None
        if self.cache is not None:
            spec = self.cache.get_or_compute(clip, self.cache_kind, self.spectral).data
        return torch.from_numpy(clip.samples), self.entries[i].label.class_index, spec


def collate(items):
    waves = torch.stack([w for w, _, _ in items])
    targets = torch.tensor([t for _, t, _ in items], dtype=torch.long)
    specs = None if items[0][2] is None else torch.stack([s for _, _, s in items])
    return waves, targets, specs


def make_dataset(manifest, spectral, model_cfg, cfg: TrainConfig, cache_dir=None, preload=None) -> ClipDataset:
    cache = cache_kind = None
    if cache_dir is not None and cfg.feature_kind != "Tgram":
        cache = FeatureCache(cache_dir)
        cache_kind = "Spec" if cfg.feature_kind == "Spec" else "Sgram"
    return ClipDataset(
        manifest,
        spectral.sample_rate,
        model_cfg.clip_length,
        cfg.pad_mode,
        cfg.resample,
        cfg.preload if preload is None else preload,
        cache,
        cache_kind,
        spectral,
    )


def _append_log(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in LOG_COLUMNS})


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    spectral: SpectralConfig = SpectralConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    out_dir: str | os.PathLike | None = None,
    cache_dir: str | os.PathLike | None = None,
) -> ModelBundle:
    """Train a detector on the normal clips of ``manifest``, labelled by machine ID.

    When ``out_dir`` is given, a CSV training log, intermediate checkpoints
    (every ``cfg.checkpoint_every`` epochs) and ``final.bundle`` are written
    there. A non-finite loss stops training after writing ``diagnostic.bundle``.
    """
    if manifest.split != "train":
        raise ValueError(f"train() needs a train manifest, got split={manifest.split!r}")
    if len(manifest) < 2:
        raise ValueError(f"need at least 2 training clips, got {len(manifest)}")
    bad = [e.path for e in manifest if e.label.condition != "normal"]
    if bad:
        raise ValueError(f"{len(bad)} non-normal training clips, e.g. {bad[0]}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.feature_kind, cfg.head_kind, manifest.class_count, spectral, model_cfg, seed=cfg.seed)
    bundle = ModelBundle(model, spectral, cfg, model_cfg, dict(manifest.id_map))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=cfg.betas, eps=cfg.adam_eps)

    dataset = make_dataset(manifest, spectral, model_cfg, cfg, cache_dir)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loader = DataLoader(
            dataset,
            batch_sampler=[b.tolist() for b in epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)],
            collate_fn=collate,
            num_workers=cfg.num_workers,
        )
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        for waves, targets, specs in loader:
            embedding = model.embed(waves, specs)
            logits = model.head(embedding, targets)
            loss = F.cross_entropy(logits, targets)
            if not torch.isfinite(loss):
                bundle.epoch = epoch
                if out is not None:
                    save_bundle(bundle, out / "diagnostic.bundle")
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            with torch.no_grad():
                predicted = model.head(embedding.detach()).argmax(dim=1)
            total_loss += loss.item() * len(targets)
            correct += int((predicted == targets).sum())
            seen += len(targets)

        bundle.epoch = epoch + 1
        row = {
            "epoch": epoch + 1,
            "mean_loss": total_loss / seen,
            "train_accuracy": correct / seen,
            "lr": lr,
            "wall_time": time.perf_counter() - start,
        }
        bundle.history.append(row)
        logger.info("epoch %d/%d loss %.4f acc %.3f lr %.2e", epoch + 1, cfg.epochs, row["mean_loss"], row["train_accuracy"], lr)
        if out is not None:
            _append_log(out / "train_log.csv", row)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                save_bundle(bundle, out / f"epoch_{epoch + 1:04d}.bundle")

    model.eval()
    if out is not None:
        save_bundle(bundle, out / "final.bundle")
    return bundle


# ---------------------------------------------------------------------------
# bundle container: magic | version | header length | JSON header | raw tensors


def _header(bundle: ModelBundle, tensors: dict[str, np.ndarray]) -> dict:
    table, offset = [], 0
    for name, arr in tensors.items():
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    return {
        "format_version": BUNDLE_VERSION,
        "feature_kind": bundle.model.feature_kind,
        "head_kind": bundle.model.head_kind,
        "spectral": asdict(bundle.spectral),
        "train": asdict(bundle.train_config),
        "model": bundle.model_config.to_dict(),
        "id_map": [[t, i, c] for (t, i), c in sorted(bundle.id_map.items(), key=lambda kv: kv[1])],
        "epoch": bundle.epoch,
        "history": bundle.history,
        "tensors": table,
        "payload_bytes": offset,
    }


def save_bundle(bundle: ModelBundle, path: str | os.PathLike) -> Path:
    path = Path(path)
    tensors = {k: v.detach().cpu().contiguous().numpy() for k, v in bundle.model.state_dict().items()}
    header = _header(bundle, tensors)
    payload = b"".join(a.tobytes() for a in tensors.values())
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(BUNDLE_MAGIC, BUNDLE_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)
    os.replace(tmp, path)
    return path


def read_bundle_header(path: str | os.PathLike) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise BundleFormatError(f"{path}: truncated preamble (expected {_PREAMBLE.size} bytes, got {len(raw)})")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != BUNDLE_MAGIC:
        raise BundleFormatError(f"{path}: not a model bundle (bad magic {magic!r})")
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"{path}: bundle format version {version}, this build reads {BUNDLE_VERSION}")
    body = raw[_PREAMBLE.size :]
    if len(body) < header_len:
        raise BundleFormatError(f"{path}: truncated header (expected {header_len} bytes, got {len(body)})")
    try:
        header = json.loads(body[:header_len])
    except ValueError as exc:
        raise BundleFormatError(f"{path}: corrupt header: {exc}") from None
    payload = body[header_len:]
    if len(payload) != header["payload_bytes"]:
        raise BundleFormatError(
            f"{path}: payload size mismatch (expected {header['payload_bytes']} bytes, got {len(payload)})"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise BundleFormatError(f"{path}: payload checksum mismatch")
    return header, payload


def _dataclass_from(cls, d: Mapping):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


def load_bundle(path: str | os.PathLike) -> ModelBundle:
    header, payload = read_bundle_header(path)
    spectral = _dataclass_from(SpectralConfig, header["spectral"])
    train_cfg = _dataclass_from(TrainConfig, header["train"])
    model_cfg = _dataclass_from(ModelConfig, header["model"])
    id_map = {(t, i): int(c) for t, i, c in header["id_map"]}
    model = ASDModel(header["feature_kind"], header["head_kind"], len(id_map), spectral, model_cfg)
    state = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state, strict=True)
    model.eval()
    return ModelBundle(model, spectral, train_cfg, model_cfg, id_map, header["epoch"], header["history"])
