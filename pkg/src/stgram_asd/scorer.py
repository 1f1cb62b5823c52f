"""Anomaly scoring: negative log probability of a clip's own machine-ID class."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .dataio import AudioClip, ClipLabel, DatasetManifest, load_clip
from .trainer import ModelBundle

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-30
SCORE_COLUMNS = ("path", "machine_type", "machine_id", "condition", "score")


@dataclass(frozen=True)
class ScoreRecord:
    path: str
    machine_type: str
    machine_id: str
    condition: str
    score: float


class ScoreList(list):
    """List of ScoreRecord with the clips that could not be scored attached."""

    def __init__(self, records=(), rejects=()):
        super().__init__(records)
        self.rejects = list(rejects)

    @property
    def incomplete(self) -> bool:
        return bool(self.rejects)


def _class_index(bundle: ModelBundle, label: ClipLabel) -> int:
    try:
        return bundle.id_map[label.key]
    except KeyError:
        raise KeyError(f"machine {label.machine_type}/id_{label.machine_id} is unknown to this model") from None


def inference_copy(bundle: ModelBundle) -> torch.nn.Module:
    """Float64 eval-mode copy of the bundle's network.

    In float32 the conv kernels sum in a batch-shape dependent order, which
    moves ArcFace logits (magnitude ~30) by a few 1e-6 between batch sizes.
    """
    return copy.deepcopy(bundle.model).double().eval()


@torch.no_grad()
def score_waves(bundle: ModelBundle, waves: torch.Tensor, class_indices, model=None) -> np.ndarray:
    """Scores for a (batch, L) wave tensor; ArcFace heads are evaluated without margin.

    ``model`` is an :func:`inference_copy` to reuse across batches.
    """
    model = inference_copy(bundle) if model is None else model
    return neg_log_prob(model(waves.double()), class_indices)


def neg_log_prob(logits: torch.Tensor, class_indices) -> np.ndarray:
    """``-ln softmax(logits)[class]`` with the probability floored at PROB_FLOOR.

    A plain log_softmax rounds confident predictions to exactly 0 (ArcFace
    logits reach s=30), which would tie every score. Working on logit
    differences with log1p keeps small scores at full relative precision.
    """
    d = logits.double()
    target = torch.as_tensor(class_indices, dtype=torch.long).reshape(-1, 1)
    d = d - d.gather(1, target)
    top = d.max(dim=1, keepdim=True)
    rest = torch.exp(d - top.values).scatter(1, top.indices, 0.0).sum(dim=1)
    score = top.values[:, 0] + torch.log1p(rest)
    return torch.clamp(score, max=-math.log(PROB_FLOOR)).numpy()


def anomaly_score(bundle: ModelBundle, clip: AudioClip, label: ClipLabel) -> float:
    idx = _class_index(bundle, label)
    return float(score_waves(bundle, torch.from_numpy(clip.samples)[None], [idx])[0])


def score_split(bundle: ModelBundle, manifest: DatasetManifest, batch_size: int = 32) -> ScoreList:
    """Score every clip of a test manifest, in manifest order.

    Clips that fail to load or belong to an unknown machine are reported in
    ``rejects`` and the result is flagged ``incomplete``.
    """
    if manifest.split != "test":
        raise ValueError(f"score_split needs a test manifest, got split={manifest.split!r}")
    tc = bundle.train_config
    records, rejects = [], []
    pending: list[tuple] = []
    model = inference_copy(bundle)

    def flush():
        if not pending:
            return
        batch = torch.from_numpy(np.stack([c.samples for _, c, _ in pending]))
        scores = score_waves(bundle, batch, [i for _, _, i in pending], model)
        for (e, _, _), s in zip(pending, scores):
            records.append(ScoreRecord(e.path, e.label.machine_type, e.label.machine_id, e.label.condition, float(s)))
        pending.clear()

    for entry in manifest:
        try:
            idx = _class_index(bundle, entry.label)
            clip = load_clip(
                entry.path,
                bundle.spectral.sample_rate,
                bundle.model_config.clip_length,
                tc.pad_mode,
                tc.resample,
            )
        except Exception as exc:  # noqa: BLE001 - every per-clip failure goes to the rejects report
            logger.warning("cannot score %s: %s", entry.path, exc)
            rejects.append((entry.path, str(exc)))
            continue
        pending.append((entry, clip, idx))
        if len(pending) >= batch_size:
            flush()
    flush()
    return ScoreList(records, rejects)


def write_scores(records, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_COLUMNS)
        for r in records:
            w.writerow([r.path, r.machine_type, r.machine_id, r.condition, repr(r.score)])


def read_scores(path: str | os.PathLike) -> list[ScoreRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: score file lacks columns {sorted(missing)}")
        return [
            ScoreRecord(r["path"], r["machine_type"], r["machine_id"], r["condition"], float(r["score"]))
            for r in reader
        ]
