"""Latent-feature export and 2-D cluster plots (t-SNE / PCA projection is delegated to scikit-learn)."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
import torch

from ..dataio import DatasetManifest, load_clip
from ..scorer import inference_copy
from ..trainer import ModelBundle

LABEL_COLUMNS = ("machine_type", "machine_id", "condition")


@torch.no_grad()
def compute_embeddings(bundle: ModelBundle, manifest: DatasetManifest, batch_size: int = 32) -> np.ndarray:
    """MFN embeddings, one row per manifest entry, in manifest order."""
    model = inference_copy(bundle)
    tc = bundle.train_config
    out = []
    entries = list(manifest)
    for start in range(0, len(entries), batch_size):
        waves = np.stack(
            [
                load_clip(e.path, bundle.spectral.sample_rate, bundle.model_config.clip_length, tc.pad_mode, tc.resample).samples
                for e in entries[start : start + batch_size]
            ]
        )
        out.append(model.embed(torch.from_numpy(waves).double()).numpy())
    dim = model.mfn.embedding_dim
    return np.concatenate(out) if out else np.empty((0, dim))


def export_embeddings(
    bundle: ModelBundle,
    manifest: DatasetManifest,
    path: str | os.PathLike,
    feature_kind: str | None = None,
    batch_size: int = 32,
) -> Path:
    """Write a header-bearing CSV: ``e0 .. e{D-1}, machine_type, machine_id, condition``.

    ``feature_kind``, when given, must match the bundle's input feature.
    """
    if feature_kind is not None and feature_kind != bundle.feature_kind:
        raise ValueError(f"bundle was trained on {bundle.feature_kind}, not {feature_kind}")
    emb = compute_embeddings(bundle, manifest, batch_size)
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"e{i}" for i in range(emb.shape[1])] + list(LABEL_COLUMNS))
        for row, entry in zip(emb, manifest):
            lab = entry.label
            w.writerow([repr(float(v)) for v in row] + [lab.machine_type, lab.machine_id, lab.condition])
    return path


def read_embeddings(path: str | os.PathLike) -> tuple[np.ndarray, list[tuple[str, str, str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        n = len(header) - len(LABEL_COLUMNS)
        if tuple(header[n:]) != LABEL_COLUMNS:
            raise ValueError(f"{path}: last columns must be {LABEL_COLUMNS}")
        values, labels = [], []
        for row in reader:
            values.append([float(v) for v in row[:n]])
            labels.append(tuple(row[n:]))
    return np.array(values, dtype=np.float64).reshape(-1, n), labels


def project(values: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    if method == "pca":
        from sklearn.decomposition import PCA

        return PCA(n_components=2, random_state=seed).fit_transform(values)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(2.0, (len(values) - 1) / 3))
        return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(values)
    raise ValueError(f"unknown projection {method!r}; use 'tsne' or 'pca'")


def plot_embeddings(
    embedding_csv: str | os.PathLike,
    out_prefix: str | os.PathLike,
    method: str = "tsne",
    machine_type: str | None = None,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Project embeddings to 2-D; write ``<prefix>.png`` and ``<prefix>_coords.csv``.

    Points are coloured by machine ID; normal clips are dots, anomalies crosses.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values, labels = read_embeddings(embedding_csv)
    if machine_type is not None:
        keep = [i for i, lab in enumerate(labels) if lab[0] == machine_type]
        values, labels = values[keep], [labels[i] for i in keep]
    if len(values) < 3:
        raise ValueError(f"need at least 3 embeddings to project, got {len(values)}")
    xy = project(values, method, seed)

    out_prefix = Path(out_prefix)
    coords = out_prefix.with_name(out_prefix.name + "_coords.csv")
    with open(coords, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", *LABEL_COLUMNS])
        for (x, y), lab in zip(xy, labels):
            w.writerow([repr(float(x)), repr(float(y)), *lab])

    fig, ax = plt.subplots(figsize=(6, 5))
    ids = sorted({(t, i) for t, i, _ in labels})
    cmap = plt.get_cmap("tab10")
    for k, key in enumerate(ids):
        for condition, marker in (("normal", "o"), ("anomaly", "x"), ("unknown", "^")):
            sel = [j for j, lab in enumerate(labels) if (lab[0], lab[1]) == key and lab[2] == condition]
            if sel:
                ax.scatter(xy[sel, 0], xy[sel, 1], s=14, marker=marker, color=cmap(k % 10), label=f"{key[0]} id_{key[1]} {condition}")
    ax.set_title(f"{method.upper()} of latent features")
    ax.legend(fontsize=6, loc="best")
    png = out_prefix.with_name(out_prefix.name + ".png")
    fig.savefig(png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return png, coords
