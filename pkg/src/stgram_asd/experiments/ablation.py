"""Train/score/evaluate every (feature kind, head kind) cell and tabulate them side by side."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path


from ..dataio import ConfigurationError, scan_dataset
from ..metrics import MetricsReport, build_report, render_table
from ..scorer import score_split, write_scores
from ..trainer import train
from .config import ExperimentConfig, cell_name

logger = logging.getLogger(__name__)


@dataclass
class AblationResult:
    cells: list[str]
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def machine_types(self) -> list[str]:
        types = set()
        for r in self.reports.values():
            types.update(t.machine_type for t in r.types)
        return sorted(types)

    def rows(self) -> list[tuple[str, list[float | None]]]:
        """Per machine type (plus Average): AUC and mAUC of every cell, None where missing."""
        out = []
        for mtype in self.machine_types() + ["Average"]:
            vals: list[float | None] = []
            for cell in self.cells:
                r = self.reports.get(cell)
                if r is None:
                    vals += [None, None]
                elif mtype == "Average":
                    vals += [r.average_auc, r.average_mauc]
                else:
                    try:
                        t = r.type(mtype)
                        vals += [t.auc, t.mauc]
                    except KeyError:
                        vals += [None, None]
            out.append((mtype, vals))
        return out

    def columns(self) -> list[str]:
        return [f"{c} {m}" for c in self.cells for m in ("AUC", "mAUC")]

    def render(self) -> str:
        fmt = lambda v: "-" if v is None else f"{100 * v:.2f}"
        return render_table("Methods", self.columns(), [(name, [fmt(v) for v in vals]) for name, vals in self.rows()])

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["machine_type", *self.columns()])
            for name, vals in self.rows():
                w.writerow([name, *("" if v is None else repr(v) for v in vals)])

    def to_json(self, path: str | os.PathLike) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "cells": self.cells,
                    "reports": {k: v.to_dict() for k, v in self.reports.items()},
                    "failures": self.failures,
                },
                indent=2,
            )
        )


def run_ablation(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> AblationResult:
    """Run every ablation cell on ``cfg.data_root``.

    The dataset is scanned before any training, so a missing dataset fails
    without producing a partial table. A failing cell is recorded in
    ``failures`` and the remaining cells still run. Each cell writes into
    its own subdirectory of ``out_dir`` when one is given.
    """
    roots = cfg.roots()
    train_manifest = scan_dataset(roots, "train")
    test_manifest = scan_dataset(roots, "test", id_map=train_manifest.id_map)
    if len(train_manifest) == 0 or len(test_manifest) == 0:
        raise ConfigurationError(f"no train/test clips found under {roots}")

    result = AblationResult(cells=[cell_name(f, h) for f, h in cfg.ablation])
    for (feature_kind, head_kind), name in zip(cfg.ablation, result.cells):
        cell_dir = None
        if out_dir is not None:
            cell_dir = Path(out_dir) / name
        logger.info("ablation cell %s", name)
        try:
            tc = dataclasses.replace(cfg.train, feature_kind=feature_kind, head_kind=head_kind)
            bundle = train(train_manifest, tc, cfg.spectral, cfg.model, out_dir=cell_dir, cache_dir=cfg.cache_dir)
            records = score_split(bundle, test_manifest, cfg.score_batch_size)
            report = build_report(records, cfg.p)
        except Exception as exc:  # noqa: BLE001 - one broken cell must not stop the matrix
            logger.exception("cell %s failed", name)
            result.failures[name] = f"{type(exc).__name__}: {exc}"
            continue
        if cell_dir is not None:
            write_scores(records, cell_dir / "scores.csv")
            report.to_json(cell_dir / "report.json")
        result.reports[name] = report
    return result
