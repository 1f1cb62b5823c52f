"""Threshold-free detection metrics (AUC, pAUC, mAUC) and per-machine reports."""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)


def _scores(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} scores are empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} scores contain non-finite values")
    return arr


def auc(normal_scores, anomaly_scores) -> float:
    """Mann-Whitney estimate of P(anomaly score > normal score), ties counted as 1/2."""
    n = _scores(normal_scores, "normal")
    a = _scores(anomaly_scores, "anomaly")
    ranks = rankdata(np.concatenate([a, n]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * n.size))


def roc_points(normal_scores, anomaly_scores) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ROC vertices (FPR, TPR) from (0, 0) to (1, 1), one vertex per distinct score.

    Tied normal/anomaly scores therefore give a single diagonal segment.
    """
    n = _scores(normal_scores, "normal")
    a = _scores(anomaly_scores, "anomaly")
    scores = np.concatenate([a, n])
    is_anom = np.concatenate([np.ones(a.size), np.zeros(n.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_anom = scores[order], is_anom[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(is_anom)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n.size]
    tpr = np.r_[0.0, tp / a.size]
    return fpr, tpr


def pauc(normal_scores, anomaly_scores, p: float = 0.1) -> float:
    """Trapezoidal ROC area over FPR in [0, p], divided by p (no McClish correction)."""
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    fpr, tpr = roc_points(normal_scores, anomaly_scores)
    stop = np.searchsorted(fpr, p, side="right")
    x = fpr[:stop]
    y = tpr[:stop]
    if x[-1] < p:
        # the vertex after `stop` exists because fpr ends at 1 >= p
        x0, x1, y0, y1 = fpr[stop - 1], fpr[stop], tpr[stop - 1], tpr[stop]
        x = np.r_[x, p]
        y = np.r_[y, y0 + (y1 - y0) * (p - x0) / (x1 - x0)]
    return float(np.trapezoid(y, x) / p)


def mauc(per_id_aucs: Sequence[float]) -> float:
    if len(per_id_aucs) == 0:
        raise ValueError("mAUC of an empty list")
    return float(min(per_id_aucs))


@dataclass
class IdMetrics:
    machine_type: str
    machine_id: str
    auc: float
    pauc: float
    n_normal: int
    n_anomaly: int


@dataclass
class TypeMetrics:
    machine_type: str
    auc: float
    pauc: float
    mauc: float
    n_ids: int


@dataclass
class MetricsReport:
    p: float
    ids: list[IdMetrics]
    types: list[TypeMetrics]
    average_auc: float
    average_pauc: float
    average_mauc: float
    excluded: list[dict] = field(default_factory=list)

    def type(self, machine_type: str) -> TypeMetrics:
        for t in self.types:
            if t.machine_type == machine_type:
                return t
        raise KeyError(machine_type)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(
            p=d["p"],
            ids=[IdMetrics(**x) for x in d["ids"]],
            types=[TypeMetrics(**x) for x in d["types"]],
            average_auc=d["average_auc"],
            average_pauc=d["average_pauc"],
            average_mauc=d["average_mauc"],
            excluded=list(d.get("excluded", [])),
        )

    def to_json(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, path: str | os.PathLike) -> None:
        """Long-form CSV: one row per machine ID, per type and the overall average."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["level", "machine_type", "machine_id", "auc", "pauc", "mauc"])
            for m in self.ids:
                w.writerow(["id", m.machine_type, m.machine_id, repr(m.auc), repr(m.pauc), ""])
            for t in self.types:
                w.writerow(["type", t.machine_type, "", repr(t.auc), repr(t.pauc), repr(t.mauc)])
            w.writerow(["average", "", "", repr(self.average_auc), repr(self.average_pauc), repr(self.average_mauc)])

    def render(self) -> str:
        """Machine types as columns, AUC/pAUC/mAUC rows (in %), plus an Average column."""
        cols = [t.machine_type for t in self.types] + ["Average"]
        rows = {
            "AUC": [t.auc for t in self.types] + [self.average_auc],
            "pAUC": [t.pauc for t in self.types] + [self.average_pauc],
            "mAUC": [t.mauc for t in self.types] + [self.average_mauc],
        }
        return render_table("Metric", cols, [(k, [f"{100 * v:.2f}" for v in vals]) for k, vals in rows.items()])


def render_table(corner: str, columns: Sequence[str], rows: Iterable[tuple[str, Sequence[str]]]) -> str:
    rows = list(rows)
    widths = [max(len(corner), *(len(r[0]) for r in rows))]
    for j, c in enumerate(columns):
        widths.append(max(len(c), *(len(r[1][j]) for r in rows)))
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line([corner, *columns]), "-" * (sum(widths) + 2 * len(columns))]
    out += [line([name, *vals]) for name, vals in rows]
    return "\n".join(out)


def build_report(records, p: float = 0.1) -> MetricsReport:
    """Aggregate score records into per-ID, per-type and overall metrics.

    IDs lacking either normal or anomalous clips are excluded and listed in
    ``excluded``. Type and overall figures are unweighted means.
    """
    groups: dict[tuple[str, str], dict[str, list[float]]] = defaultdict(lambda: {"normal": [], "anomaly": []})
    for r in records:
        if r.condition in ("normal", "anomaly"):
            groups[(r.machine_type, r.machine_id)][r.condition].append(r.score)

    ids, excluded = [], []
    for (mtype, mid), g in sorted(groups.items()):
        if not g["normal"] or not g["anomaly"]:
            missing = "normal" if not g["normal"] else "anomaly"
            logger.warning("excluding %s/id_%s: no %s clips", mtype, mid, missing)
            excluded.append({"machine_type": mtype, "machine_id": mid, "reason": f"no {missing} clips"})
            continue
        ids.append(IdMetrics(mtype, mid, auc(g["normal"], g["anomaly"]), pauc(g["normal"], g["anomaly"], p), len(g["normal"]), len(g["anomaly"])))
    if not ids:
        raise ValueError("no machine ID has both normal and anomalous scores")

    by_type: dict[str, list[IdMetrics]] = defaultdict(list)
    for m in ids:
        by_type[m.machine_type].append(m)
    types = [
        TypeMetrics(
            t,
            float(np.mean([m.auc for m in ms])),
            float(np.mean([m.pauc for m in ms])),
            mauc([m.auc for m in ms]),
            len(ms),
        )
        for t, ms in sorted(by_type.items())
    ]
    return MetricsReport(
        p=p,
        ids=ids,
        types=types,
        average_auc=float(np.mean([t.auc for t in types])),
        average_pauc=float(np.mean([t.pauc for t in types])),
        average_mauc=float(np.mean([t.mauc for t in types])),
        excluded=excluded,
    )
