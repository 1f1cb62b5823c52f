"""Slow, independent reference implementations used to check the metrics module."""

import numpy as np


def auc_pairs(normal, anomaly) -> float:
    """Count every (anomaly, normal) pair: win 1, tie 1/2."""
    a = np.asarray(anomaly, float)[:, None]
    n = np.asarray(normal, float)[None, :]
    return float(((a > n).sum() + 0.5 * (a == n).sum()) / (a.size * n.size))


def roc_sweep(normal, anomaly):
    """ROC vertices from a threshold sweep over every distinct score (predict anomaly if score >= t)."""
    normal, anomaly = np.asarray(normal, float), np.asarray(anomaly, float)
    points = [(0.0, 0.0)]
    for t in sorted(set(normal.tolist()) | set(anomaly.tolist()), reverse=True):
        points.append((float(np.mean(normal >= t)), float(np.mean(anomaly >= t))))
    return points


def pauc_trapezoid(normal, anomaly, p: float) -> float:
    """Trapezoid area under the swept ROC for FPR in [0, p], cut by linear interpolation, over p."""
    area = 0.0
    pts = roc_sweep(normal, anomaly)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area / p


def random_score_set(rng: np.random.Generator, max_size: int = 200):
    """Score lists of random size; about half the sets are drawn from a coarse grid so ties are common."""
    n_norm, n_anom = rng.integers(1, max_size + 1, size=2)
    shift = rng.uniform(0, 2)
    if rng.random() < 0.5:
        normal = rng.integers(0, 12, n_norm) / 4.0
        anomaly = rng.integers(0, 12, n_anom) / 4.0 + np.round(shift)
    else:
        normal = rng.normal(size=n_norm)
        anomaly = rng.normal(loc=shift, size=n_anom)
    return normal, anomaly
