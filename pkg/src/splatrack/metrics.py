"""Point-tracking metrics over pooled (track, frame) points.

Distance metrics use the points where the ground truth is visible and
defined. Missing predictions count as infinitely far.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAPVID_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
IPHONE_THRESHOLDS = (4.0, 8.0, 16.0, 32.0, 64.0)
CM_THRESHOLDS = (0.01, 0.02, 0.04, 0.08, 0.16)
SURVIVAL_2D = 16.0
SURVIVAL_3D = 0.5


class MetricError(ValueError):
    pass


@dataclass
class TrackPair:
    pred: np.ndarray
    gt: np.ndarray
    gt_visible: np.ndarray
    pred_visible: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.gt_visible = np.asarray(self.gt_visible, dtype=bool)
        self.pred_visible = np.asarray(self.pred_visible, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = len(self.gt)
        if not (len(self.pred) == len(self.gt_visible) == len(self.pred_visible) == len(self.valid) == n):
            raise MetricError("track arrays must share one length")
        if self.pred.shape != self.gt.shape or self.gt.ndim != 2 or self.gt.shape[1] not in (2, 3):
            raise MetricError("positions must be [T][2] or [T][3] with matching shapes")

    @property
    def errors(self) -> np.ndarray:
        err = np.linalg.norm(self.pred - self.gt, axis=1)
        return np.where(np.isfinite(err), err, np.inf)


def _pool(pairs):
    pairs = list(pairs)
    if not pairs:
        raise MetricError("no tracks to evaluate")
    err = np.concatenate([p.errors for p in pairs])
    gt_vis = np.concatenate([p.gt_visible for p in pairs])
    pred_vis = np.concatenate([p.pred_visible for p in pairs])
    valid = np.concatenate([p.valid for p in pairs])
    return err, gt_vis, pred_vis, valid


def _evaluated_errors(pairs) -> np.ndarray:
    err, gt_vis, _, valid = _pool(pairs)
    sel = err[gt_vis & valid]
    if sel.size == 0:
        raise MetricError("no evaluated points (ground truth never visible)")
    return sel


def _within(err, h, strict):
    return err < h if strict else err <= h


def delta_avg(pairs, thresholds=TAPVID_THRESHOLDS, strict: bool = False) -> float:
    """Mean over thresholds of the percentage of points within each threshold."""
    if len(thresholds) == 0:
        raise MetricError("thresholds must be non-empty")
    err = _evaluated_errors(pairs)
    return float(np.mean([np.mean(_within(err, h, strict)) for h in thresholds]) * 100.0)


def delta_at(pairs, threshold: float, strict: bool = False) -> float:
    return delta_avg(pairs, (threshold,), strict)


def mte(pairs) -> float:
    """Median error; an even count averages the two central values."""
    return float(np.median(_evaluated_errors(pairs)))


def survival(pairs, threshold: float = SURVIVAL_2D) -> float:
    """Percentage of evaluated points with error strictly below ``threshold``."""
    return float(np.mean(_evaluated_errors(pairs) < threshold) * 100.0)


def occlusion_accuracy(pairs) -> float:
    _, gt_vis, pred_vis, valid = _pool(pairs)
    if not valid.any():
        raise MetricError("no valid frames")
    return float(np.mean(gt_vis[valid] == pred_vis[valid]) * 100.0)


def average_jaccard(pairs, thresholds=TAPVID_THRESHOLDS, strict: bool = False) -> float:
    """Mean over thresholds of ``TP / (GT + FP)`` as a percentage.

    TP: predicted visible, ground truth visible, within the threshold.
    FP: every other predicted-visible point. GT: ground-truth visible points.
    """
    if len(thresholds) == 0:
        raise MetricError("thresholds must be non-empty")
    err, gt_vis, pred_vis, valid = _pool(pairs)
    n_gt = int(np.count_nonzero(gt_vis & valid))
    if n_gt == 0:
        raise MetricError("no visible ground-truth points")
    predicted = pred_vis & valid
    scores = []
    for h in thresholds:
        tp = predicted & gt_vis & _within(err, h, strict)
        fp = predicted & ~tp
        scores.append(np.count_nonzero(tp) / (n_gt + np.count_nonzero(fp)))
    return float(np.mean(scores) * 100.0)


def epe(pairs) -> float:
    return float(np.mean(_evaluated_errors(pairs)))


# --- track files ----------------------------------------------------------------

def _track_arrays(track: dict | None, frames: int, dim: int):
    pos = np.full((frames, dim), np.nan)
    vis = np.zeros(frames, dtype=bool)
    present = np.zeros(frames, dtype=bool)
    keys = ("x", "y") if dim == 2 else ("X", "Y", "Z")
    for p in (track or {}).get("points", []):
        t = int(p["t"])
        if 0 <= t < frames:
            pos[t] = [p[k] for k in keys]
            vis[t] = bool(p["visible"])
            present[t] = True
    return pos, vis, present


def pairs_from_json(pred: dict, gt: dict, dim: int = 2) -> list[TrackPair]:
    """Match predicted and ground-truth tracks by position in their lists."""
    gt_tracks = gt["tracks"]
    pred_tracks = pred["tracks"]
    if len(pred_tracks) != len(gt_tracks):
        raise MetricError(f"{len(pred_tracks)} predicted tracks for {len(gt_tracks)} ground-truth tracks")
    frames = int(gt.get("frames") or max(len(t["points"]) for t in gt_tracks))
    pairs = []
    for p, g in zip(pred_tracks, gt_tracks):
        gpos, gvis, gvalid = _track_arrays(g, frames, dim)
        ppos, pvis, _ = _track_arrays(p, frames, dim)
        pairs.append(TrackPair(ppos, gpos, gvis, pvis, gvalid))
    return pairs


def evaluate(pred: dict, gt: dict, protocol: str = "tapvid", strict: bool = False) -> dict:
    """All metrics of one protocol; percentages in [0, 100]."""
    p2 = pairs_from_json(pred, gt, 2)
    p3 = pairs_from_json(pred, gt, 3)
    if protocol == "tapvid":
        return {
            "protocol": protocol,
            "delta_avg_2d": delta_avg(p2, TAPVID_THRESHOLDS, strict),
            "mte_2d": mte(p2),
            "survival_2d": survival(p2, SURVIVAL_2D),
            "average_jaccard": average_jaccard(p2, TAPVID_THRESHOLDS, strict),
            "occlusion_accuracy": occlusion_accuracy(p2),
            "delta_avg_3d": delta_avg(p3, CM_THRESHOLDS, strict),
            "mte_3d": mte(p3),
            "survival_3d": survival(p3, SURVIVAL_3D),
        }
    if protocol == "iphone":
        return {
            "protocol": protocol,
            "average_jaccard": average_jaccard(p2, IPHONE_THRESHOLDS, strict),
            "delta_avg_2d": delta_avg(p2, IPHONE_THRESHOLDS, strict),
            "occlusion_accuracy": occlusion_accuracy(p2),
            "epe": epe(p3),
            "delta_05_3d": delta_at(p3, 0.05, strict),
            "delta_10_3d": delta_at(p3, 0.10, strict),
        }
    raise MetricError(f"unknown protocol '{protocol}'")
