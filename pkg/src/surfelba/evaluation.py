"""Trajectory and map quality metrics.

ATE is reported in meters after Horn alignment of timestamp-matched poses.
Map metrics compare point sets by nearest-neighbour distance and are
reported in centimeters (F-score in percent); distances above an overlap
threshold are treated as non-overlapping and excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientOverlapError, NoOverlapError
from .geometry import Pose, apply_point, horn_align

DEFAULT_MAX_DT = 0.05


@dataclass
class ATEResult:
    rms: float
    max: float
    matched_pose_count: int
    alignment: Pose
    errors: np.ndarray


@dataclass
class MapReport:
    accuracy: float
    completion: float
    chamfer_l1: float
    f_score: float
    precision: float
    recall: float
    matched_map_points: int
    matched_gt_points: int
    excluded_map_points: int
    excluded_gt_points: int


def associate_timestamps(est_t, gt_t, max_dt=DEFAULT_MAX_DT):
    """Index pairs ``(i_est, i_gt)`` matching each estimate to its nearest ground-truth stamp."""
    est_t = np.asarray(est_t, dtype=float)
    gt_t = np.asarray(gt_t, dtype=float)
    if len(gt_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    pos = np.searchsorted(gt_t, est_t)
    lo = np.clip(pos - 1, 0, len(gt_t) - 1)
    hi = np.clip(pos, 0, len(gt_t) - 1)
    pick = np.where(np.abs(gt_t[hi] - est_t) < np.abs(gt_t[lo] - est_t), hi, lo)
    ok = np.abs(gt_t[pick] - est_t) <= max_dt
    return np.flatnonzero(ok), pick[ok]


def translation_error_stats(errors):
    """``(rms, max)`` of per-pose translation error norms."""
    errors = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(errors**2))), float(np.max(errors))


def ate(est, gt, max_dt=DEFAULT_MAX_DT) -> ATEResult:
    i_est, i_gt = associate_timestamps(est.timestamps, gt.timestamps, max_dt)
    if len(i_est) < 3:
        raise InsufficientOverlapError(
            f"only {len(i_est)} poses matched within {max_dt} s; need at least 3"
        )
    P = est.positions()[i_est]
    Q = gt.positions()[i_gt]
    G = horn_align(P, Q)
    err = np.linalg.norm(apply_point(G, P) - Q, axis=1)
    rms, mx = translation_error_stats(err)
    return ATEResult(rms, mx, len(i_est), G, err)


def _points(x):
    return np.asarray(getattr(x, "points", x), dtype=float).reshape(-1, 3)


def nearest_distances(src, dst) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def map_metrics(map_points, gt_points, overlap_threshold=1.0, f_threshold=0.2) -> MapReport:
    P = _points(map_points)
    Q = _points(gt_points)
    if len(P) == 0 or len(Q) == 0:
        raise NoOverlapError("map_metrics needs two non-empty clouds")
    d_pq = nearest_distances(P, Q)
    d_qp = nearest_distances(Q, P)
    keep_p = d_pq <= overlap_threshold
    keep_q = d_qp <= overlap_threshold
    if not keep_p.any() or not keep_q.any():
        raise NoOverlapError(f"no point pairs closer than {overlap_threshold} m")
    acc = float(np.mean(d_pq[keep_p]))
    comp = float(np.mean(d_qp[keep_q]))
    precision = float(np.mean(d_pq[keep_p] < f_threshold))
    recall = float(np.mean(d_qp[keep_q] < f_threshold))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MapReport(
        accuracy=100.0 * acc,
        completion=100.0 * comp,
        chamfer_l1=100.0 * 0.5 * (acc + comp),
        f_score=100.0 * f,
        precision=100.0 * precision,
        recall=100.0 * recall,
        matched_map_points=int(keep_p.sum()),
        matched_gt_points=int(keep_q.sum()),
        excluded_map_points=int((~keep_p).sum()),
        excluded_gt_points=int((~keep_q).sum()),
    )
