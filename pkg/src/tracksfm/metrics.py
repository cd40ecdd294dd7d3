"""Camera-pose and point-cloud evaluation metrics."""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .scene import Camera, relative_pose, rotation_angle_deg

GT_BASELINE_EPS = 1e-9
FAILED_PAIR_DEG = 180.0


class PairError(NamedTuple):
    i: int
    j: int
    rre: float
    rte: float
    rte_skipped: bool      # degenerate ground-truth baseline
    registered: bool       # both predictions present


def pairwise_errors(pred: Sequence[Optional[Camera]], gt: Sequence[Camera]) -> list[PairError]:
    """Relative rotation and translation errors (degrees) over unordered pairs.

    A pair with an unregistered prediction counts as a failure with both
    errors 180 degrees. Pairs whose ground-truth baseline is shorter than
    1e-9 skip the translation error (reported as 0 and flagged).
    """
    if len(pred) != len(gt):
        raise ContractError(f"{len(pred)} predicted vs {len(gt)} ground-truth cameras")
    out = []
    for i in range(len(gt)):
        for j in range(i + 1, len(gt)):
            if pred[i] is None or pred[j] is None:
                out.append(PairError(i, j, FAILED_PAIR_DEG, FAILED_PAIR_DEG, False, False))
                continue
            rp, rg = relative_pose(pred[i], pred[j]), relative_pose(gt[i], gt[j])
            rre = rotation_angle_deg(rp.rotation @ rg.rotation.T)
            gt_base = np.linalg.norm(gt[j].t - rg.rotation @ gt[i].t)
            if gt_base < GT_BASELINE_EPS:
                out.append(PairError(i, j, rre, 0.0, True, True))
                continue
            if rp.degenerate:
                rte = 90.0
            else:
                a, b = rp.translation, rg.translation
                rte = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))
            out.append(PairError(i, j, rre, rte, False, True))
    return out


def pair_max_errors(errors) -> np.ndarray:
    """Per-pair error ``max(RRE, RTE)``; a pair is accurate at a threshold
    only if both of its errors are."""
    return np.array([max(e[2], e[3]) if isinstance(e, PairError) else max(e[0], e[1])
                     for e in errors], dtype=np.float64)


def accuracy_at(values, threshold: float) -> float:
    """Percentage of values strictly below ``threshold``."""
    v = np.asarray(values, dtype=np.float64)
    return 100.0 * float(np.mean(v < threshold)) if len(v) else 0.0


def auc(errors, max_threshold_deg: float) -> float:
    """Area under the accuracy-threshold curve on (0, max_threshold], in [0, 100].

    ``errors`` holds :class:`PairError` records or ``(rre, rte)`` pairs.
    Accuracy is a step function of the threshold, so the integral is exact:
    each pair contributes ``max(0, T - e) / T``.
    """
    e = pair_max_errors(errors)
    if len(e) == 0:
        raise ContractError("AUC needs at least one pair")
    T = float(max_threshold_deg)
    return 100.0 * float(np.mean(np.clip(T - e, 0.0, None) / T))


def auc_curve(errors, max_threshold_deg: float, n: int = 101):
    """``(thresholds, accuracy %)`` samples of the accuracy curve for plotting."""
    e = pair_max_errors(errors)
    th = np.linspace(0.0, max_threshold_deg, n)
    return th, np.array([accuracy_at(e, t) for t in th])


def cloud_accuracy_completeness(pred, gt, thresholds) -> list[tuple[float, float]]:
    """Per threshold ``(accuracy %, completeness %)`` by exact nearest neighbors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ContractError("point clouds must be non-empty")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    return [(100.0 * float(np.mean(d_pred < t)), 100.0 * float(np.mean(d_gt < t)))
            for t in thresholds]


def umeyama(src, dst, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimizing ``|s R src + t - dst|^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(b.T @ a / len(src))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var = np.mean(np.sum(a * a, axis=1))
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale else 1.0
    return s, R, mu_d - s * R @ mu_s


def align_cameras(pred: Sequence[Optional[Camera]], gt: Sequence[Camera]):
    """Similarity aligning predicted camera centers onto ground truth.

    Returns ``(s, R, t)`` mapping prediction world to ground-truth world, and
    the aligned camera list.
    """
    idx = [i for i, c in enumerate(pred) if c is not None]
    s, R, t = umeyama([pred[i].center for i in idx], [gt[i].center for i in idx])
    aligned = []
    for c in pred:
        if c is None:
            aligned.append(None)
            continue
        Rn = c.R @ R.T
        aligned.append(c.with_pose(Rn, s * c.t - Rn @ t))
    return (s, R, t), aligned


def transform_points(points, s, R, t) -> np.ndarray:
    return s * np.asarray(points) @ R.T + t
