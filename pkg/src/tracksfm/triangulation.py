"""Multi-view DLT triangulation and camera-ray geometry."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ArityError, DegeneracyError, PointAtInfinityError
from .scene import Camera, ObservationTable, Track

INFINITY_EPS = 1e-12
CENTER_EPS = 1e-12


def _dlt_rows(P, xn, w):
    """Two DLT rows per observation: ``x P3 - P1`` and ``y P3 - P2``.

    ``P`` (..., 3, 4) extrinsics, ``xn`` (..., 2) normalized image points,
    ``w`` (..., 2) per-row weights.
    """
    r1 = xn[..., 0:1] * P[..., 2, :] - P[..., 0, :]
    r2 = xn[..., 1:2] * P[..., 2, :] - P[..., 1, :]
    return np.stack([r1 * w[..., 0:1], r2 * w[..., 1:2]], axis=-2)


def _solve(A):
    """Homogeneous least squares on stacked systems ``A`` of shape (n, m, 4).

    Returns the unit-norm null vectors and the ``s3 / s1`` condition values.
    Zero rows (padding) do not change either.
    """
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    X = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(s[:, 0] > 0, s[:, 2] / s[:, 0], 0.0)
    return X, cond


def triangulate_dlt(track: Track, cameras: Sequence[Optional[Camera]], mask=None,
                    weighted: bool = False) -> tuple[np.ndarray, float]:
    """Triangulate one track from its observations in registered cameras.

    Args:
        track: the track to triangulate.
        cameras: one entry per frame, ``None`` for unregistered frames.
        mask: optional per-observation booleans; by default observations with
            ``v > 0`` are used.
        weighted: scale each observation's rows by ``1 / sigma`` per axis.

    Returns:
        ``(x, condition)`` where ``condition = s3 / s1`` of the normalized DLT
        system. It is near zero for ill-determined points.
    """
    if mask is None:
        mask = [o.v > 0 for o in track.observations]
    used = [o for o, m in zip(track.observations, mask)
            if m and cameras[o.frame_id] is not None]
    if len(used) < 2:
        raise ArityError(f"need 2 usable observations to triangulate, got {len(used)}")
    cams = [cameras[o.frame_id] for o in used]
    P = np.array([c.extrinsic for c in cams])
    xn = np.array([(np.asarray(o.y) - c.pp) / c.focal for o, c in zip(used, cams)])
    if weighted:
        w = 1.0 / np.array([o.sigma for o in used])
    else:
        w = np.ones((len(used), 2))
    A = _dlt_rows(P, xn, w).reshape(1, -1, 4)
    X, cond = _solve(A)
    X = X[0]
    if abs(X[3]) < INFINITY_EPS:
        raise PointAtInfinityError(f"homogeneous coordinate {X[3]:.3g} vanishes")
    return X[:3] / X[3], float(cond[0])


def triangulate_table(table: ObservationTable, cameras: Sequence[Optional[Camera]], mask,
                      weighted: bool = False):
    """Triangulate every track of an observation table in one batched solve.

    Returns ``(points, condition, ok)``. ``ok`` is false for tracks with
    fewer than two usable observations or a point at infinity; their points
    are NaN.
    """
    n, m = table.n_tracks, table.n_frames
    registered = np.array([c is not None for c in cameras])
    use = np.asarray(mask, dtype=bool) & registered[table.frame]
    A = np.zeros((n, 2 * m, 4))
    P = np.zeros((m, 3, 4))
    focal = np.ones(m)
    pp = np.zeros((m, 2))
    for i, c in enumerate(cameras):
        if c is not None:
            P[i], focal[i], pp[i] = c.extrinsic, c.focal, c.pp
    idx = np.flatnonzero(use)
    f = table.frame[idx]
    xn = (table.y[idx] - pp[f]) / focal[f][:, None]
    w = 1.0 / table.sigma[idx] if weighted else np.ones((len(idx), 2))
    rows = _dlt_rows(P[f], xn, w)
    A[table.track[idx], 2 * f] = rows[:, 0]
    A[table.track[idx], 2 * f + 1] = rows[:, 1]

    counts = np.bincount(table.track[idx], minlength=n)
    points = np.full((n, 3), np.nan)
    cond = np.zeros(n)
    ok = counts >= 2
    if ok.any():
        X, c = _solve(A[ok])
        finite = np.abs(X[:, 3]) >= INFINITY_EPS
        sel = np.flatnonzero(ok)
        points[sel[finite]] = X[finite, :3] / X[finite, 3:4]
        cond[sel] = c
        ok[sel[~finite]] = False
    return points, cond, ok


def _center(c) -> np.ndarray:
    return c.center if isinstance(c, Camera) else np.asarray(c, dtype=np.float64)


def triangulation_angle(x, cam_a, cam_b) -> float:
    """Angle in degrees at ``x`` between the rays to two camera centers.

    ``cam_a`` and ``cam_b`` may be cameras or bare 3D centers.
    """
    x = np.asarray(x, dtype=np.float64)
    a = _center(cam_a) - x
    b = _center(cam_b) - x
    if np.linalg.norm(a) < CENTER_EPS or np.linalg.norm(b) < CENTER_EPS:
        raise DegeneracyError("point coincides with a camera center")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def max_track_angles(points, centers, table: ObservationTable, mask) -> np.ndarray:
    """Largest pairwise triangulation angle (degrees) per track.

    Only masked observations take part. Tracks with fewer than two of them
    get 0.
    """
    n, m = table.n_tracks, table.n_frames
    rays = np.zeros((n, m, 3))
    idx = np.flatnonzero(mask)
    d = centers[table.frame[idx]] - points[table.track[idx]]
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rays[table.track[idx], table.frame[idx]] = np.where(norm > CENTER_EPS, d / norm, 0.0)
    present = np.zeros((n, m), dtype=bool)
    present[table.track[idx], table.frame[idx]] = norm[:, 0] > CENTER_EPS
    cos = np.einsum("nid,njd->nij", rays, rays)
    pair = present[:, :, None] & present[:, None, :]
    cos = np.where(pair, cos, np.inf)
    min_cos = cos.min(axis=(1, 2))
    out = np.zeros(n)
    has = np.isfinite(min_cos)
    out[has] = np.degrees(np.arccos(np.clip(min_cos[has], -1.0, 1.0)))
    return out


def ray_point_geometry(x, camera: Camera, y) -> tuple[float, np.ndarray]:
    """Distance from ``x`` to the camera ray through pixel ``y``, and the
    nearest ray point. The ray parameter is clamped at zero, so points behind
    the camera report the center itself.
    """
    x = np.asarray(x, dtype=np.float64)
    c = camera.center
    d = camera.R.T @ np.array([(y[0] - camera.pp[0]) / camera.focal,
                               (y[1] - camera.pp[1]) / camera.focal, 1.0])
    d /= np.linalg.norm(d)
    s = max(0.0, float((x - c) @ d))
    nearest = c + s * d
    return float(np.linalg.norm(x - nearest)), nearest
