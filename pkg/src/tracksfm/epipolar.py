"""Preliminary cameras from tracks: calibrated 8-point with batched scoring.

Correspondences here are always in normalized camera coordinates,
``(y - pp) / f``. :func:`sampson_error` returns the first-order distance to
the epipolar manifold in those units. Thresholds quoted as
``factor / image_width`` bound the Sampson error in its classical squared
form, so the equivalent distance bound is ``sqrt(factor / width)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import ArityError, DegeneracyError
from .scene import Camera, Scene, skew

BATCH_SETS = 20
BATCH_SET_SIZE = 50
INLIER_FACTOR = 0.6
FOCAL_MULTIPLIER = 1.2
CONDITION_LIMIT = 1e12
MINIMAL_SETS = 480
REFINE_TOP = 3
REFINE_ROUNDS = 3
MAD_TO_SIGMA = 1.4826
MIN_SCALE = 1e-12
TIGHT_SIGMAS = 3.0


@dataclass
class EssentialCandidate:
    E: np.ndarray
    inliers: int
    R: np.ndarray
    t: np.ndarray
    inlier_mask: Optional[np.ndarray] = field(default=None, repr=False)
    mean_error: float = 0.0

    @property
    def pose(self):
        return self.R, self.t


def init_focal(width: float, height: float) -> float:
    """Log focal length guess from the longer image side."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    return math.log(FOCAL_MULTIPLIER * max(width, height))


def normalize_pixels(y, focal: float, pp) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) - np.asarray(pp, dtype=np.float64)) / focal


def sampson_threshold(factor: float, width: float) -> float:
    """Distance bound equivalent to a squared Sampson error below ``factor / width``.

    For a 1024 px wide image with the default focal guess, ``factor=0.6``
    is about 29 px and ``factor=0.8`` about 34 px.
    """
    return math.sqrt(factor / width)


def _hartley(x):
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = x.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(x - c, axis=-1).mean(axis=-1)
    s = np.where(d > 0, math.sqrt(2) / np.where(d > 0, d, 1.0), 1.0)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - c) * s[..., None, None]
    return xn, T


def _homog(x):
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def _linear_essentials(x1, x2, weights=None):
    """Normalized linear solves for a batch of correspondence sets.

    Args:
        x1, x2: (B, N, 2) correspondence sets.
        weights: optional (B, N) row weights of the design matrix.

    Returns:
        ``(E, degenerate)``: (B, 3, 3) unconstrained estimates and a (B,) flag.
    """
    n1, T1 = _hartley(x1)
    n2, T2 = _hartley(x2)
    h1, h2 = _homog(n1), _homog(n2)
    A = np.einsum("bni,bnj->bnij", h2, h1).reshape(x1.shape[0], x1.shape[1], 9)
    if weights is not None:
        A = A * weights[..., None]
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = s[:, 0] / s[:, 7]
    degenerate = ~np.isfinite(ratio) | (ratio > CONDITION_LIMIT)
    En = vt[:, -1].reshape(-1, 3, 3)
    E = np.einsum("bji,bjk,bkl->bil", T2, En, T1)
    return E, degenerate


def two_view_depths(R, t, x1, x2):
    """Depths of each correspondence in both views for the pose ``x2 ~ R x1 + t``."""
    a = _homog(x1) @ R.T
    b = -_homog(x2)
    aa = np.einsum("ni,ni->n", a, a)
    ab = np.einsum("ni,ni->n", a, b)
    bb = np.einsum("ni,ni->n", b, b)
    ra = -a @ t
    rb = -b @ t
    det = aa * bb - ab * ab
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (bb * ra - ab * rb) / det
        d2 = (aa * rb - ab * ra) / det
    return d1, d2


def decompose_essential(E, x1, x2):
    """Project onto the essential manifold and pick the cheirality-voted pose.

    Returns ``(E, R, t, n_front)`` with ``E = [t]x R`` of singular values (1, 1, 0).
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            d1, d2 = two_view_depths(R, t, x1, x2)
            n_front = int(np.count_nonzero((d1 > 0) & (d2 > 0)))
            if best is None or n_front > best[2]:
                best = (R, t.copy(), n_front)
    R, t, n_front = best
    return skew(t) @ R, R, t, n_front


def sampson_error(E, x1, x2, return_flags: bool = False):
    """First-order geometric distance of correspondences to ``x2^T E x1 = 0``.

    Unsquared, in normalized-coordinate units. Degenerate denominators
    (< 1e-18) give ``inf`` and are flagged.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    h1, h2 = _homog(x1), _homog(x2)
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.einsum("ni,ni->n", h2, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    flags = den < 1e-18
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(flags, np.inf, np.abs(num) / np.sqrt(np.where(flags, 1.0, den)))
    if return_flags:
        return err, flags
    return err


def _check_pairs(x1, x2):
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    if len(x1) != len(x2):
        raise ValueError("x1 and x2 must have the same length")
    if len(x1) < 8:
        raise ArityError(f"the 8-point algorithm needs >= 8 pairs, got {len(x1)}")
    return x1, x2


def eight_point(x1, x2) -> EssentialCandidate:
    """Essential matrix and relative pose from >= 8 normalized pairs.

    ``inliers`` counts the pairs in front of both cameras for the chosen pose.
    """
    x1, x2 = _check_pairs(x1, x2)
    E, degenerate = _linear_essentials(x1[None], x2[None])
    if degenerate[0]:
        raise DegeneracyError("8-point design matrix is rank deficient")
    E, R, t, n_front = decompose_essential(E[0], x1, x2)
    return EssentialCandidate(E, n_front, R, t)


def _score(E, x1, x2, threshold):
    err = sampson_error(E, x1, x2)
    mask = err < threshold
    mean = float(err[mask].mean()) if mask.any() else math.inf
    return mask, mean


def _batch_sampson(Es, x1, x2):
    """Sampson errors of every pair under every essential matrix, shape (B, N)."""
    h1, h2 = _homog(x1), _homog(x2)
    Ex1 = np.einsum("bij,nj->bni", Es, h1)
    Etx2 = np.einsum("bji,nj->bni", Es, h2)
    num = np.einsum("ni,bni->bn", h2, Ex1)
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den < 1e-18, np.inf, np.abs(num) / np.sqrt(np.maximum(den, 1e-300)))


def _to_manifold(Es):
    U, _, Vt = np.linalg.svd(Es)
    return np.einsum("bij,j,bjk->bik", U, np.array([1.0, 1.0, 0.0]), Vt)


def _unit_basis(t):
    a = np.eye(3)[int(np.argmin(np.abs(t)))]
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(t, b1)


def _signed_sampson(E, h1, h2):
    Ex1, Etx2 = h1 @ E.T, h2 @ E
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.einsum("ni,ni->n", h2, Ex1) / np.sqrt(np.maximum(den, 1e-300))


def _mad_scale(R, t, h1, h2, threshold):
    d = np.abs(_signed_sampson(skew(t) @ R, h1, h2))
    inside = d[d < threshold]
    if len(inside) < 8:
        return None
    return max(MAD_TO_SIGMA * float(np.median(inside)), MIN_SCALE)


def refine_pose(R, t, x1, x2, threshold: float, rounds: int = REFINE_ROUNDS):
    """Robust Sampson refinement of a relative pose on the essential manifold.

    Minimizes a Cauchy-weighted sum of signed Sampson distances over the
    5-DoF pose (rotation increment, unit baseline). Each round takes its
    Cauchy scale from a MAD estimate of the distances within ``threshold``
    under the current pose. Returns ``(R, t, scale)`` with the last estimate.
    """
    h1, h2 = _homog(x1), _homog(x2)
    scale = _mad_scale(R, t, h1, h2, threshold)
    if scale is None:
        return R, t, threshold
    for _ in range(rounds):
        b1, b2 = _unit_basis(t)

        def unpack(p, R=R, t=t, b1=b1, b2=b2):
            tn = t + p[3] * b1 + p[4] * b2
            return Rotation.from_rotvec(p[:3]).as_matrix() @ R, tn / np.linalg.norm(tn)

        def residuals(p):
            Rn, tn = unpack(p)
            return _signed_sampson(skew(tn) @ Rn, h1, h2)

        sol = least_squares(residuals, np.zeros(5), loss="cauchy", f_scale=scale,
                            x_scale="jac", method="trf")
        R, t = unpack(sol.x)
        new = _mad_scale(R, t, h1, h2, threshold)
        if new is None:
            break
        scale = new
    return R, t, scale


def batched_eight_point(x1, x2, seed, threshold: float, n_sets: int = BATCH_SETS,
                        set_size: int = BATCH_SET_SIZE, minimal_sets: int = MINIMAL_SETS,
                        refine_top: int = REFINE_TOP) -> EssentialCandidate:
    """RANSAC-like pose selection from many 8-point solves done in one batch.

    The candidate pool holds ``n_sets`` random subsets of ``set_size`` pairs
    (a single solve on all pairs when fewer than ``set_size`` exist) plus
    ``minimal_sets`` random 8-pair subsets, all drawn without replacement and
    solved together. Candidates are scored by Sampson inlier count over all
    pairs, ties going to the lower mean inlier error. The ``refine_top`` best
    are then polished by :func:`refine_pose` and the winner is the one with
    most pairs within three noise sigmas (the smallest sigma estimated).

    ``minimal_sets=0, refine_top=0`` gives the plain 20 x 50 scheme, which
    holds no outlier-free subset once outliers exceed a few percent.
    """
    x1, x2 = _check_pairs(x1, x2)
    n = len(x1)
    rng = np.random.default_rng(seed)
    pools = []
    if n >= set_size:
        pools.append(np.stack([rng.choice(n, set_size, replace=False) for _ in range(n_sets)]))
    else:
        pools.append(np.arange(n)[None])
    if minimal_sets > 0:
        pools.append(np.stack([rng.choice(n, 8, replace=False) for _ in range(minimal_sets)]))

    Es = []
    for idx in pools:
        E, degenerate = _linear_essentials(x1[idx], x2[idx])
        Es.append(E[~degenerate])
    Es = np.concatenate(Es)
    if len(Es) == 0:
        raise DegeneracyError("all batched 8-point candidates are degenerate")
    Es = _to_manifold(Es)
    err = _batch_sampson(Es, x1, x2)
    inl = err < threshold
    counts = inl.sum(axis=1)
    means = np.where(inl, err, 0.0).sum(axis=1) / np.maximum(counts, 1)
    means[counts == 0] = np.inf
    order = np.lexsort((means, -counts))

    if refine_top <= 0:
        b = order[0]
        sel = inl[b] if counts[b] >= 1 else np.ones(n, dtype=bool)
        E, R, t, _ = decompose_essential(Es[b], x1[sel], x2[sel])
        mask, mean = _score(E, x1, x2, threshold)
        return EssentialCandidate(E, int(mask.sum()), R, t, mask, mean)

    refined = []
    for b in order[:refine_top]:
        sel = inl[b] if counts[b] >= 1 else np.ones(n, dtype=bool)
        _, R, t, _ = decompose_essential(Es[b], x1[sel], x2[sel])
        R, t, scale = refine_pose(R, t, x1, x2, threshold)
        # the Sampson cost cannot tell the four decompositions apart
        mask, _ = _score(skew(t) @ R, x1, x2, threshold)
        E, R, t, _ = decompose_essential(skew(t) @ R, x1[mask], x2[mask])
        refined.append((E, R, t, scale))
    # a loose threshold cannot rank refined poses; count within a few noise
    # sigmas of the best-fitting one instead
    tight = TIGHT_SIGMAS * min(r[3] for r in refined)
    best = None
    for E, R, t, _ in refined:
        m, mean = _score(E, x1, x2, tight)
        key = (-int(m.sum()), mean)
        if best is None or key < best[0]:
            best = (key, E, R, t)
    _, E, R, t = best
    mask, mean = _score(E, x1, x2, threshold)
    return EssentialCandidate(E, int(mask.sum()), R, t, mask, mean)


# ---------------------------------------------------------------------------
# Camera initialization
# ---------------------------------------------------------------------------

@dataclass
class CameraInit:
    """Result of :func:`initialize_cameras`.

    ``cameras`` holds one entry per frame, ``None`` for frames that failed to
    register; ``failures`` maps those frames to a reason. ``query_depths``
    maps track index to its consolidated query-frame depth (median 1).
    """

    query_frame: int
    cameras: list[Optional[Camera]]
    candidates: dict[int, EssentialCandidate]
    failures: dict[int, str]
    query_depths: dict[int, float]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SFM_THREADS", "1")))
    except ValueError:
        return 1


def _register_frame(scene: Scene, obs_by_frame, query_frame, frame, seed, v_min, factor):
    q_obs = obs_by_frame[query_frame]
    f_obs = obs_by_frame[frame]
    shared = sorted(set(q_obs) & set(f_obs))
    if len(shared) < 8:
        return None, f"only {len(shared)} covisible tracks with the query frame"
    wq, hq = scene.image_size(query_frame)
    wf, hf = scene.image_size(frame)
    fq, ff = math.exp(init_focal(wq, hq)), math.exp(init_focal(wf, hf))
    x1 = normalize_pixels([q_obs[j] for j in shared], fq, (wq / 2, hq / 2))
    x2 = normalize_pixels([f_obs[j] for j in shared], ff, (wf / 2, hf / 2))
    try:
        cand = batched_eight_point(x1, x2, seed=[seed, frame],
                                   threshold=sampson_threshold(factor, wf))
    except DegeneracyError as exc:
        return None, str(exc)
    d1, d2 = two_view_depths(cand.R, cand.t, x1, x2)
    good = cand.inlier_mask & (d1 > 0) & (d2 > 0)
    if not good.any():
        return None, "no inlier in front of both cameras"
    depths = {shared[k]: float(d1[k]) for k in np.flatnonzero(good)}
    return (cand, depths), None


def _consolidate_scales(depths: dict[int, dict[int, float]]):
    """Per-frame baseline scales making two-view depths agree; median depth 1."""
    order = sorted(depths, key=lambda f: (-len(depths[f]), f))
    ref: dict[int, float] = {}
    scales = {}
    for f in order:
        d = depths[f]
        shared = [j for j in d if j in ref]
        if shared:
            s = float(np.median([ref[j] / d[j] for j in shared]))
        elif ref:
            s = float(np.median(list(ref.values())) / np.median(list(d.values())))
        else:
            s = 1.0
        scales[f] = s
        for j, v in d.items():
            ref.setdefault(j, s * v)
    c = float(np.median(list(ref.values())))
    return {f: s / c for f, s in scales.items()}, {j: v / c for j, v in ref.items()}


def initialize_cameras(scene: Scene, query_frame: int, seed: int = 0, v_min: float = 0.6,
                       inlier_factor: float = INLIER_FACTOR) -> CameraInit:
    """Register every frame against the query frame with the batched 8-point.

    The query camera is the identity. Translations are scaled so that the
    two-view depths of shared tracks agree across frames, with the median
    query-frame depth equal to 1. Observations with ``v < v_min`` are ignored.
    """
    obs_by_frame: list[dict[int, tuple]] = [dict() for _ in scene.frames]
    for j, tr in enumerate(scene.tracks):
        for o in tr.observations:
            if not o.v < v_min:
                obs_by_frame[o.frame_id][j] = o.y
    others = [f for f in range(len(scene.frames)) if f != query_frame]

    def work(frame):
        return _register_frame(scene, obs_by_frame, query_frame, frame, seed, v_min, inlier_factor)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(work, others))

    candidates, depths, failures = {}, {}, {}
    for frame, (res, err) in zip(others, results):
        if res is None:
            failures[frame] = err
        else:
            candidates[frame], depths[frame] = res
    scales, query_depths = _consolidate_scales(depths) if depths else ({}, {})

    w, h = scene.image_size(query_frame)
    cameras: list[Optional[Camera]] = [None] * len(scene.frames)
    cameras[query_frame] = Camera(q=(1.0, 0.0, 0.0, 0.0), t=np.zeros(3),
                                  log_f=init_focal(w, h), pp=(w / 2, h / 2))
    for frame, cand in candidates.items():
        w, h = scene.image_size(frame)
        cameras[frame] = Camera.from_rt(cand.R, scales[frame] * cand.t, math.exp(init_focal(w, h)),
                                        (w / 2, h / 2))
    return CameraInit(query_frame, cameras, candidates, failures, query_depths)
