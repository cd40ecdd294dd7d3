"""Observation and track filtering applied before and during bundle adjustment.

All comparisons are strict: an observation is dropped when its visibility is
*below* ``v_min`` or an error *exceeds* its threshold, so values sitting
exactly on a threshold survive.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .scene import Camera, ObservationTable, Scene, project_batch, stack_cameras
from .triangulation import max_track_angles

SAMPSON_DENOM_EPS = 1e-18


@dataclass(frozen=True)
class FilterConfig:
    v_min: float = 0.6
    sigma_max: float = 1.0
    sampson_factor: float = 0.8   # squared Sampson error bound is factor / width
    min_tri_angle: float = 3.0    # degrees
    max_reproj_px: float = 3.0
    min_track_len: int = 3

    def __post_init__(self):
        for name in ("v_min", "sigma_max", "sampson_factor", "min_tri_angle", "max_reproj_px"):
            value = getattr(self, name)
            if math.isnan(value) or value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.min_track_len < 1:
            raise ValueError("min_track_len must be at least 1")

    @classmethod
    def disabled(cls, min_track_len: int = 2) -> "FilterConfig":
        """A configuration that keeps every triangulable observation."""
        return cls(v_min=0.0, sigma_max=math.inf, sampson_factor=math.inf, min_tri_angle=0.0,
                   max_reproj_px=math.inf, min_track_len=min_track_len)

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        known = {k: (math.inf if v is None else v) for k, v in d.items()
                 if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(eq=False)
class FilterMask:
    """Per-observation and per-track keep flags with the first failing reason.

    Observations follow the order of :meth:`Scene.observation_table`.
    """

    keep: np.ndarray           # (M,) bool
    reason: np.ndarray         # (M,) str, "" for kept observations
    track_keep: np.ndarray     # (N,) bool
    track_reason: np.ndarray   # (N,) str

    @classmethod
    def all_kept(cls, n_obs: int, n_tracks: int) -> "FilterMask":
        return cls(np.ones(n_obs, dtype=bool), np.full(n_obs, "", dtype=object),
                   np.ones(n_tracks, dtype=bool), np.full(n_tracks, "", dtype=object))

    def drop(self, which, why: str) -> None:
        which = np.asarray(which, dtype=bool) & self.keep
        self.keep[which] = False
        self.reason[which] = why

    def drop_tracks(self, table: ObservationTable, which, why: str) -> None:
        which = np.asarray(which, dtype=bool) & self.track_keep
        self.track_keep[which] = False
        self.track_reason[which] = why
        self.drop(which[table.track], "track:" + why)

    def summary(self) -> dict:
        obs, counts = np.unique(self.reason[~self.keep], return_counts=True)
        trk, tcounts = np.unique(self.track_reason[~self.track_keep], return_counts=True)
        return {
            "observations_kept": int(self.keep.sum()),
            "observations_dropped": {str(k): int(v) for k, v in zip(obs, counts)},
            "tracks_kept": int(self.track_keep.sum()),
            "tracks_dropped": {str(k): int(v) for k, v in zip(trk, tcounts)},
        }

    def to_json(self) -> str:
        doc = dict(self.summary())
        doc["keep"] = self.keep.astype(int).tolist()
        doc["reason"] = [str(r) for r in self.reason]
        doc["track_keep"] = self.track_keep.astype(int).tolist()
        doc["track_reason"] = [str(r) for r in self.track_reason]
        return json.dumps(doc, separators=(",", ":"))


def _start(table: ObservationTable, mask: Optional[FilterMask]) -> FilterMask:
    out = FilterMask.all_kept(len(table), table.n_tracks)
    if mask is not None:
        out.keep &= mask.keep
        out.reason[~mask.keep] = mask.reason[~mask.keep]
        out.track_keep &= mask.track_keep
        out.track_reason[~mask.track_keep] = mask.track_reason[~mask.track_keep]
    return out


def _anchors(table: ObservationTable, query_frame: int, registered) -> np.ndarray:
    """Anchor observation index per track (-1 if none): the query-frame
    observation when present, else the first one in a registered frame."""
    anchor = np.full(table.n_tracks, -1)
    ok = registered[table.frame]
    for j, sl in enumerate(table.track_slices()):
        frames = table.frame[sl]
        hit = np.flatnonzero((frames == query_frame) & ok[sl])
        if len(hit) == 0:
            hit = np.flatnonzero(ok[sl])
        if len(hit):
            anchor[j] = sl.start + hit[0]
    return anchor


def _sampson_vs_anchor(table, anchor, cameras) -> np.ndarray:
    """Sampson distance (normalized units) of each observation against its
    track's anchor observation."""
    _, t, log_f, pp = stack_cameras([c for c in cameras if c is not None])
    slot = np.cumsum([c is not None for c in cameras]) - 1
    R = np.array([c.R for c in cameras if c is not None])
    f = np.exp(log_f)

    err = np.zeros(len(table))
    a = anchor[table.track]
    idx = np.flatnonzero((a >= 0) & (np.arange(len(table)) != a))
    if len(idx) == 0:
        return err
    fa, fb = slot[table.frame[a[idx]]], slot[table.frame[idx]]
    R_rel = np.einsum("nij,nkj->nik", R[fb], R[fa])
    t_rel = t[fb] - np.einsum("nij,nj->ni", R_rel, t[fa])
    sk = np.zeros((len(idx), 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -t_rel[:, 2], t_rel[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = t_rel[:, 2], -t_rel[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -t_rel[:, 1], t_rel[:, 0]
    E = sk @ R_rel
    x1 = np.c_[(table.y[a[idx]] - pp[fa]) / f[fa][:, None], np.ones(len(idx))]
    x2 = np.c_[(table.y[idx] - pp[fb]) / f[fb][:, None], np.ones(len(idx))]
    Ex1 = np.einsum("nij,nj->ni", E, x1)
    Etx2 = np.einsum("nji,nj->ni", E, x2)
    num = np.einsum("ni,ni->n", x2, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err[idx] = np.where(den < SAMPSON_DENOM_EPS, np.inf, np.abs(num) / np.sqrt(den))
    return err


def _ray_angles(table: ObservationTable, cameras, mask) -> np.ndarray:
    """Largest angle between back-projected observation rays per track."""
    n, m = table.n_tracks, table.n_frames
    rays = np.zeros((n, m, 3))
    present = np.zeros((n, m), dtype=bool)
    idx = np.flatnonzero(mask)
    if len(idx):
        for i, c in enumerate(cameras):
            if c is None:
                continue
            sel = idx[table.frame[idx] == i]
            d = np.c_[(table.y[sel] - c.pp) / c.focal, np.ones(len(sel))] @ c.R
            rays[table.track[sel], i] = d / np.linalg.norm(d, axis=1, keepdims=True)
            present[table.track[sel], i] = True
    cos = np.einsum("nid,njd->nij", rays, rays)
    cos = np.where(present[:, :, None] & present[:, None, :], cos, np.inf)
    min_cos = cos.min(axis=(1, 2))
    out = np.zeros(n)
    has = np.isfinite(min_cos)
    out[has] = np.degrees(np.arccos(np.clip(min_cos[has], -1.0, 1.0)))
    return out


def _track_checks(out: FilterMask, table, config: FilterConfig, angles_fn) -> None:
    counts = np.bincount(table.track[out.keep], minlength=table.n_tracks)
    out.drop_tracks(table, counts < config.min_track_len, "track_length")
    if config.min_tri_angle > 0:
        angles = angles_fn(out.keep)
        out.drop_tracks(table, ~(angles > config.min_tri_angle), "angle")


def filter_observations(scene: Scene, cameras: Sequence[Optional[Camera]], config: FilterConfig,
                        query_frame: int = 0, preliminary: Optional[Sequence] = None,
                        mask: Optional[FilterMask] = None) -> FilterMask:
    """Visibility, uncertainty, epipolar and track-level filtering.

    The Sampson test pairs every observation with its track's anchor (the
    query-frame observation, else the first registered one). A track whose
    anchor fails the visibility or sigma test is dropped whole. The test runs
    under ``cameras`` and, when given, also under ``preliminary``.

    The angle test uses the angle between back-projected observation rays,
    which equals the triangulation angle for consistent observations and does
    not depend on a triangulated point.
    """
    table = scene.observation_table()
    out = _start(table, mask)
    registered = np.array([c is not None for c in cameras])
    out.drop(~registered[table.frame], "unregistered")
    out.drop(table.v < config.v_min, "visibility")
    out.drop((table.sigma > config.sigma_max).any(axis=1), "sigma")

    anchor = _anchors(table, query_frame, registered)
    no_anchor = anchor < 0
    anchor_bad = np.zeros(table.n_tracks, dtype=bool)
    anchor_bad[~no_anchor] = ~out.keep[anchor[~no_anchor]]
    out.drop_tracks(table, no_anchor | anchor_bad, "anchor")

    if config.sampson_factor < math.inf:
        widths = np.array([fr.width for fr in scene.frames], dtype=np.float64)
        threshold = np.sqrt(config.sampson_factor / widths[table.frame])
        for cams in ([cameras] + ([preliminary] if preliminary is not None else [])):
            err = _sampson_vs_anchor(table, anchor, cams)
            out.drop(err > threshold, "sampson")

    _track_checks(out, table, config, lambda keep: _ray_angles(table, cameras, keep))
    return out


def reprojection_errors(table: ObservationTable, cameras: Sequence[Optional[Camera]], points):
    """Pixel reprojection error norm and depth for every observation.

    Observations in unregistered frames or of tracks without a point get NaN.
    """
    err = np.full(len(table), np.nan)
    depth = np.full(len(table), np.nan)
    points = np.asarray(points, dtype=np.float64)
    registered = np.array([c is not None for c in cameras])
    idx = np.flatnonzero(registered[table.frame] & np.isfinite(points[table.track]).all(axis=1))
    if len(idx) == 0:
        return err, depth
    q, t, log_f, pp = stack_cameras([c if c is not None else cameras[np.argmax(registered)]
                                     for c in cameras])
    f = table.frame[idx]
    y, d = project_batch(q[f], t[f], log_f[f], pp[f], points[table.track[idx]])
    err[idx] = np.linalg.norm(y - table.y[idx], axis=1)
    depth[idx] = d
    return err, depth


def filter_reprojection(scene: Scene, cameras: Sequence[Optional[Camera]], points,
                        config: FilterConfig, mask: Optional[FilterMask] = None) -> FilterMask:
    """Drop observations reprojecting more than ``max_reproj_px`` away or
    lying behind their camera, then re-apply the track-level checks (the
    angle now measured at the given points)."""
    table = scene.observation_table()
    out = _start(table, mask)
    points = np.asarray(points, dtype=np.float64)
    err, depth = reprojection_errors(table, cameras, points)
    out.drop(~np.isfinite(err), "no_point")
    out.drop(~(depth > 0), "cheirality")
    out.drop(err > config.max_reproj_px, "reprojection")

    centers = np.array([c.center if c is not None else np.full(3, np.nan) for c in cameras])
    _track_checks(out, table, config,
                  lambda keep: max_track_angles(points, centers, table, keep))
    return out
