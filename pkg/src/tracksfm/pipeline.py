"""Reconstruction driver: initialize, filter, triangulate and bundle-adjust,
repeated over several query frames until the reprojection error is sub-pixel."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bundle import BAProblem, LMTolerances, gauge_mask, lm_solve, reprojection_stats
from .epipolar import INLIER_FACTOR, initialize_cameras
from .errors import ReconstructionError
from .filtering import (FilterConfig, FilterMask, filter_observations, filter_reprojection,
                        reprojection_errors)
from .scene import Scene
from .triangulation import triangulate_table

FORMAT_VERSION = "1.0"


@dataclass(frozen=True)
class PipelineConfig:
    filter: FilterConfig = FilterConfig()
    max_steps: int = 30
    max_rounds: int = 3
    subpixel_px: float = 1.0
    seed: int = 0
    query: Optional[int] = None
    weighted_dlt: bool = False
    inverse_variance_weights: bool = False
    inlier_factor: float = INLIER_FACTOR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter"] = self.filter.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d.pop("format_version", None)
        filt = FilterConfig.from_dict(d.pop("filter", {}) or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(filter=filt, **d)


@dataclass
class RoundReport:
    query: int
    registered: list
    unregistered: dict
    filters: dict
    ba: list
    init_mean_px: float
    mean_px: float
    rms_px: float
    n_points: int
    n_observations: int
    failure: str = ""


@dataclass
class ReconstructionReport:
    rounds: list = field(default_factory=list)
    best_round: int = -1
    discarded_tracks: list = field(default_factory=list)
    unregistered_frames: dict = field(default_factory=dict)
    mask: Optional[FilterMask] = field(default=None, repr=False)   # final round's filter mask

    @property
    def best(self) -> RoundReport:
        return self.rounds[self.best_round]

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "best_round": self.best_round,
                "rounds": [asdict(r) for r in self.rounds],
                "discarded_tracks": self.discarded_tracks,
                "unregistered_frames": {str(k): v for k, v in self.unregistered_frames.items()}}


def frame_visibility(scene: Scene, v_min: float = 0.0) -> np.ndarray:
    """(frames, tracks) bool: track observed in frame with ``v >= v_min``."""
    vis = np.zeros((len(scene.frames), len(scene.tracks)), dtype=bool)
    for j, tr in enumerate(scene.tracks):
        for o in tr.observations:
            if not o.v < v_min and o.v > 0:
                vis[o.frame_id, j] = True
    return vis


def select_query_frame(scene: Scene, override: Optional[int] = None) -> int:
    """The frame observing the most tracks (lowest id on ties), unless overridden."""
    if len(scene.frames) < 2:
        raise ReconstructionError("at least two frames are required")
    if override is not None:
        if not 0 <= override < len(scene.frames):
            raise ReconstructionError(f"query override {override} is not a frame")
        return int(override)
    return int(np.argmax(frame_visibility(scene).sum(axis=1)))


def next_query(scene: Scene, previous: int, used) -> Optional[int]:
    """Unused frame sharing the fewest tracks with ``previous`` (lowest id on ties)."""
    vis = frame_visibility(scene)
    covis = (vis & vis[previous]).sum(axis=1)
    candidates = [i for i in range(len(scene.frames)) if i not in used]
    if not candidates:
        return None
    return min(candidates, key=lambda i: (covis[i], i))


def _build_problem(table, cameras, points, keep, query, weights):
    frames = [i for i, c in enumerate(cameras) if c is not None]
    slot = {f: k for k, f in enumerate(frames)}
    tracks = np.unique(table.track[keep])
    pslot = np.full(table.n_tracks, -1)
    pslot[tracks] = np.arange(len(tracks))
    idx = np.flatnonzero(keep)
    cams = [cameras[f] for f in frames]
    frozen = gauge_mask(cams, slot[query])
    problem = BAProblem(cams, points[tracks], [slot[f] for f in table.frame[idx]],
                        pslot[table.track[idx]], table.y[idx], weights[idx], frozen)
    return problem, frames, tracks


def _unpack(problem, frames, tracks, n_frames, n_tracks):
    cameras = [None] * n_frames
    for k, f in enumerate(frames):
        cameras[f] = problem.cameras[k]
    points = np.full((n_tracks, 3), np.nan)
    points[tracks] = problem.points
    return cameras, points


def _triangulate_robust(table, cameras, mask: FilterMask, max_px: float, weighted: bool,
                        max_iters: int = 10):
    """DLT per track, repeatedly dropping each track's worst observation
    while it reprojects more than ``max_px`` away."""
    for _ in range(max_iters):
        points, _, ok = triangulate_table(table, cameras, mask.keep, weighted=weighted)
        mask.drop_tracks(table, ~ok, "triangulation")
        err, _ = reprojection_errors(table, cameras, points)
        err = np.where(mask.keep & np.isfinite(err), err, -np.inf)
        order = np.lexsort((-err, table.track))
        first = np.ones(len(order), dtype=bool)
        first[1:] = table.track[order][1:] != table.track[order][:-1]
        worst = order[first]
        worst = worst[err[worst] > max_px]
        if len(worst) == 0:
            break
        drop = np.zeros(len(table), dtype=bool)
        drop[worst] = True
        mask.drop(drop, "reprojection")
    return points


def _check_alive(mask: FilterMask, stage: str):
    if not mask.keep.any():
        raise ReconstructionError(f"no observations survive {stage}: {mask.summary()}")


def run_round(scene: Scene, query: int, config: PipelineConfig):
    """One pass of the reconstruction with a fixed query frame.

    Returns ``(cameras, points, mask, report)``.
    """
    init = initialize_cameras(scene, query, seed=config.seed, v_min=config.filter.v_min,
                              inlier_factor=config.inlier_factor)
    cameras = init.cameras
    registered = [i for i, c in enumerate(cameras) if c is not None]
    if len(registered) < 2:
        raise ReconstructionError(f"only {len(registered)} frame(s) registered: {init.failures}")
    table = scene.observation_table()
    fcfg = config.filter
    filters = {}

    mask = filter_observations(scene, cameras, fcfg, query_frame=query)
    filters["observations"] = mask.summary()
    _check_alive(mask, "observation filtering")

    points = _triangulate_robust(table, cameras, mask, fcfg.max_reproj_px, config.weighted_dlt)
    mask = filter_reprojection(scene, cameras, points, fcfg, mask)
    filters["initial_reprojection"] = mask.summary()
    _check_alive(mask, "initial reprojection filtering")

    if config.inverse_variance_weights:
        weights = 1.0 / np.mean(table.sigma ** 2, axis=1)
    else:
        weights = np.ones(len(table))
    ba_reports = []
    tol = LMTolerances()
    problem, frames, tracks = _build_problem(table, cameras, points, mask.keep, query, weights)
    init_mean = reprojection_stats(problem)["mean"]
    for stage in range(2):
        problem, state = lm_solve(problem, max_steps=config.max_steps, tolerances=tol)
        stats = reprojection_stats(problem)
        ba_reports.append({"steps": state.step, "reason": state.reason, "cost": state.cost,
                           "mean_px": stats["mean"], "rms_px": stats["rms"]})
        cameras, points = _unpack(problem, frames, tracks, len(scene.frames), len(scene.tracks))
        if stage == 0:
            mask = filter_reprojection(scene, cameras, points, fcfg, mask)
            filters["refined_reprojection"] = mask.summary()
            _check_alive(mask, "refined reprojection filtering")
            problem, frames, tracks = _build_problem(table, cameras, points, mask.keep, query,
                                                     weights)

    stats = reprojection_stats(problem)
    unregistered = {int(k): v for k, v in sorted(init.failures.items())}
    report = RoundReport(query=query, registered=registered, unregistered=unregistered,
                         filters=filters, ba=ba_reports, init_mean_px=init_mean,
                         mean_px=stats["mean"], rms_px=stats["rms"], n_points=len(tracks),
                         n_observations=stats["count"])
    return cameras, points, mask, report


def reconstruct(scene: Scene, config: PipelineConfig = PipelineConfig()):
    """Reconstruct cameras and points from the tracks of ``scene``.

    Rounds are repeated with a new query frame (the unused frame least
    covisible with the previous query) while the mean reprojection error is
    not below ``config.subpixel_px``, up to ``config.max_rounds``. The round
    with the lowest mean reprojection error is returned as a new Scene (NaN
    points for discarded tracks, ``None`` cameras for unregistered frames)
    together with a :class:`ReconstructionReport`.
    """
    if not scene.tracks:
        raise ReconstructionError("scene has no tracks")
    report = ReconstructionReport()
    query = select_query_frame(scene, config.query)
    used = []
    best = None
    for _ in range(config.max_rounds):
        used.append(query)
        try:
            cameras, points, mask, rr = run_round(scene, query, config)
        except ReconstructionError as exc:
            rr = RoundReport(query=query, registered=[], unregistered={}, filters={}, ba=[],
                             init_mean_px=math.nan, mean_px=math.inf, rms_px=math.inf,
                             n_points=0, n_observations=0, failure=str(exc))
            cameras = None
        report.rounds.append(rr)
        if cameras is not None and (best is None or rr.mean_px < best[0].mean_px):
            best = (rr, cameras, points, mask, len(report.rounds) - 1)
        if best is not None and best[0].mean_px < config.subpixel_px:
            break
        query = next_query(scene, query, used)
        if query is None:
            break
    if best is None:
        raise ReconstructionError("; ".join(r.failure for r in report.rounds))
    rr, cameras, points, mask, k = best
    report.best_round = k
    report.discarded_tracks = [int(j) for j in np.flatnonzero(~mask.track_keep)]
    report.unregistered_frames = dict(rr.unregistered)
    report.mask = mask
    out = Scene(frames=scene.frames, tracks=scene.tracks, cameras=cameras, points=points,
                truth=scene.truth)
    return out, report
