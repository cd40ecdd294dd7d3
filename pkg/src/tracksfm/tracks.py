"""Track file I/O and the synthetic ground-truth scene generator.

Track file layout (JSON, pixels, origin top-left, x right, y down)::

    {
    "format_version": "1.0",
    "frames": [
    {"id": 0, "width": 1024, "height": 768},
    ...
    ],
    "tracks": [
    {"query": [x, y], "obs": [{"frame": 0, "x": .., "y": .., "v": .., "sx": .., "sy": ..}, ...]},
    ...
    ],
    "ground_truth": {...}        # optional, written by the generator only
    }

One frame or track per line, so files written by :func:`save_tracks` are
diff-friendly and reload byte-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import GenerationError, ParseError, ReferentialError
from .scene import (Camera, Frame, GroundTruth, Scene, Track, TrackObservation,
                    project_batch, stack_cameras)

FORMAT_VERSION = "1.0"
DEFAULT_SIGMA = 0.5
DEFAULT_VISIBILITY = 1.0


def check_version(doc: dict, what: str) -> None:
    version = doc.get("format_version")
    if not isinstance(version, str):
        raise ParseError(f"{what}: missing format_version")
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise ParseError(f"{what}: unsupported format_version {version!r}")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f"{where}: expected a finite number, got {value!r}")
    return float(value)


def _parse_track(rec, j: int, n_frames: int) -> Track:
    where = f"track {j}"
    if not isinstance(rec, dict) or not isinstance(rec.get("obs"), list):
        raise ParseError(f"{where}: expected an object with an 'obs' list")
    obs = []
    for k, o in enumerate(rec["obs"]):
        w = f"{where}, observation {k}"
        if not isinstance(o, dict):
            raise ParseError(f"{w}: expected an object")
        try:
            frame = o["frame"]
            x, y = _number(o["x"], w), _number(o["y"], w)
        except KeyError as exc:
            raise ParseError(f"{w}: missing field {exc}") from None
        if isinstance(frame, bool) or not isinstance(frame, int):
            raise ParseError(f"{w}: frame must be an integer")
        if not 0 <= frame < n_frames:
            raise ReferentialError(f"{w}: frame_id {frame} not in a {n_frames}-frame inventory")
        v = _number(o.get("v", DEFAULT_VISIBILITY), w)
        sx = _number(o.get("sx", DEFAULT_SIGMA), w)
        sy = _number(o.get("sy", DEFAULT_SIGMA), w)
        if sx <= 0 or sy <= 0:
            raise ParseError(f"{w}: sigma must be positive")
        obs.append(TrackObservation(frame, (x, y), v, (sx, sy)))
    try:
        if "query" in rec:
            qx, qy = (_number(c, where) for c in rec["query"])
        elif obs:
            qx, qy = obs[0].y
        else:
            raise ParseError(f"{where}: empty track")
        return Track(tuple(obs), (qx, qy))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from None


def _parse_camera(rec, where: str) -> Camera:
    try:
        return Camera(q=rec["qvec"], t=rec["tvec"], log_f=math.log(rec["focal"]), pp=rec["pp"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: bad camera record ({exc})") from None


def parse_tracks(doc: dict) -> Scene:
    """Build a :class:`Scene` from an already-decoded track document."""
    if not isinstance(doc, dict):
        raise ParseError("track file: top level must be an object")
    check_version(doc, "track file")
    frames = []
    for i, fr in enumerate(doc.get("frames", [])):
        try:
            frames.append(Frame(int(fr["id"]), int(fr["width"]), int(fr["height"])))
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"frame record {i} is malformed") from None
        if frames[-1].id != i:
            raise ParseError(f"frame record {i} has id {frames[-1].id}; ids must be 0..n-1")
        if frames[-1].width <= 0 or frames[-1].height <= 0:
            raise ParseError(f"frame {i}: image size must be positive")
    tracks = [_parse_track(rec, j, len(frames)) for j, rec in enumerate(doc.get("tracks", []))]
    scene = Scene(frames=frames, tracks=tracks)
    gt = doc.get("ground_truth")
    if gt is not None:
        cams = [_parse_camera(c, f"ground_truth camera {i}") for i, c in enumerate(gt["cameras"])]
        scene.truth = GroundTruth(
            cameras=cams,
            points=np.asarray(gt["points"], dtype=np.float64).reshape(-1, 3),
            ideal=[np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in gt["ideal"]],
            outlier=[np.asarray(a, dtype=bool) for a in gt["outlier"]],
            occluded=[np.asarray(a, dtype=bool) for a in gt["occluded"]],
        )
    return scene


def load_tracks(path) -> Scene:
    """Read a track file; missing ``v`` defaults to 1.0 and missing sigma to 0.5 px."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return parse_tracks(doc)


def camera_record(cam: Camera) -> dict:
    return {"qvec": cam.q.tolist(), "tvec": cam.t.tolist(), "focal": cam.focal,
            "pp": cam.pp.tolist()}


def _track_record(tr: Track) -> dict:
    return {
        "query": [tr.query_point[0], tr.query_point[1]],
        "obs": [{"frame": o.frame_id, "x": o.y[0], "y": o.y[1], "v": o.v,
                 "sx": o.sigma[0], "sy": o.sigma[1]} for o in tr.observations],
    }


def dumps_tracks(scene: Scene, include_truth: bool = True) -> str:
    lines = ["{", f'"format_version": {json.dumps(FORMAT_VERSION)},', '"frames": [']
    frames = [json.dumps({"id": f.id, "width": f.width, "height": f.height}) for f in scene.frames]
    lines.append(",\n".join(frames))
    lines.append("],")
    lines.append('"tracks": [')
    lines.append(",\n".join(json.dumps(_track_record(t)) for t in scene.tracks))
    truth = scene.truth if include_truth else None
    if truth is None:
        lines.append("]")
    else:
        lines.append("],")
        gt = {
            "convention": "world_to_camera",
            "cameras": [camera_record(c) for c in truth.cameras],
            "points": truth.points.tolist(),
            "ideal": [a.tolist() for a in truth.ideal],
            "outlier": [a.astype(int).tolist() for a in truth.outlier],
            "occluded": [a.astype(int).tolist() for a in truth.occluded],
        }
        lines.append(f'"ground_truth": {json.dumps(gt)}')
    lines.append("}")
    return "\n".join(line for line in lines if line) + "\n"


def save_tracks(scene: Scene, path, include_truth: bool = True) -> None:
    Path(path).write_text(dumps_tracks(scene, include_truth))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_frames: int = 10
    n_tracks: int = 300
    noise_px: float = 0.0
    outlier_frac: float = 0.0
    occlusion_frac: float = 0.0
    seed: int = 0
    image_size: tuple[int, int] = (1024, 768)
    focal_px: Optional[float] = None    # None: 1.2 * longer image side
    orbit_radius: tuple[float, float] = (1.6, 2.0)
    orbit_arc_deg: float = 70.0
    box_half_extent: float = 0.5

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.n_tracks < 8:
            raise ValueError("n_tracks must be >= 8")
        for name in ("outlier_frac", "occlusion_frac"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.outlier_frac + self.occlusion_frac >= 1.0:
            raise ValueError("outlier_frac + occlusion_frac must stay below 1")
        if self.noise_px < 0:
            raise ValueError("noise_px must be non-negative")

    @property
    def focal(self) -> float:
        if self.focal_px is not None:
            return float(self.focal_px)
        return 1.2 * max(self.image_size)


def _look_at(center: np.ndarray, target: np.ndarray, roll: float) -> np.ndarray:
    """World-to-camera rotation whose optical (+z) axis points at ``target``."""
    z = target - center
    z /= np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows are camera axes in world coordinates
    c, s = math.cos(roll), math.sin(roll)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ R


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate_synthetic(config: SyntheticConfig) -> Scene:
    """Random orbit of cameras around a unit box of points, with corrupted tracks.

    Frame 0 is the query frame: every track starts there, and its
    observations are never replaced by outliers nor marked occluded (they are
    the query points themselves). Gaussian noise applies to all observations.
    """
    rng = np.random.default_rng(config.seed)
    w, h = config.image_size
    focal = config.focal
    pp = np.array([w / 2.0, h / 2.0])
    n, m = config.n_frames, config.n_tracks

    arc = math.radians(config.orbit_arc_deg)
    azimuths = np.linspace(-arc / 2, arc / 2, n) + rng.uniform(-0.1, 0.1, n) * arc / max(n - 1, 1)
    azimuths = rng.permutation(azimuths)
    cameras = []
    for i in range(n):
        radius = rng.uniform(*config.orbit_radius)
        elev = rng.uniform(-0.25, 0.25)
        center = radius * np.array([math.sin(azimuths[i]) * math.cos(elev), math.sin(elev),
                                    -math.cos(azimuths[i]) * math.cos(elev)])
        target = rng.uniform(-0.1, 0.1, 3)
        R = _look_at(center, target, rng.uniform(-0.1, 0.1))
        cameras.append(Camera.from_rt(R, -R @ center, focal, pp))
    q, t, log_f, ppa = stack_cameras(cameras)

    def project_all(x):
        k = len(x)
        y, d = project_batch(np.repeat(q, k, 0), np.repeat(t, k, 0), np.repeat(log_f, k),
                             np.repeat(ppa, k, 0), np.tile(x, (n, 1)))
        return y.reshape(n, k, 2), d.reshape(n, k)

    # rejection-sample points until each is in front of and inside frame 0
    points = np.empty((0, 3))
    while len(points) < m:
        cand = rng.uniform(-config.box_half_extent, config.box_half_extent, (2 * m, 3))
        y, d = project_all(cand)
        ok = (d[0] > 0) & np.all((y[0] >= 0) & (y[0] < [w, h]), axis=1)
        points = np.vstack([points, cand[ok]])[:m]
    y_ideal, depth = project_all(points)
    in_view = (depth > 0) & np.all((y_ideal >= 0) & (y_ideal < [w, h]), axis=2)  # (n, m)

    track_frames = [np.flatnonzero(in_view[:, j]) for j in range(m)]
    ideal = [y_ideal[f, j] for j, f in enumerate(track_frames)]
    noisy = [a + rng.normal(0.0, config.noise_px, a.shape) if config.noise_px > 0 else a.copy()
             for a in ideal]

    # corruption acts on non-query observations only
    slots = [(j, k) for j, f in enumerate(track_frames) for k in range(1, len(f))]
    n_out = _round_half_up(config.outlier_frac * len(slots))
    n_occ = _round_half_up(config.occlusion_frac * len(slots))
    order = rng.permutation(len(slots))
    outlier = [np.zeros(len(f), dtype=bool) for f in track_frames]
    occluded = [np.zeros(len(f), dtype=bool) for f in track_frames]
    for s in order[:n_out]:
        j, k = slots[s]
        outlier[j][k] = True
        noisy[j][k] = rng.uniform([0.0, 0.0], [w, h])
    for s in order[n_out:n_out + n_occ]:
        j, k = slots[s]
        occluded[j][k] = True

    sigma = max(config.noise_px, 0.25)
    tracks = []
    visible = np.zeros(n, dtype=int)
    for j, frames in enumerate(track_frames):
        obs = tuple(
            TrackObservation(int(f), (float(noisy[j][k, 0]), float(noisy[j][k, 1])),
                             0.0 if occluded[j][k] else 1.0, (sigma, sigma))
            for k, f in enumerate(frames))
        tracks.append(Track(obs, obs[0].y))
        visible[frames[~occluded[j]]] += 1
    if visible.min() < 8:
        bad = int(np.argmin(visible))
        raise GenerationError(f"frame {bad} sees only {visible[bad]} visible tracks (need 8)")

    truth = GroundTruth(cameras=cameras, points=points, ideal=ideal, outlier=outlier,
                        occluded=occluded)
    return Scene(frames=[Frame(i, w, h) for i in range(n)], tracks=tracks, truth=truth)
