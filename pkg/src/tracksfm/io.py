"""Reconstruction outputs: cameras JSON, binary PLY clouds, COLMAP text.

All files use the world-to-camera convention ``x_cam = R x + t`` with
quaternions ``(w, x, y, z)``; coordinates are pixels in images and scene
units in space; angles are degrees.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError
from .scene import Camera, Scene, project_batch, stack_cameras
from .tracks import FORMAT_VERSION, camera_record, check_version

PLY_VERTEX = struct.Struct("<dddi")


def fmt(x: float) -> str:
    """Shortest stable text for a float (15 significant digits, no ``-0``)."""
    s = format(float(x) + 0.0, ".15g")
    return "0" if s == "-0" else s


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    check_version(doc, what)
    return doc


# ---------------------------------------------------------------------------
# cameras.json
# ---------------------------------------------------------------------------

def save_cameras(scene: Scene, path) -> None:
    """One record per frame; unregistered frames are ``null``."""
    cams = []
    for fr, cam in zip(scene.frames, scene.cameras or [None] * len(scene.frames)):
        if cam is None:
            cams.append(None)
        else:
            rec = camera_record(cam)
            rec.update(frame=fr.id, width=fr.width, height=fr.height)
            cams.append(rec)
    write_json(path, {"format_version": FORMAT_VERSION, "convention": "world_to_camera",
                      "cameras": cams})


def load_cameras(path) -> list[Optional[Camera]]:
    doc = read_json(path, "camera file")
    out = []
    for i, rec in enumerate(doc.get("cameras", [])):
        if rec is None:
            out.append(None)
            continue
        try:
            out.append(Camera(q=rec["qvec"], t=rec["tvec"], log_f=math.log(rec["focal"]),
                              pp=rec["pp"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: camera {i}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def write_ply(points, path) -> int:
    """Binary little-endian PLY of the finite points, each tagged with its
    track index. Returns the number of vertices written."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.flatnonzero(np.isfinite(points).all(axis=1))
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(keep)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              "property int track\nend_header\n")
    body = b"".join(PLY_VERTEX.pack(*points[j], int(j)) for j in keep)
    Path(path).write_bytes(header.encode("ascii") + body)
    return len(keep)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_ply`: ``(points (K, 3), track ids (K,))``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ParseError(f"{path}: only binary little-endian PLY is supported")
    n = next((int(h.split()[2]) for h in header if h.startswith("element vertex")), None)
    if n is None:
        raise ParseError(f"{path}: no vertex element")
    body = data[end + len(b"end_header\n"):]
    if len(body) != n * PLY_VERTEX.size:
        raise ParseError(f"{path}: expected {n} vertices")
    rec = np.frombuffer(body, dtype=np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                              ("track", "<i4")]))
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1), rec["track"].astype(np.int64)


def points_from_ply(path, n_tracks: int) -> np.ndarray:
    """Track-aligned (n_tracks, 3) array with NaN for absent points."""
    pts, ids = read_ply(path)
    out = np.full((n_tracks, 3), np.nan)
    if len(ids) and (ids.min() < 0 or ids.max() >= n_tracks):
        raise ParseError(f"{path}: track id out of range for {n_tracks} tracks")
    out[ids] = pts
    return out


# ---------------------------------------------------------------------------
# COLMAP text
# ---------------------------------------------------------------------------

def export_colmap(scene: Scene, directory, keep: Optional[Sequence[bool]] = None) -> list[int]:
    """Write ``cameras.txt``, ``images.txt`` and ``points3D.txt``.

    One SIMPLE_PINHOLE camera per registered frame; image and camera ids are
    ``frame + 1`` and point ids ``track + 1``. ``keep`` optionally masks the
    observations (in :meth:`Scene.observation_table` order) that link points
    to images. Returns the unregistered frames, which are omitted.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cams = scene.cameras or [None] * len(scene.frames)
    points = (np.full((len(scene.tracks), 3), np.nan) if scene.points is None
              else np.asarray(scene.points, dtype=np.float64))
    table = scene.observation_table()
    registered = np.array([c is not None for c in cams])
    link = registered[table.frame] & np.isfinite(points[table.track]).all(axis=1)
    if keep is not None:
        link &= np.asarray(keep, dtype=bool)

    err = np.full(len(table), np.nan)
    idx = np.flatnonzero(link)
    if len(idx):
        q, t, log_f, pp = stack_cameras([c if c is not None else cams[np.argmax(registered)]
                                         for c in cams])
        f = table.frame[idx]
        y, _ = project_batch(q[f], t[f], log_f[f], pp[f], points[table.track[idx]])
        err[idx] = np.linalg.norm(y - table.y[idx], axis=1)

    lines = ["# Camera list with one line of data per camera:",
             "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
             f"# Number of cameras: {int(registered.sum())}"]
    for fr, c in zip(scene.frames, cams):
        if c is not None:
            lines.append(f"{fr.id + 1} SIMPLE_PINHOLE {fr.width} {fr.height} "
                         f"{fmt(c.focal)} {fmt(c.pp[0])} {fmt(c.pp[1])}")
    (d / "cameras.txt").write_text("\n".join(lines) + "\n")

    point2d_index = np.full(len(table), -1)
    lines = ["# Image list with two lines of data per image:",
             "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
             "#   POINTS2D[] as (X, Y, POINT3D_ID)",
             f"# Number of images: {int(registered.sum())}"]
    for fr, c in zip(scene.frames, cams):
        if c is None:
            continue
        vals = " ".join(fmt(v) for v in list(c.q) + list(c.t))
        lines.append(f"{fr.id + 1} {vals} {fr.id + 1} frame_{fr.id:05d}")
        obs = np.flatnonzero(table.frame == fr.id)
        items = []
        for k, o in enumerate(obs):
            point2d_index[o] = k
            pid = int(table.track[o]) + 1 if link[o] else -1
            items.append(f"{fmt(table.y[o, 0])} {fmt(table.y[o, 1])} {pid}")
        lines.append(" ".join(items))
    (d / "images.txt").write_text("\n".join(lines) + "\n")

    lines = ["# 3D point list with one line of data per point:",
             "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    body = []
    for j in range(len(scene.tracks)):
        obs = idx[table.track[idx] == j]
        if len(obs) == 0:
            continue
        track = " ".join(f"{int(table.frame[o]) + 1} {int(point2d_index[o])}" for o in obs)
        xyz = " ".join(fmt(v) for v in points[j])
        body.append(f"{j + 1} {xyz} 128 128 128 {fmt(np.mean(err[obs]))} {track}")
    lines.append(f"# Number of points: {len(body)}")
    (d / "points3D.txt").write_text("\n".join(lines + body) + "\n")
    return [i for i, c in enumerate(cams) if c is None]


def _data_lines(path):
    return [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]


def import_colmap(directory):
    """Read the text model written by :func:`export_colmap`.

    Returns ``(cameras, points)``: cameras keyed by image id, points keyed
    by point id. Only SIMPLE_PINHOLE and PINHOLE with equal focals are read.
    """
    d = Path(directory)
    intr = {}
    for ln in _data_lines(d / "cameras.txt"):
        parts = ln.split()
        if not parts:
            continue
        cid, model = int(parts[0]), parts[1]
        p = [float(v) for v in parts[4:]]
        if model == "SIMPLE_PINHOLE":
            intr[cid] = (p[0], (p[1], p[2]))
        elif model == "PINHOLE" and p[0] == p[1]:
            intr[cid] = (p[0], (p[2], p[3]))
        else:
            raise ParseError(f"unsupported camera model {model}")
    cameras = {}
    lines = _data_lines(d / "images.txt")
    for ln in lines[0::2]:
        parts = ln.split()
        if not parts:
            continue
        iid = int(parts[0])
        q = [float(v) for v in parts[1:5]]
        t = [float(v) for v in parts[5:8]]
        focal, pp = intr[int(parts[8])]
        cameras[iid] = Camera(q=q, t=t, log_f=math.log(focal), pp=pp)
    points = {}
    for ln in _data_lines(d / "points3D.txt"):
        parts = ln.split()
        if parts:
            points[int(parts[0])] = np.array([float(v) for v in parts[1:4]])
    return cameras, points
