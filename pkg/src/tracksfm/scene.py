"""Core domain types and pinhole projection math.

Conventions used everywhere in the package:

* world-to-camera extrinsics, ``x_cam = R @ x + t``;
* quaternions stored w-first ``(w, x, y, z)`` and canonicalized to ``w >= 0``;
* one focal length per camera, optimized through its natural log;
* principal point fixed at the image center and never optimized;
* pixel coordinates with origin top-left, x rightward, y downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ProjectionError, ReferentialError

# Parameter layout of one camera inside optimizers and Jacobians.
CAMERA_DOF = 8
Q_SLICE = slice(0, 4)
T_SLICE = slice(4, 7)
LOGF_INDEX = 7
PRINCIPAL_PLANE_EPS = 1e-12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def normalize_quaternion(q) -> np.ndarray:
    """Unit-normalize ``q`` and flip it into the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q}")
    # already-unit quaternions are left bit-identical
    if abs(n - 1.0) > 1e-15:
        q = q / n
    if q[0] < 0 or (q[0] == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return q + 0.0  # drops negative zeros


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of unit quaternion(s) ``q`` with shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat`, canonicalized to ``w >= 0``."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    return normalize_quaternion(np.roll(xyzw, 1))


def rotation_angle_deg(R) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    # acos is ill-conditioned near 0; use the skew part there
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return math.degrees(math.atan2(s, c))


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with an 8-DoF optimizable parameterization.

    The optimizable part is ``(q, t, log_f)``; ``pp`` is data. Instances are
    immutable: the quaternion is renormalized and canonicalized on creation.
    """

    q: np.ndarray
    t: np.ndarray
    log_f: float
    pp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen(normalize_quaternion(self.q)))
        object.__setattr__(self, "t", _frozen(self.t))
        object.__setattr__(self, "pp", _frozen(self.pp))
        object.__setattr__(self, "log_f", float(self.log_f))
        if self.t.shape != (3,) or self.pp.shape != (2,):
            raise ValueError("camera needs a 3-vector t and a 2-vector pp")

    @classmethod
    def from_image_size(cls, width: float, height: float, focal: float,
                        q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)) -> "Camera":
        return cls(q=q, t=t, log_f=math.log(focal), pp=(width / 2.0, height / 2.0))

    @classmethod
    def from_rt(cls, R, t, focal: float, pp) -> "Camera":
        return cls(q=rotmat_to_quat(R), t=t, log_f=math.log(focal), pp=pp)

    @classmethod
    def from_vector(cls, v, pp) -> "Camera":
        v = np.asarray(v, dtype=np.float64)
        return cls(q=v[Q_SLICE], t=v[T_SLICE], log_f=v[LOGF_INDEX], pp=pp)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t, [self.log_f]])

    @property
    def focal(self) -> float:
        return math.exp(self.log_f)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @property
    def K(self) -> np.ndarray:
        f = self.focal
        return np.array([[f, 0.0, self.pp[0]], [0.0, f, self.pp[1]], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def extrinsic(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ self.extrinsic

    def with_pose(self, R, t) -> "Camera":
        return Camera(q=rotmat_to_quat(R), t=t, log_f=self.log_f, pp=self.pp)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_batch(q, t, log_f, pp, x):
    """Vectorized projection.

    Args:
        q: (N, 4) unit quaternions.
        t: (N, 3) translations.
        log_f: (N,) log focal lengths.
        pp: (N, 2) principal points.
        x: (N, 3) world points.

    Returns:
        ``(y, depth)`` with shapes (N, 2) and (N,). No singularity check is
        performed; callers inspect ``depth``.
    """
    p = np.einsum("nij,nj->ni", quat_to_rotmat(q), x) + t
    f = np.exp(log_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = f[:, None] * p[:, :2] / p[:, 2:3] + pp
    return y, p[:, 2]


def project(camera: Camera, x) -> tuple[np.ndarray, float]:
    """Project a world point; returns pixel coordinates and camera-frame depth."""
    x = np.asarray(x, dtype=np.float64)
    p = camera.R @ x + camera.t
    if abs(p[2]) < PRINCIPAL_PLANE_EPS:
        raise ProjectionError(f"point {x} lies on the principal plane")
    y = camera.focal * p[:2] / p[2] + camera.pp
    return y, float(p[2])


def _drot_dq(q, x):
    """d(R(q) x)/dq for the homogeneous quaternion rotation, shape (N, 3, 4)."""
    w = q[:, 0]
    v = q[:, 1:]
    vx = np.einsum("ni,ni->n", v, x)
    out = np.empty((q.shape[0], 3, 4))
    out[:, :, 0] = 2 * w[:, None] * x + 2 * np.cross(v, x)
    eye = np.eye(3)
    skew_x = np.zeros((q.shape[0], 3, 3))
    skew_x[:, 0, 1], skew_x[:, 0, 2] = -x[:, 2], x[:, 1]
    skew_x[:, 1, 0], skew_x[:, 1, 2] = x[:, 2], -x[:, 0]
    skew_x[:, 2, 0], skew_x[:, 2, 1] = -x[:, 1], x[:, 0]
    out[:, :, 1:] = (
        -2 * np.einsum("ni,nj->nij", x, v)
        + 2 * vx[:, None, None] * eye
        + 2 * np.einsum("ni,nj->nij", v, x)
        - 2 * w[:, None, None] * skew_x
    )
    return out


def project_jacobian_batch(q, t, log_f, pp, x):
    """Analytic Jacobians of :func:`project_batch`, shape (N, 2, 11).

    Columns are ``[q(4), t(3), log_f, x(3)]``. Quaternion columns are the
    derivative of ``y(q / |q|)``, i.e. projected onto the tangent space of the
    unit sphere at ``q``.
    """
    R = quat_to_rotmat(q)
    p = np.einsum("nij,nj->ni", R, x) + t
    f = np.exp(log_f)
    iz = 1.0 / p[:, 2]
    dy_dp = np.zeros((len(q), 2, 3))
    dy_dp[:, 0, 0] = f * iz
    dy_dp[:, 1, 1] = f * iz
    dy_dp[:, 0, 2] = -f * p[:, 0] * iz * iz
    dy_dp[:, 1, 2] = -f * p[:, 1] * iz * iz

    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    tangent = np.eye(4) - np.einsum("ni,nj->nij", qn, qn)
    J = np.empty((len(q), 2, 11))
    J[:, :, 0:4] = np.einsum("nij,njk,nkl->nil", dy_dp, _drot_dq(q, x), tangent)
    J[:, :, 4:7] = dy_dp
    J[:, :, 7] = (f * iz)[:, None] * p[:, :2]
    J[:, :, 8:11] = np.einsum("nij,njk->nik", dy_dp, R)
    return J


def project_jacobian(camera: Camera, x) -> np.ndarray:
    """2x11 Jacobian of :func:`project` w.r.t. ``[q, t, log_f, x]``."""
    project(camera, x)  # raises on the principal plane
    return project_jacobian_batch(camera.q[None], camera.t[None], np.array([camera.log_f]),
                                  camera.pp[None], np.asarray(x, dtype=np.float64)[None])[0]


class RelativePose(NamedTuple):
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool


def relative_pose(a: Camera, b: Camera) -> RelativePose:
    """Pose of camera ``b`` relative to camera ``a`` (maps a-frame to b-frame).

    The translation is returned as a unit direction; when the baseline
    vanishes it is left as zeros and ``degenerate`` is set.
    """
    R_rel = b.R @ a.R.T
    t = b.t - R_rel @ a.t
    n = float(np.linalg.norm(t))
    if n < 1e-12:
        return RelativePose(R_rel, np.zeros(3), True)
    return RelativePose(R_rel, t / n, False)


# ---------------------------------------------------------------------------
# Scene containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    id: int
    width: int
    height: int


@dataclass(frozen=True)
class TrackObservation:
    frame_id: int
    y: tuple[float, float]
    v: float = 1.0
    sigma: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if min(self.sigma) <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class Track:
    observations: tuple[TrackObservation, ...]
    query_point: tuple[float, float]

    def __post_init__(self):
        if not self.observations:
            raise ValueError("a track needs at least one observation")
        ids = [o.frame_id for o in self.observations]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"track frame ids must be strictly increasing, got {ids}")

    def frame_ids(self) -> list[int]:
        return [o.frame_id for o in self.observations]


@dataclass(eq=False)
class GroundTruth:
    """Synthetic ground truth; only tests and the evaluator read it."""

    cameras: list[Camera]
    points: np.ndarray
    ideal: list[np.ndarray]          # per track, (n_obs, 2) uncorrupted observations
    outlier: list[np.ndarray]        # per track, (n_obs,) bool
    occluded: list[np.ndarray]       # per track, (n_obs,) bool


@dataclass(eq=False)
class ObservationTable:
    """Flat, array-shaped view of every observation in a scene."""

    track: np.ndarray    # (M,) track index
    frame: np.ndarray    # (M,) frame index
    y: np.ndarray        # (M, 2)
    v: np.ndarray        # (M,)
    sigma: np.ndarray    # (M, 2)
    n_tracks: int
    n_frames: int

    def __len__(self):
        return len(self.track)

    def track_slices(self) -> list[slice]:
        """Contiguous slice of each track (observations are grouped by track)."""
        starts = np.searchsorted(self.track, np.arange(self.n_tracks + 1))
        return [slice(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]


@dataclass(eq=False)
class Scene:
    frames: list[Frame]
    tracks: list[Track]
    cameras: Optional[list[Optional[Camera]]] = None
    points: Optional[np.ndarray] = None
    truth: Optional[GroundTruth] = field(default=None, repr=False)

    def __post_init__(self):
        for i, fr in enumerate(self.frames):
            if fr.id != i:
                raise ReferentialError(f"frame ids must be 0..n-1 in order; got {fr.id} at {i}")
        n = len(self.frames)
        for j, tr in enumerate(self.tracks):
            for o in tr.observations:
                if not 0 <= o.frame_id < n:
                    raise ReferentialError(
                        f"track {j} references frame {o.frame_id} of a {n}-frame scene")
        if self.cameras is not None and len(self.cameras) != n:
            raise ValueError("one camera slot per frame is required")
        if self.points is not None and len(self.points) != len(self.tracks):
            raise ValueError("points must align index-for-index with tracks")

    def observation_table(self) -> ObservationTable:
        track, frame, y, v, sigma = [], [], [], [], []
        for j, tr in enumerate(self.tracks):
            for o in tr.observations:
                track.append(j)
                frame.append(o.frame_id)
                y.append(o.y)
                v.append(o.v)
                sigma.append(o.sigma)
        return ObservationTable(
            track=np.asarray(track, dtype=np.int64),
            frame=np.asarray(frame, dtype=np.int64),
            y=np.asarray(y, dtype=np.float64).reshape(-1, 2),
            v=np.asarray(v, dtype=np.float64),
            sigma=np.asarray(sigma, dtype=np.float64).reshape(-1, 2),
            n_tracks=len(self.tracks),
            n_frames=len(self.frames),
        )

    def image_size(self, frame_id: int) -> tuple[int, int]:
        fr = self.frames[frame_id]
        return fr.width, fr.height


def stack_cameras(cameras: Sequence[Camera]):
    """Parameter arrays ``(q, t, log_f, pp)`` for a camera list."""
    q = np.array([c.q for c in cameras]).reshape(-1, 4)
    t = np.array([c.t for c in cameras]).reshape(-1, 3)
    log_f = np.array([c.log_f for c in cameras], dtype=np.float64)
    pp = np.array([c.pp for c in cameras]).reshape(-1, 2)
    return q, t, log_f, pp
