"""Levenberg-Marquardt bundle adjustment with a Schur-complement solver, and
implicit differentiation of its solution with respect to the observations.

Parameters per camera are ``[q(4), t(3), log_f]``. Quaternion Jacobian
columns are tangent to the unit sphere, so the normal equations are singular
along each free quaternion; a radial term ``c q q^T`` fills that direction
without changing the tangent solution, and quaternions are renormalized after
every accepted step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ContractError, SolverError
from .scene import (CAMERA_DOF, LOGF_INDEX, Q_SLICE, T_SLICE, Camera, normalize_quaternion,
                    project_batch, project_jacobian_batch, stack_cameras)

LAMBDA_INIT = 1e-3
LAMBDA_MIN = 1e-10
LAMBDA_MAX = 1e6
DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class LMTolerances:
    rel_decrease: float = 1e-10   # on 2 consecutive accepted steps
    grad_inf: float = 1e-12
    cost_atol: float = 1e-18      # per observation
    step_rtol: float = 1e-12      # rejected step negligible against the parameters


@dataclass(eq=False)
class BAProblem:
    """Cameras, points and the observations linking them.

    ``weight`` scales each squared residual; an observation of weight 0
    contributes nothing. ``frozen`` is a (C, 8) mask over camera parameters.
    """

    cameras: list[Camera]
    points: np.ndarray
    cam_idx: np.ndarray
    point_idx: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    frozen: np.ndarray
    _pairs: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.cam_idx = np.asarray(self.cam_idx, dtype=np.int64)
        self.point_idx = np.asarray(self.point_idx, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1, 2)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.frozen = np.asarray(self.frozen, dtype=bool)
        C, P, M = len(self.cameras), len(self.points), len(self.cam_idx)
        if self.frozen.shape != (C, CAMERA_DOF):
            raise ContractError(f"frozen mask must be ({C}, {CAMERA_DOF})")
        if not (len(self.point_idx) == len(self.y) == len(self.weight) == M):
            raise ContractError("observation arrays must have equal length")
        if M and (self.cam_idx.min() < 0 or self.cam_idx.max() >= C
                  or self.point_idx.min() < 0 or self.point_idx.max() >= P):
            raise ContractError("observation index out of range")
        if len(np.unique(self.cam_idx * max(P, 1) + self.point_idx)) != M:
            raise ContractError("each (camera, point) pair may be observed once")
        if (self.weight < 0).any():
            raise ContractError("weights must be non-negative")
        if not self.frozen[:, :7].all(axis=1).any():
            raise ContractError("the pose of at least one camera must be frozen")

    @property
    def n_params(self) -> int:
        return CAMERA_DOF * len(self.cameras) + 3 * len(self.points)

    def camera_params(self) -> np.ndarray:
        return np.array([c.to_vector() for c in self.cameras]).reshape(-1, CAMERA_DOF)

    def updated(self, cam_params, points) -> "BAProblem":
        """Copy with new parameters; frozen entries are taken from ``self``."""
        old = self.camera_params()
        cam_params = np.where(self.frozen, old, cam_params)
        cams = []
        for c, v, fz in zip(self.cameras, cam_params, self.frozen):
            if fz[Q_SLICE].all():
                q = c.q
            else:
                q = normalize_quaternion(v[Q_SLICE])
            cams.append(Camera(q=q, t=v[T_SLICE], log_f=v[LOGF_INDEX], pp=c.pp))
        return BAProblem(cams, np.array(points, dtype=np.float64), self.cam_idx, self.point_idx,
                         self.y, self.weight, self.frozen, self._pairs)

    def pairs(self):
        """Observation pairs sharing a point (both orders, including a == b)."""
        if self._pairs is None:
            order = np.argsort(self.point_idx, kind="stable")
            bounds = np.searchsorted(self.point_idx[order], np.arange(len(self.points) + 1))
            pa, pb = [], []
            for j in range(len(self.points)):
                obs = order[bounds[j]:bounds[j + 1]]
                pa.append(np.repeat(obs, len(obs)))
                pb.append(np.tile(obs, len(obs)))
            self._pairs = (np.concatenate(pa) if pa else np.zeros(0, np.int64),
                           np.concatenate(pb) if pb else np.zeros(0, np.int64))
        return self._pairs


def gauge_mask(cameras: Sequence[Camera], anchor: int, scale_camera: Optional[int] = None):
    """Freeze the anchor camera's pose and the largest translation component
    of a second camera (by default the one farthest from the anchor)."""
    frozen = np.zeros((len(cameras), CAMERA_DOF), dtype=bool)
    frozen[anchor, :7] = True
    if len(cameras) > 1:
        if scale_camera is None:
            dist = [np.linalg.norm(c.center - cameras[anchor].center) if i != anchor else -1.0
                    for i, c in enumerate(cameras)]
            scale_camera = int(np.argmax(dist))
        k = int(np.argmax(np.abs(cameras[scale_camera].t)))
        frozen[scale_camera, 4 + k] = True
    return frozen


# ---------------------------------------------------------------------------
# Residuals and Jacobians
# ---------------------------------------------------------------------------

def _gather(problem: BAProblem):
    q, t, log_f, pp = stack_cameras(problem.cameras)
    c, j = problem.cam_idx, problem.point_idx
    return q[c], t[c], log_f[c], pp[c], problem.points[j]


def residuals(problem: BAProblem):
    """Unweighted residuals ``project - y`` (M, 2) and camera depths (M,)."""
    if len(problem.cam_idx) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    y, depth = project_batch(*_gather(problem))
    return y - problem.y, depth


def ba_cost_details(problem: BAProblem):
    """``(cost, excluded)``: the weighted squared cost over finite
    projections, and the indices of observations left out."""
    r, depth = residuals(problem)
    finite = np.isfinite(r).all(axis=1) & (np.abs(depth) >= 1e-12)
    cost = float(np.sum(problem.weight[finite] * np.einsum("ni,ni->n", r[finite], r[finite])))
    return cost, np.flatnonzero(~finite)


def ba_cost(problem: BAProblem) -> float:
    """Sum over observations of ``w * |project(camera, x) - y|^2``."""
    return ba_cost_details(problem)[0]


def cost_resolution(problem: BAProblem) -> float:
    """Bound on the rounding error of :func:`ba_cost`.

    Each residual is a difference of pixel coordinates, so it carries an
    absolute rounding error of a few ulps of ``|y|``; the cost inherits
    ``2 |r| delta`` from each component.
    """
    r, _ = residuals(problem)
    ok = np.isfinite(r).all(axis=1)
    mag = np.abs(problem.y[ok]) + np.abs(r[ok]) + 1.0
    return float(8 * np.finfo(float).eps
                 * np.sum(problem.weight[ok, None] * (np.abs(r[ok]) + 1e-3) * mag))


def reprojection_stats(problem: BAProblem) -> dict:
    """Mean unsquared error and per-axis RMS over positively weighted observations."""
    r, _ = residuals(problem)
    r = r[problem.weight > 0]
    if len(r) == 0:
        return {"mean": 0.0, "rms": 0.0, "count": 0}
    return {"mean": float(np.mean(np.linalg.norm(r, axis=1))),
            "rms": float(np.sqrt(np.mean(r * r))), "count": int(len(r))}


def observation_jacobians(problem: BAProblem) -> np.ndarray:
    """Per-observation 2x11 Jacobians ``[camera(8), point(3)]``."""
    return project_jacobian_batch(*_gather(problem))


def _jacobian_unit(q, t, log_f, pp, x):
    """Jacobian of ``project(q / |q|, ...)`` valid off the unit sphere too."""
    n = np.linalg.norm(q, axis=1, keepdims=True)
    J = project_jacobian_batch(q / n, t, log_f, pp, x)
    J[:, :, 0:4] /= n[:, :, None]
    return J


def _second_order(problem: BAProblem, r, h: float = 1e-6) -> np.ndarray:
    """``sum_d w r_d d^2 y_d`` per observation (M, 11, 11), by central
    differences of the analytic Jacobian."""
    q, t, log_f, pp, x = _gather(problem)
    base = np.concatenate([q, t, log_f[:, None], x], axis=1)
    M = len(base)
    T = np.empty((M, 2, 11, 11))
    for p in range(11):
        step = h * max(1.0, float(np.max(np.abs(base[:, p])))) if M else h
        out = []
        for s in (step, -step):
            v = base.copy()
            v[:, p] += s
            out.append(_jacobian_unit(v[:, 0:4], v[:, 4:7], v[:, 7], pp, v[:, 8:11]))
        T[:, :, :, p] = (out[0] - out[1]) / (2 * step)
    T = 0.5 * (T + T.transpose(0, 1, 3, 2))
    return np.einsum("n,nd,ndij->nij", problem.weight, r, T)


@dataclass
class NormalSystem:
    """Block normal equations ``[[U, W], [W^T, V]]`` and gradient ``(g_c, g_p)``."""

    U: np.ndarray       # (8C, 8C)
    W: np.ndarray       # (M, 8, 3), block of observation k at (cam_idx[k], point_idx[k])
    V: np.ndarray       # (P, 3, 3)
    g_c: np.ndarray     # (8C,)
    g_p: np.ndarray     # (P, 3)
    free: np.ndarray    # (8C,) bool


def build_system(problem: BAProblem, hessian: str = "gauss_newton") -> NormalSystem:
    """Assemble the normal equations at the current parameters.

    ``hessian="full"`` adds the residual-weighted second derivatives of the
    projection, giving the exact Hessian of the cost (halved).
    """
    C, P, M = len(problem.cameras), len(problem.points), len(problem.cam_idx)
    r, _ = residuals(problem)
    w = problem.weight
    J = observation_jacobians(problem) if M else np.zeros((0, 2, 11))
    H = np.einsum("n,ndi,ndj->nij", w, J, J)
    if hessian == "full":
        H = H + _second_order(problem, r)
    elif hessian != "gauss_newton":
        raise ValueError(f"unknown hessian mode {hessian!r}")
    g = np.einsum("n,ndi,nd->ni", w, J, r)

    n_c = CAMERA_DOF * C
    ci = problem.cam_idx
    rows = (ci[:, None] * CAMERA_DOF + np.arange(CAMERA_DOF))
    flat = (rows[:, :, None] * n_c + rows[:, None, :]).ravel()
    U = np.bincount(flat, weights=H[:, :8, :8].ravel(), minlength=n_c * n_c).reshape(n_c, n_c)
    V = np.zeros((P, 3, 3))
    np.add.at(V, problem.point_idx, H[:, 8:, 8:])
    g_c = np.bincount(rows.ravel(), weights=g[:, :8].ravel(), minlength=n_c)
    g_p = np.zeros((P, 3))
    np.add.at(g_p, problem.point_idx, g[:, 8:])
    return NormalSystem(U, H[:, :8, 8:].copy(), V, g_c, g_p, ~problem.frozen.ravel())


def _radial(problem: BAProblem, U: np.ndarray) -> np.ndarray:
    """``c q q^T`` on every camera's quaternion block, ``c`` from its diagonal."""
    R = np.zeros_like(U)
    for i, cam in enumerate(problem.cameras):
        s = slice(CAMERA_DOF * i, CAMERA_DOF * i + 4)
        c = float(np.trace(U[s, s])) / 4.0 + 1.0
        R[s, s] = c * np.outer(cam.q, cam.q)
    return R


def _damped(problem: BAProblem, sys: NormalSystem, lam: float):
    U = sys.U + _radial(problem, sys.U)
    dU = np.maximum(np.diag(U), DIAG_FLOOR)
    U = U + lam * np.diag(dU)
    dV = np.maximum(np.einsum("pii->pi", sys.V), DIAG_FLOOR)
    V = sys.V + lam * np.einsum("pi,ij->pij", dV, np.eye(3))
    return U, V


def schur_solve(problem: BAProblem, sys: NormalSystem, lam: float, b_c, b_p):
    """Solve the damped block system for right-hand side ``(b_c, b_p)`` by
    eliminating the points. Frozen camera parameters get a zero update."""
    U, V = _damped(problem, sys, lam)
    try:
        Vinv = np.linalg.inv(V)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"point block singular: {exc}") from None
    n_c = U.shape[0]
    pi, ci = problem.point_idx, problem.cam_idx
    Y = np.einsum("nij,njk->nik", sys.W, Vinv[pi])          # W V^-1 per observation
    pa, pb = problem.pairs()
    if len(pa):
        blocks = np.einsum("pik,pjk->pij", Y[pa], sys.W[pb])
        ra = ci[pa][:, None] * CAMERA_DOF + np.arange(CAMERA_DOF)
        rb = ci[pb][:, None] * CAMERA_DOF + np.arange(CAMERA_DOF)
        flat = (ra[:, :, None] * n_c + rb[:, None, :]).ravel()
        S = U - np.bincount(flat, weights=blocks.ravel(), minlength=n_c * n_c).reshape(n_c, n_c)
    else:
        S = U.copy()
    rows = ci[:, None] * CAMERA_DOF + np.arange(CAMERA_DOF)
    corr = np.einsum("nij,nj->ni", Y, b_p[pi])
    rhs = b_c - np.bincount(rows.ravel(), weights=corr.ravel(), minlength=n_c)

    free = sys.free
    d_c = np.zeros(n_c)
    Sf = S[np.ix_(free, free)]
    try:
        d_c[free] = cho_solve(cho_factor(Sf), rhs[free])
    except LinAlgError as exc:
        raise SolverError(f"reduced camera system not positive definite: {exc}") from None
    back = np.einsum("nji,nj->ni", sys.W, d_c[rows])
    acc = np.zeros_like(b_p)
    np.add.at(acc, pi, back)
    d_p = np.einsum("pij,pj->pi", Vinv, b_p - acc)
    return d_c, d_p


def dense_solve(problem: BAProblem, sys: NormalSystem, lam: float, b_c, b_p):
    """Reference solve of the same damped system with one dense matrix."""
    U, V = _damped(problem, sys, lam)
    n_c, P = U.shape[0], len(problem.points)
    N = n_c + 3 * P
    A = np.zeros((N, N))
    A[:n_c, :n_c] = U
    for j in range(P):
        A[n_c + 3 * j:n_c + 3 * j + 3, n_c + 3 * j:n_c + 3 * j + 3] = V[j]
    for k in range(len(problem.cam_idx)):
        r0 = CAMERA_DOF * problem.cam_idx[k]
        c0 = n_c + 3 * problem.point_idx[k]
        A[r0:r0 + 8, c0:c0 + 3] += sys.W[k]
        A[c0:c0 + 3, r0:r0 + 8] += sys.W[k].T
    free = np.concatenate([sys.free, np.ones(3 * P, dtype=bool)])
    b = np.concatenate([b_c, b_p.ravel()])
    x = np.zeros(N)
    x[free] = np.linalg.solve(A[np.ix_(free, free)], b[free])
    return x[:n_c], x[n_c:].reshape(P, 3)


def lm_step(problem: BAProblem, lam: float, solver=schur_solve):
    """One damped Gauss-Newton update ``(d_cam (C, 8), d_points (P, 3))``."""
    sys = build_system(problem)
    d_c, d_p = solver(problem, sys, lam, -sys.g_c, -sys.g_p)
    return d_c.reshape(-1, CAMERA_DOF), d_p


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

@dataclass
class LMState:
    lam: float = LAMBDA_INIT
    cost: float = math.inf
    step: int = 0
    converged: bool = False
    reason: str = ""
    history: list = field(default_factory=list)   # (step, lambda, cost, accepted)

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lambda", "cost", "accepted"])
        for step, lam, cost, accepted in self.history:
            w.writerow([step, repr(lam), repr(cost), int(accepted)])
        return buf.getvalue()


def _grad_inf(sys: NormalSystem) -> float:
    g = np.concatenate([sys.g_c[sys.free], sys.g_p.ravel()])
    return float(np.max(np.abs(g))) if g.size else 0.0


def _negligible(problem, d_c, d_p, rtol) -> bool:
    x = np.concatenate([problem.camera_params().ravel(), problem.points.ravel()])
    d = np.concatenate([d_c.ravel(), d_p.ravel()])
    return float(np.max(np.abs(d), initial=0.0)) <= rtol * (1.0 + float(np.max(np.abs(x), initial=0.0)))


def lm_solve(problem: BAProblem, max_steps: int = 30, tolerances: LMTolerances = LMTolerances(),
             lam_init: float = LAMBDA_INIT, on_step=None):
    """Minimize :func:`ba_cost` with Levenberg-Marquardt.

    Every iteration tries one damped step; accepted steps strictly lower the
    cost and divide the damping by 10, rejected ones multiply it by 10. A
    step whose cost change is within :func:`cost_resolution` is accepted
    only if it strictly lowers the gradient norm, since the cost can no
    longer rank it.
    Stops after ``max_steps`` iterations, on a relative decrease below
    ``rel_decrease`` on two consecutive accepted steps, on a gradient
    infinity norm below ``grad_inf``, on a cost below ``cost_atol`` per
    observation, or when a rejected step is below ``step_rtol`` relative to
    the parameters. Returns the refined problem and the final state.
    """
    state = LMState(lam=lam_init, cost=ba_cost(problem))
    floor = cost_resolution(problem)
    atol = tolerances.cost_atol * max(len(problem.cam_idx), 1)
    small = 0
    sys = None
    for it in range(max_steps):
        if state.cost <= atol:
            state.converged, state.reason = True, "cost"
            break
        if sys is None:
            sys = build_system(problem)
            if _grad_inf(sys) < tolerances.grad_inf:
                state.converged, state.reason = True, "gradient"
                break
        state.step = it + 1
        try:
            d_c, d_p = schur_solve(problem, sys, state.lam, -sys.g_c, -sys.g_p)
        except SolverError:
            if state.lam >= LAMBDA_MAX:
                raise
            d_c = None
        accepted = False
        if d_c is not None:
            trial = problem.updated(problem.camera_params() + d_c.reshape(-1, CAMERA_DOF),
                                    problem.points + d_p)
            cost, excluded = ba_cost_details(trial)
            trial_sys = None
            tie_ok = False
            if len(excluded) == 0 and cost >= state.cost and cost - state.cost <= floor:
                # below the rounding floor of the cost, progress shows in the gradient
                trial_sys = build_system(trial)
                tie_ok = _grad_inf(trial_sys) < _grad_inf(sys)
            if len(excluded) == 0 and (cost < state.cost or tie_ok):
                accepted = True
                rel = (state.cost - cost) / state.cost
                problem, state.cost, sys = trial, cost, trial_sys
                state.lam = max(state.lam / 10.0, LAMBDA_MIN)
                small = small + 1 if rel < tolerances.rel_decrease else 0
        if not accepted:
            if d_c is not None and _negligible(problem, d_c, d_p, tolerances.step_rtol):
                state.history.append((state.step, state.lam, state.cost, False))
                state.converged, state.reason = True, "step"
                break
            if state.lam >= LAMBDA_MAX:
                state.history.append((state.step, state.lam, state.cost, False))
                state.reason = "damping_limit"
                break
            state.lam = min(state.lam * 10.0, LAMBDA_MAX)
        state.history.append((state.step, state.lam, state.cost, accepted))
        if on_step is not None:
            on_step(state)
        if small >= 2:
            state.converged, state.reason = True, "relative_decrease"
            break
    else:
        state.reason = state.reason or "max_steps"
    return problem, state


# ---------------------------------------------------------------------------
# Implicit differentiation
# ---------------------------------------------------------------------------

def lm_gradient_wrt_observations(problem: BAProblem, downstream_grad, hessian: str = "full",
                                 grad_tol: float = 1e-8) -> np.ndarray:
    """Gradient of a downstream loss with respect to every observation.

    At a minimum the cost gradient vanishes, so by the implicit function
    theorem ``d solution / d y_k = H^-1 J_k^T w_k`` and the chained gradient
    is ``w_k J_k H^-1 g``. ``downstream_grad`` is ``dL/d(solution)`` as a
    pair ``(cameras (C, 8), points (P, 3))``; frozen entries are ignored.
    ``hessian="gauss_newton"`` drops second-order terms, which is exact only
    for zero-residual problems. Returns an (M, 2) array.
    """
    sys = build_system(problem, hessian=hessian)
    gnorm = _grad_inf(sys)
    if gnorm >= grad_tol:
        raise ContractError(f"problem is not at a minimum (gradient inf-norm {gnorm:.3g})")
    g_c, g_p = downstream_grad
    g_c = np.where(sys.free, np.asarray(g_c, dtype=np.float64).ravel(), 0.0)
    g_p = np.asarray(g_p, dtype=np.float64).reshape(-1, 3)
    z_c, z_p = schur_solve(problem, sys, 0.0, g_c, g_p)
    J = observation_jacobians(problem)
    z = np.concatenate([z_c.reshape(-1, CAMERA_DOF)[problem.cam_idx],
                        z_p[problem.point_idx]], axis=1)
    return problem.weight[:, None] * np.einsum("ndi,ni->nd", J, z)
