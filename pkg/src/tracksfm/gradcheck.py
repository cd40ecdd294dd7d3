"""Finite-difference checks of the projection Jacobian and of the implicit
gradient of bundle adjustment. Used by the ``gradcheck`` subcommand and the
test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .bundle import BAProblem, LMTolerances, gauge_mask, lm_gradient_wrt_observations, lm_solve
from .errors import GenerationError
from .scene import project_batch, project_jacobian_batch
from .tracks import SyntheticConfig, generate_synthetic

# Converge to the noise floor of the cost; only the step test stops early.
TIGHT = LMTolerances(rel_decrease=0.0, grad_inf=1e-13, cost_atol=0.0)


def random_projection_samples(n: int, seed: int = 0):
    """``(q, t, log_f, pp, x)`` arrays of ``n`` cameras and points in front
    of them at depths in [1, 10]."""
    rng = np.random.default_rng(seed)
    q = Rotation.random(n, random_state=rng).as_quat()[:, [3, 0, 1, 2]]
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    t = rng.uniform(-2.0, 2.0, (n, 3))
    log_f = np.log(rng.uniform(200.0, 2000.0, n))
    pp = rng.uniform(100.0, 600.0, (n, 2))
    depth = rng.uniform(1.0, 10.0, n)
    p_cam = np.c_[rng.uniform(-0.5, 0.5, (n, 2)) * depth[:, None], depth]
    R = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
    x = np.einsum("nji,nj->ni", R, p_cam - t)
    return q, t, log_f, pp, x


def _project_params(v, pp):
    q = v[:, 0:4] / np.linalg.norm(v[:, 0:4], axis=1, keepdims=True)
    return project_batch(q, v[:, 4:7], v[:, 7], pp, v[:, 8:11])[0]


def jacobian_check(n_samples: int = 1000, seed: int = 0, h: float = 1e-6) -> float:
    """Max over samples of ``max|J - J_fd| / max|J_fd|`` for the analytic
    projection Jacobian against central differences."""
    q, t, log_f, pp, x = random_projection_samples(n_samples, seed)
    J = project_jacobian_batch(q, t, log_f, pp, x)
    base = np.concatenate([q, t, log_f[:, None], x], axis=1)
    fd = np.empty_like(J)
    for p in range(11):
        step = h * np.maximum(1.0, np.abs(base[:, p]))
        plus, minus = base.copy(), base.copy()
        plus[:, p] += step
        minus[:, p] -= step
        fd[:, :, p] = (_project_params(plus, pp) - _project_params(minus, pp)) / (2 * step[:, None])
    err = np.abs(J - fd).max(axis=(1, 2)) / np.abs(fd).max(axis=(1, 2))
    return float(err.max())


def small_problem(n_cameras: int = 3, n_points: int = 10, noise_px: float = 0.5,
                  seed: int = 0) -> BAProblem:
    """Ground-truth synthetic problem with noisy observations, not yet solved."""
    for attempt in range(100):
        try:
            scene = generate_synthetic(SyntheticConfig(n_frames=n_cameras, n_tracks=n_points,
                                                       noise_px=noise_px, seed=seed + attempt))
        except GenerationError:
            continue
        table = scene.observation_table()
        if np.bincount(table.track, minlength=n_points).min() >= 2:
            break
    else:
        raise GenerationError("no usable small problem found")
    cams = list(scene.truth.cameras)
    return BAProblem(cams, scene.truth.points, table.frame, table.track, table.y,
                     np.ones(len(table)), gauge_mask(cams, 0))


@dataclass
class IFTCheck:
    rel_error: float      # max |analytic - fd| / max |fd|
    max_abs_fd: float
    step_px: float
    hessian: str


def ift_check(noise_px: float = 0.5, step_px: float = 1e-2, hessian: str = "full",
              seed: int = 0, n_cameras: int = 3, n_points: int = 10) -> IFTCheck:
    """Implicit gradient of a random linear loss against central differences
    of full LM re-solves, one per observation coordinate."""
    problem, _ = lm_solve(small_problem(n_cameras, n_points, noise_px, seed), max_steps=200,
                          tolerances=TIGHT)
    rng = np.random.default_rng(seed)
    g_c = rng.normal(size=(len(problem.cameras), 8))
    g_p = rng.normal(size=problem.points.shape)

    def loss(p: BAProblem) -> float:
        return float(np.sum(np.where(p.frozen, 0.0, p.camera_params()) * g_c)
                     + np.sum(p.points * g_p))

    grad = lm_gradient_wrt_observations(problem, (g_c, g_p), hessian=hessian)
    fd = np.zeros_like(grad)
    for k in range(len(problem.y)):
        for d in range(2):
            vals = []
            for sign in (1.0, -1.0):
                y = problem.y.copy()
                y[k, d] += sign * step_px
                moved = BAProblem(problem.cameras, problem.points, problem.cam_idx,
                                  problem.point_idx, y, problem.weight, problem.frozen)
                vals.append(loss(lm_solve(moved, max_steps=200, tolerances=TIGHT)[0]))
            fd[k, d] = (vals[0] - vals[1]) / (2 * step_px)
    scale = float(np.abs(fd).max())
    return IFTCheck(float(np.abs(grad - fd).max()) / scale, scale, step_px, hessian)
