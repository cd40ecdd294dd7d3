import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from tracksfm.errors import ContractError
from tracksfm.metrics import (accuracy_at, align_cameras, auc, auc_curve,
                              cloud_accuracy_completeness, pairwise_errors, transform_points,
                              umeyama)
from tracksfm.scene import Camera


def similarity_moved(cams, seed, scale):
    rng = np.random.default_rng(seed)
    Rg = Rotation.random(random_state=rng).as_matrix()
    tg = rng.normal(size=3)
    return [c.with_pose(c.R @ Rg.T, scale * c.t - c.R @ Rg.T @ tg) for c in cams]


def test_perfect_prediction_has_zero_error(clean_scene):
    gt = clean_scene.truth.cameras
    errs = pairwise_errors(gt, gt)
    assert len(errs) == len(gt) * (len(gt) - 1) // 2
    assert max(max(e.rre, e.rte) for e in errs) < 1e-5
    assert auc(errs, 30) == pytest.approx(100.0, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20.0))
def test_errors_are_invariant_to_a_similarity_of_the_prediction(clean_scene, seed, scale):
    gt = clean_scene.truth.cameras
    rng = np.random.default_rng(seed)
    pred = [c.with_pose(Rotation.from_rotvec(rng.normal(0, 0.02, 3)).as_matrix() @ c.R,
                        c.t + rng.normal(0, 0.05, 3)) for c in gt]
    a = pairwise_errors(pred, gt)
    b = pairwise_errors(similarity_moved(pred, seed, scale), gt)
    for x, y in zip(a, b):
        assert x.rre == pytest.approx(y.rre, abs=1e-6)
        assert x.rte == pytest.approx(y.rte, abs=1e-6)


def test_constructed_rotation_error():
    a = Camera.from_image_size(100, 100, 100.0)
    b = Camera.from_image_size(100, 100, 100.0, t=(1.0, 0.0, 0.0))
    tilt = Rotation.from_euler("x", 5.0, degrees=True).as_matrix()
    moved = b.with_pose(tilt @ b.R, b.t)
    (e,) = pairwise_errors([a, moved], [a, b])
    assert e.rre == pytest.approx(5.0, abs=1e-9)
    assert e.rte == pytest.approx(0.0, abs=1e-9)


def test_constructed_translation_error():
    a = Camera.from_image_size(100, 100, 100.0)
    b = Camera.from_image_size(100, 100, 100.0, t=(1.0, 0.0, 0.0))
    c = Camera.from_image_size(100, 100, 100.0, t=(1.0, 1.0, 0.0))
    (e,) = pairwise_errors([a, c], [a, b])
    assert e.rre == pytest.approx(0.0, abs=1e-9) and e.rte == pytest.approx(45.0)


def test_unregistered_pairs_count_as_failures(clean_scene):
    gt = clean_scene.truth.cameras
    pred = list(gt)
    pred[2] = None
    errs = pairwise_errors(pred, gt)
    bad = [e for e in errs if 2 in (e.i, e.j)]
    assert len(bad) == len(gt) - 1
    assert all(not e.registered and e.rre == 180.0 for e in bad)


def test_degenerate_ground_truth_baseline_skips_translation():
    a = Camera.from_image_size(100, 100, 100.0)
    b = a.with_pose(Rotation.from_euler("y", 10, degrees=True).as_matrix(), np.zeros(3))
    (e,) = pairwise_errors([a, b], [a, b])
    assert e.rte_skipped and e.rte == 0.0


def test_mismatched_camera_counts_raise(clean_scene):
    gt = clean_scene.truth.cameras
    with pytest.raises(ContractError):
        pairwise_errors(gt[:-1], gt)


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------

def auc_by_sampling(errors, T, n=100_000):
    e = np.array([max(a, b) for a, b in errors])
    th = (np.arange(n) + 0.5) * T / n
    return 100.0 * float(np.mean((e[None, :] < th[:, None]).mean(axis=1)))


@pytest.mark.parametrize("errors,T,expected", [
    ([(0.0, 0.0)] * 4, 10, 100.0),
    ([(10.0, 1.0), (12.0, 40.0)], 10, 0.0),
    ([(1.0, 0.5), (2.0, 4.0), (11.0, 3.0)], 10, 50.0),
    ([(5.0, 5.0)], 20, 75.0),
])
def test_auc_examples(errors, T, expected):
    assert auc(errors, T) == pytest.approx(expected, abs=1e-12)
    assert auc(errors, T) == pytest.approx(auc_by_sampling(errors, T), abs=0.01)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60)), min_size=1, max_size=30),
       st.floats(1.0, 40.0))
def test_auc_matches_numerical_integration(errors, T):
    assert auc(errors, T) == pytest.approx(auc_by_sampling(errors, T), abs=0.01)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60)), min_size=1, max_size=30),
       st.floats(1.0, 30.0), st.floats(0.0, 30.0))
def test_auc_grows_with_threshold_and_shrinks_with_error(errors, T, extra):
    assert auc(errors, T + extra) >= auc(errors, T) - 1e-9
    worse = [(a + extra, b) for a, b in errors]
    assert auc(worse, T) <= auc(errors, T) + 1e-9


def test_auc_needs_pairs():
    with pytest.raises(ContractError):
        auc([], 10)


def test_accuracy_is_strict():
    assert accuracy_at([1.0, 2.0, 3.0], 2.0) == pytest.approx(100 / 3)
    th, acc = auc_curve([(1.0, 1.0), (3.0, 0.0)], 4.0, n=5)
    assert list(th) == [0, 1, 2, 3, 4] and list(acc) == [0, 0, 50, 50, 100]


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def brute_force(pred, gt, thresholds):
    d = np.linalg.norm(pred[:, None] - gt[None], axis=2)
    return [(100 * np.mean(d.min(axis=1) < t), 100 * np.mean(d.min(axis=0) < t))
            for t in thresholds]


def test_identical_clouds(rng):
    pts = rng.normal(size=(100, 3))
    assert cloud_accuracy_completeness(pts, pts, [0.01]) == [(100.0, 100.0)]


def test_one_stray_prediction(rng):
    gt = rng.normal(size=(100, 3))
    pred = np.vstack([gt, [[50.0, 50.0, 50.0]]])
    ((acc, comp),) = cloud_accuracy_completeness(pred, gt, [0.05])
    assert acc == pytest.approx(100 * 100 / 101) and comp == 100.0


@pytest.mark.parametrize("seed", range(3))
def test_cloud_metrics_match_quadratic_scan(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(-1, 1, (200, 3))
    pred = np.vstack([gt[:150] + rng.normal(0, 0.03, (150, 3)), rng.uniform(-1, 1, (30, 3))])
    taus = [0.01, 0.03, 0.05, 0.1, 0.3]
    assert cloud_accuracy_completeness(pred, gt, taus) == brute_force(pred, gt, taus)


def test_empty_cloud_raises():
    with pytest.raises(ContractError):
        cloud_accuracy_completeness(np.zeros((0, 3)), np.ones((3, 3)), [0.1])


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_umeyama_recovers_a_similarity(seed, scale):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(20, 3))
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(size=3)
    s, R2, t2 = umeyama(src, transform_points(src, scale, R, t))
    assert s == pytest.approx(scale, rel=1e-9)
    assert np.allclose(R2, R, atol=1e-9) and np.allclose(t2, t, atol=1e-8)


def test_align_cameras_undoes_a_gauge_change(clean_scene):
    gt = clean_scene.truth.cameras
    moved = similarity_moved(gt, 3, 0.25)
    moved[1] = None
    _, aligned = align_cameras(moved, gt)
    assert aligned[1] is None
    for a, g in zip(aligned, gt):
        if a is not None:
            assert np.allclose(a.center, g.center, atol=1e-9)
            assert np.allclose(a.R, g.R, atol=1e-9)
            assert math.isclose(a.focal, g.focal)
