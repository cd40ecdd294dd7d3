import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from tracksfm.epipolar import (BATCH_SETS, batched_eight_point, decompose_essential, eight_point,
                               init_focal, initialize_cameras, normalize_pixels, sampson_error,
                               sampson_threshold, two_view_depths)
from tracksfm.errors import ArityError, DegeneracyError
from tracksfm.metrics import align_cameras
from tracksfm.scene import (Frame, Scene, Track, TrackObservation, relative_pose,
                            rotation_angle_deg, skew)
from tracksfm.tracks import SyntheticConfig, generate_synthetic

THRESHOLD = sampson_threshold(0.6, 1024)


def two_view(seed, noise=0.0, outliers=0.0, n_tracks=300):
    scene = generate_synthetic(SyntheticConfig(n_frames=2, n_tracks=n_tracks, noise_px=noise,
                                               outlier_frac=outliers, seed=seed))
    f = math.exp(init_focal(1024, 768))
    tracks = [t for t in scene.tracks if len(t.observations) == 2]
    x1 = normalize_pixels([t.observations[0].y for t in tracks], f, (512, 384))
    x2 = normalize_pixels([t.observations[1].y for t in tracks], f, (512, 384))
    return x1, x2, relative_pose(*scene.truth.cameras)


def angle_between(a, b):
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), a @ b))


@pytest.mark.parametrize("size,expected", [((1024, 768), 1228.8), ((100, 100), 120.0),
                                           ((768, 1024), 1228.8)])
def test_init_focal(size, expected):
    assert init_focal(*size) == pytest.approx(math.log(expected), abs=1e-12)


def test_init_focal_rejects_nonpositive():
    with pytest.raises(ValueError):
        init_focal(0, 10)


def test_sampson_threshold_values():
    assert sampson_threshold(0.6, 1024) == pytest.approx(math.sqrt(0.6 / 1024))
    # expressed in pixels at the default focal guess
    assert 28 < 1228.8 * sampson_threshold(0.6, 1024) < 30
    assert 33 < 1228.8 * sampson_threshold(0.8, 1024) < 35


def test_eight_point_recovers_noiseless_pose():
    x1, x2, rel = two_view(0)
    sel = slice(0, 50)
    cand = eight_point(x1[sel], x2[sel])
    assert math.radians(rotation_angle_deg(cand.R @ rel.rotation.T)) < 1e-6
    assert math.radians(angle_between(cand.t, rel.translation)) < 1e-6
    assert np.linalg.det(cand.R) == pytest.approx(1.0)
    s = np.linalg.svd(cand.E, compute_uv=False)
    assert abs(s[0] - s[1]) < 1e-6 and s[2] < 1e-6


def test_eight_point_needs_eight_pairs():
    x1, x2, _ = two_view(0)
    with pytest.raises(ArityError):
        eight_point(x1[:7], x2[:7])


def test_duplicated_point_is_degenerate():
    x = np.tile([[0.1, 0.2]], (8, 1))
    with pytest.raises(DegeneracyError):
        eight_point(x, x + 0.01)


def test_sampson_error_is_zero_on_exact_correspondences():
    x1, x2, rel = two_view(1)
    E = skew(rel.translation) @ rel.rotation
    assert np.abs(sampson_error(E, x1, x2)).max() < 1e-12


def geometric_epipolar_distance(E, x1, x2):
    """Smallest total correction of both points onto the epipolar constraint."""
    res = minimize(lambda d: d @ d, np.zeros(4), method="SLSQP", tol=1e-16,
                   constraints={"type": "eq",
                                "fun": lambda d: np.r_[x2 + d[2:], 1.0] @ E @ np.r_[x1 + d[:2], 1.0]})
    return math.sqrt(res.fun)


def test_sampson_error_approximates_geometric_distance(rng):
    x1, x2, rel = two_view(2)
    E = skew(rel.translation) @ rel.rotation
    f = 1228.8
    for k in range(20):
        d = rng.normal(size=2)
        moved = x2[k] + d / np.linalg.norm(d) / f     # 1 px perturbation
        exact = geometric_epipolar_distance(E, x1[k], moved)
        approx = sampson_error(E, x1[k], moved)[0]
        assert approx == pytest.approx(exact, rel=0.2, abs=1e-9)


def test_sampson_degenerate_denominator_is_flagged():
    err, flags = sampson_error(np.zeros((3, 3)), [[0.0, 0.0]], [[0.0, 0.0]], return_flags=True)
    assert flags[0] and np.isinf(err[0])


def test_batched_matches_eight_point_on_clean_data():
    x1, x2, _ = two_view(3)
    a = batched_eight_point(x1, x2, seed=0, threshold=THRESHOLD)
    b = eight_point(x1, x2)
    assert math.radians(rotation_angle_deg(a.R @ b.R.T)) < 1e-6
    assert math.radians(angle_between(a.t, b.t)) < 1e-6


def test_batched_is_deterministic():
    x1, x2, _ = two_view(4, noise=1.0, outliers=0.3)
    a = batched_eight_point(x1, x2, seed=9, threshold=THRESHOLD)
    b = batched_eight_point(x1, x2, seed=9, threshold=THRESHOLD)
    assert np.array_equal(a.E, b.E) and np.array_equal(a.inlier_mask, b.inlier_mask)


def test_plain_scheme_uses_twenty_subsets_of_fifty():
    x1, x2, rel = two_view(5, noise=0.5)
    cand = batched_eight_point(x1, x2, seed=0, threshold=THRESHOLD, minimal_sets=0, refine_top=0)
    assert BATCH_SETS == 20
    assert rotation_angle_deg(cand.R @ rel.rotation.T) < 1.0


def test_batched_falls_back_below_set_size():
    x1, x2, rel = two_view(6, n_tracks=40)
    cand = batched_eight_point(x1[:30], x2[:30], seed=0, threshold=THRESHOLD, minimal_sets=0,
                               refine_top=0)
    assert rotation_angle_deg(cand.R @ rel.rotation.T) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_cheirality_of_selected_pose(seed):
    x1, x2, _ = two_view(seed, noise=1.0, outliers=0.3)
    cand = batched_eight_point(x1, x2, seed=seed, threshold=THRESHOLD)
    d1, d2 = two_view_depths(cand.R, cand.t, x1[cand.inlier_mask], x2[cand.inlier_mask])
    assert np.mean((d1 > 0) & (d2 > 0)) >= 0.95


@pytest.mark.parametrize("refine_top,minimal_sets", [(0, 0), (3, 480)])
@pytest.mark.parametrize("seed", range(3))
def test_inliers_monotone_in_threshold(seed, refine_top, minimal_sets):
    x1, x2, _ = two_view(seed, noise=1.0, outliers=0.3)
    factors = [0.05, 0.2, 0.6, 1.2]
    counts = [batched_eight_point(x1, x2, seed, sampson_threshold(f, 1024), refine_top=refine_top,
                                  minimal_sets=minimal_sets).inliers for f in factors]
    assert counts == sorted(counts)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decomposition_lies_on_essential_manifold(seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
    E, R, t, _ = decompose_essential(rng.normal(size=(3, 3)), x1, x2)
    s = np.linalg.svd(E, compute_uv=False)
    assert abs(s[0] - s[1]) < 1e-6 and s[2] < 1e-6
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_initialize_cameras_noiseless(clean_scene):
    init = initialize_cameras(clean_scene, 0)
    assert not init.failures
    q = init.cameras[0]
    assert np.array_equal(q.q, [1, 0, 0, 0]) and np.array_equal(q.t, [0, 0, 0])
    gt = clean_scene.truth.cameras
    _, aligned = align_cameras(init.cameras, gt)
    for a, g in zip(aligned, gt):
        assert rotation_angle_deg(a.R @ g.R.T) < 0.1
    for a, g in zip(aligned[1:], gt[1:]):
        err = np.linalg.norm(a.center - g.center) / np.linalg.norm(g.center - gt[0].center)
        assert err < 0.005
    assert np.median(list(init.query_depths.values())) == pytest.approx(1.0, abs=1e-6)


def test_frame_with_few_covisible_tracks_is_unregistered(clean_scene):
    tracks = list(clean_scene.tracks)
    for j, tr in enumerate(tracks):
        if 3 in tr.frame_ids() and j >= 5:
            tracks[j] = Track(tuple(o for o in tr.observations if o.frame_id != 3), tr.query_point)
    scene = Scene(frames=clean_scene.frames, tracks=tracks)
    init = initialize_cameras(scene, 0)
    assert list(init.failures) == [3]
    assert init.cameras[3] is None
    assert all(c is not None for i, c in enumerate(init.cameras) if i != 3)


def test_initialize_cameras_ignores_thread_count(monkeypatch):
    scene = generate_synthetic(SyntheticConfig(n_frames=6, n_tracks=150, noise_px=1.0,
                                               outlier_frac=0.2, seed=8))
    monkeypatch.setenv("SFM_THREADS", "1")
    a = initialize_cameras(scene, 0)
    monkeypatch.setenv("SFM_THREADS", "4")
    b = initialize_cameras(scene, 0)
    for ca, cb in zip(a.cameras, b.cameras):
        assert np.array_equal(ca.to_vector(), cb.to_vector())


def test_single_frame_scene_has_nothing_to_register():
    scene = Scene(frames=[Frame(0, 10, 10), Frame(1, 10, 10)],
                  tracks=[Track((TrackObservation(0, (1.0, 1.0)),), (1.0, 1.0))])
    init = initialize_cameras(scene, 0)
    assert init.cameras[1] is None and 1 in init.failures
