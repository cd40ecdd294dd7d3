import json
import math

import numpy as np
import pytest

from tracksfm import io as sfm_io
from tracksfm.cli import main
from tracksfm.errors import ParseError
from tracksfm.scene import Camera, Scene, project
from tracksfm.tracks import SyntheticConfig, generate_synthetic, save_tracks


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("x,text", [(1228.8, "1228.8"), (-0.0, "0"), (0.1 + 0.2, "0.3"),
                                    (512.0, "512"), (1e-20, "1e-20")])
def test_number_formatting(x, text):
    assert sfm_io.fmt(x) == text


def test_cameras_round_trip(tmp_path, clean_reconstruction):
    rec, _ = clean_reconstruction
    cams = list(rec.cameras)
    cams[3] = None
    scene = Scene(frames=rec.frames, tracks=rec.tracks, cameras=cams, points=rec.points)
    sfm_io.save_cameras(scene, tmp_path / "c.json")
    back = sfm_io.load_cameras(tmp_path / "c.json")
    assert back[3] is None
    for a, b in zip(cams, back):
        if a is not None:
            assert np.abs(a.to_vector() - b.to_vector()).max() < 1e-14
            assert np.array_equal(a.pp, b.pp)
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["convention"] == "world_to_camera"


def test_camera_file_version_is_checked(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"format_version": "3.0", "cameras": []}))
    with pytest.raises(ParseError):
        sfm_io.load_cameras(tmp_path / "c.json")


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    pts[[3, 7]] = np.nan
    assert sfm_io.write_ply(pts, tmp_path / "p.ply") == 18
    assert (tmp_path / "p.ply").read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")
    got, ids = sfm_io.read_ply(tmp_path / "p.ply")
    assert list(ids) == [i for i in range(20) if i not in (3, 7)]
    assert np.array_equal(got, pts[ids])
    full = sfm_io.points_from_ply(tmp_path / "p.ply", 20)
    assert np.array_equal(full, pts, equal_nan=True)


def identity_scene(clean_scene):
    cams = [Camera.from_image_size(1024, 768, 1228.8)] + list(clean_scene.truth.cameras[1:])
    return Scene(frames=clean_scene.frames, tracks=clean_scene.tracks, cameras=cams,
                 points=clean_scene.truth.points)


def test_colmap_identity_camera_lines(tmp_path, clean_scene):
    sfm_io.export_colmap(identity_scene(clean_scene), tmp_path)
    cam_lines = [ln for ln in (tmp_path / "cameras.txt").read_text().splitlines()
                 if not ln.startswith("#")]
    assert cam_lines[0] == "1 SIMPLE_PINHOLE 1024 768 1228.8 512 384"
    img_lines = [ln for ln in (tmp_path / "images.txt").read_text().splitlines()
                 if not ln.startswith("#")]
    assert img_lines[0] == "1 1 0 0 0 0 0 0 1 frame_00000"


def test_colmap_round_trip_reprojects(tmp_path, clean_reconstruction):
    rec, _ = clean_reconstruction
    assert sfm_io.export_colmap(rec, tmp_path) == []
    cams, pts = sfm_io.import_colmap(tmp_path)
    assert sorted(cams) == [f.id + 1 for f in rec.frames]
    assert len(pts) == len(rec.tracks)
    for pid in list(pts)[::25]:
        j = pid - 1
        for o in rec.tracks[j].observations:
            a = project(rec.cameras[o.frame_id], rec.points[j])[0]
            b = project(cams[o.frame_id + 1], pts[pid])[0]
            assert np.abs(a - b).max() < 1e-6


def test_colmap_omits_unregistered_frames(tmp_path, clean_scene):
    scene = identity_scene(clean_scene)
    cams = list(scene.cameras)
    cams[2] = None
    scene = Scene(frames=scene.frames, tracks=scene.tracks, cameras=cams, points=scene.points)
    assert sfm_io.export_colmap(scene, tmp_path) == [2]
    imported, _ = sfm_io.import_colmap(tmp_path)
    assert 3 not in imported and len(imported) == len(cams) - 1


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    scene = generate_synthetic(SyntheticConfig(n_frames=6, n_tracks=150, noise_px=1.0,
                                               outlier_frac=0.2, seed=21))
    save_tracks(scene, d / "scene.json")
    return d


def run_all(d, tag):
    out = d / tag
    out.mkdir()
    assert main(["synth", "--frames", "5", "--tracks", "80", "--noise", "0.5", "--seed", "3",
                 "-o", str(out / "synth.json")]) == 0
    assert main(["reconstruct", str(d / "scene.json"), "-o", str(out / "rec")]) == 0
    assert main(["evaluate", str(out / "rec" / "cameras.json"), str(d / "scene.json"),
                 "--auc", "10", "--auc", "30", "--points", str(out / "rec" / "points.ply"),
                 "--cloud", "0.05", "--json", str(out / "eval.json"),
                 "--curve", str(out / "curve.csv")]) == 0
    assert main(["export-colmap", str(d / "scene.json"), str(out / "rec"),
                 "-o", str(out / "colmap")]) == 0
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_cli_outputs_are_byte_identical(workdir, monkeypatch, capsys):
    monkeypatch.setenv("SFM_THREADS", "1")
    a = run_all(workdir, "a")
    out_a = capsys.readouterr().out
    monkeypatch.setenv("SFM_THREADS", "4")
    b = run_all(workdir, "b")
    out_b = capsys.readouterr().out
    assert len(a) == 10 and a == b and out_a == out_b
    header, row = out_a.strip().splitlines()[-2:]
    assert header.split(",")[:6] == ["pairs", "registered", "RRE@15", "RTE@15", "AUC@10", "AUC@30"]
    assert row.split(",")[0] == "15"


def test_reconstruct_writes_config_and_mask(tmp_path, workdir):
    rec = tmp_path / "rec"
    assert main(["reconstruct", str(workdir / "scene.json"), "-o", str(rec), "--seed", "2"]) == 0
    report = json.loads((rec / "report.json").read_text())
    assert report["config"]["filter"]["v_min"] == 0.6 and report["config"]["seed"] == 2
    mask = json.loads((rec / "mask.json").read_text())
    assert len(mask["keep"]) == sum(len(t["obs"]) for t in
                                    json.loads((workdir / "scene.json").read_text())["tracks"])


def test_usage_errors_exit_with_two(tmp_path, workdir, capsys):
    assert main(["reconstruct", str(tmp_path / "missing.json"), "-o", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format_version": "9.0", "frames": [], "tracks": []}))
    assert main(["reconstruct", str(bad), "-o", str(tmp_path / "o")]) == 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format_version": "1.0", "no_such_key": 1}))
    assert main(["reconstruct", str(workdir / "scene.json"), "-o", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 2
    assert main(["synth", "--frames", "1", "-o", str(tmp_path / "s.json")]) == 2
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert "error" in capsys.readouterr().err


def test_reconstruction_failure_exits_with_one(tmp_path, workdir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format_version": "1.0", "filter": {"sigma_max": 0.5}}))
    assert main(["reconstruct", str(workdir / "scene.json"), "-o", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 1
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert "no observations survive" in report["failure"]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--samples", "50", "--step", "1e-3"]) == 0
    out = capsys.readouterr().out
    jac = float(out.split("max_rel_error=")[1].split()[0])
    assert jac < 1e-5 and not math.isnan(jac)
