import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from splatcodec.cli import main, parse_budget
from splatcodec.gs_model import load_ply
from splatcodec.splat import Camera

GOLDEN_PLY = "89c889f4966210a90772bda001d7c136c8796066625d4588fc25ab95b4291d51"
GOLDEN_CONTAINER = "ae886a0f761f747b0ebca795ba9e5c0d5314287de2980ae322be2dfe20fe7f32"
ENCODE_FLAGS = ["--tau", "0.8", "--bits", "10", "--codebook", "32", "--blocks", "8", "--retain", "50"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    doc = json.loads(out.out) if code == 0 else None
    return code, doc, out.out, out.err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["synth", "-o", str(d / "s.ply"), "--cameras-out", str(d / "c.json"),
                 "--n", "2000", "--seed", "5", "--views", "2"]) == 0
    return d


def test_budget_parsing():
    assert parse_budget("8MB") == 8 << 20
    assert parse_budget("1.5 kb") == 1536
    assert parse_budget("1234") == 1234
    assert parse_budget("2G") == 2 << 30
    for bad in ("", "MB", "-3MB", "8XB", "0"):
        with pytest.raises(Exception):
            parse_budget(bad)


def test_synth_hash_and_cameras(scene, tmp_path, capsys):
    assert sha(scene / "s.ply") == GOLDEN_PLY
    code, doc, _, _ = run(capsys, "synth", "-o", tmp_path / "x.ply", "--cameras-out", tmp_path / "x.json",
                          "--n", "2000", "--seed", "5", "--views", "2")
    assert code == 0 and doc["sha256"] == GOLDEN_PLY
    cloud = load_ply((scene / "s.ply").read_bytes())
    centroid = cloud.positions.astype(float).mean(0)
    for d in json.loads((scene / "c.json").read_text()):
        cam = Camera.from_dict(d)
        p = cam.world_to_camera[:3, :3] @ centroid + cam.world_to_camera[:3, 3]
        assert p[2] > 0
        u = cam.focal[0] * p[0] / p[2] + cam.principal_point[0]
        v = cam.focal[1] * p[1] / p[2] + cam.principal_point[1]
        assert abs(u - cam.width / 2) < 1e-6 and abs(v - cam.height / 2) < 1e-6


def test_synth_single_gaussian(tmp_path, capsys):
    code, doc, _, _ = run(capsys, "synth", "-o", tmp_path / "one.ply", "--cameras-out", tmp_path / "c.json", "--n", "1")
    assert code == 0 and doc["gaussians"] == 1
    code, doc, _, _ = run(capsys, "encode", tmp_path / "one.ply", "-o", tmp_path / "one.mgs", "--codebook", "4")
    assert code == 0


def test_encode_golden_and_threads(scene, tmp_path, capsys):
    for threads in (1, 2):
        out = tmp_path / f"t{threads}.mgs"
        code, doc, _, _ = run(capsys, "encode", scene / "s.ply", "-o", out, *ENCODE_FLAGS, "--threads", threads)
        assert code == 0 and doc["bytes"] == out.stat().st_size
        assert sha(out) == GOLDEN_CONTAINER


def test_decode_stable_and_reference(scene, tmp_path, capsys):
    enc = tmp_path / "a.mgs"
    run(capsys, "encode", scene / "s.ply", "-o", enc, *ENCODE_FLAGS)
    docs = []
    for name in ("a.ply", "b.ply"):
        code, doc, text, _ = run(capsys, "decode", enc, "-o", tmp_path / name, "--reference", scene / "s.ply")
        assert code == 0
        docs.append(text.replace(name, ""))
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert docs[0] == docs[1]


def test_encode_without_cameras_uses_volume_score(scene, tmp_path, capsys):
    code, doc, _, _ = run(capsys, "encode", scene / "s.ply", "-o", tmp_path / "x.mgs", "--codebook", "16",
                          "--tau", "0.5")
    assert code == 0 and doc["bytes"] > 0


def test_encode_with_q_file(scene, tmp_path, capsys):
    q = np.full((10, 8), 6)
    q[:, ::2] = 12
    (tmp_path / "q.json").write_text(json.dumps({"q": q.tolist()}))
    code, _, _, _ = run(capsys, "encode", scene / "s.ply", "-o", tmp_path / "q.mgs", "--q-file", tmp_path / "q.json",
                        "--blocks", "8", "--codebook", "16")
    assert code == 0
    code, doc, _, _ = run(capsys, "info", tmp_path / "q.mgs")
    assert code == 0 and np.array_equal(np.array(doc["q"]), q)
    (tmp_path / "bad.json").write_text(json.dumps([[1, 2]]))
    code, _, _, err = run(capsys, "encode", scene / "s.ply", "-o", tmp_path / "z.mgs", "--q-file", tmp_path / "bad.json")
    assert code == 2 and "Q must be" in err


def test_search_cli(scene, tmp_path, capsys):
    args = ["search", scene / "s.ply", "--cameras", scene / "c.json", "--budget", "30KB", "--tau-grid", "0.5,1",
            "--codebook", "32", "--blocks", "8"]
    texts = []
    for threads in (1, 2):
        out = tmp_path / f"s{threads}.mgs"
        code, doc, text, _ = run(capsys, *args, "-o", out, "--threads", threads, "--report", tmp_path / f"r{threads}.json")
        assert code == 0
        assert abs(doc["size_bytes"] - 30 * 1024) / (30 * 1024) < 0.05
        assert np.array(doc["q"]).shape == (10, 8) and doc["selected_by"] == "render"
        texts.append(text.replace(f"s{threads}.mgs", ""))
    assert (tmp_path / "s1.mgs").read_bytes() == (tmp_path / "s2.mgs").read_bytes()
    assert texts[0] == texts[1]
    r1 = json.loads((tmp_path / "r1.json").read_text())
    r2 = json.loads((tmp_path / "r2.json").read_text())
    r1.pop("output"), r2.pop("output")
    assert r1 == r2


def test_search_infeasible(scene, tmp_path, capsys):
    code, _, _, err = run(capsys, "search", scene / "s.ply", "-o", tmp_path / "x.mgs", "--budget", "1KB",
                          "--codebook", "32", "--blocks", "8", "--tau-grid", "0.5,1")
    assert code == 3 and "closest size" in err
    assert not (tmp_path / "x.mgs").exists()


def test_render_eval(scene, tmp_path, capsys):
    enc = tmp_path / "hi.mgs"
    run(capsys, "encode", scene / "s.ply", "-o", enc, "--bits", "16", "--retain", "all", "--codebook", "16",
        "--depth", "21")
    code, doc, _, _ = run(capsys, "render-eval", scene / "s.ply", enc, scene / "c.json")
    assert code == 0 and doc["mean_psnr"] >= 50
    # decoded model against itself: identical renders
    run(capsys, "decode", enc, "-o", tmp_path / "hi.ply")
    code, doc, _, _ = run(capsys, "render-eval", tmp_path / "hi.ply", enc, scene / "c.json")
    assert doc["psnr"] == ["inf", "inf"] and doc["mean_psnr"] == "inf"


def test_exit_codes(scene, tmp_path, capsys):
    (tmp_path / "junk.mgs").write_bytes(b"nope" * 10)
    assert run(capsys, "info", tmp_path / "junk.mgs")[0] == 5
    assert run(capsys, "decode", tmp_path / "junk.mgs", "-o", tmp_path / "o.ply")[0] == 5
    assert run(capsys, "info", tmp_path / "missing.mgs")[0] == 4
    (tmp_path / "junk.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    assert run(capsys, "encode", tmp_path / "junk.ply", "-o", tmp_path / "o.mgs")[0] == 2
    assert run(capsys, "encode", scene / "s.ply", "-o", tmp_path / "nodir" / "o.mgs", "--codebook", "8")[0] == 4
    assert run(capsys, "encode", scene / "s.ply", "-o", tmp_path / "o.mgs", "--threads", "0")[0] == 2
    (tmp_path / "cams.json").write_text("{}")
    assert run(capsys, "encode", scene / "s.ply", "-o", tmp_path / "o.mgs", "--cameras", tmp_path / "cams.json")[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["search", str(scene / "s.ply"), "-o", "x", "--budget", "lots"])
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "splatcodec.cli", "info", str(tmp_path / "none")],
                         capture_output=True, text=True)
    assert res.returncode == 4 and res.stdout == "" and "cannot read" in res.stderr
