"""Command line interface: exit codes, file plumbing, and render output.

Oracles: the library itself (render_frame for golden pixels, read_header
for file facts) plus byte comparison for determinism.  Exit codes are the
contract: 0 success, 1 usage, 2 runtime failure.
"""

import re

import numpy as np
import pytest
from PIL import Image

from chunkcast.cli import main
from chunkcast.engine import Engine, EngineConfig
from chunkcast.render import RaycasterConfig, camera_for_volume, grey_ramp_tf, render_frame
from chunkcast.store import StoreConfig
from chunkcast.tensorfile import load_manifest, read_header


def make_ball(path, n=48, radius=15, chunk=16):
    grid = np.mgrid[0:n, 0:n, 0:n].astype(np.float64)
    center = (n - 1) / 2
    vol = (np.sqrt(((grid - center) ** 2).sum(axis=0)) <= radius).astype(np.float32) * 0.8
    vol.tofile(path)
    return vol


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Raw ball volume, imported chunked file, and a built pyramid manifest."""
    root = tmp_path_factory.mktemp("cli")
    raw = root / "ball.raw"
    make_ball(raw)
    plct = root / "ball.plct"
    manifest = root / "ball.json"
    assert main(["import", "--input", str(raw), "--output", str(plct),
                 "--shape", "48x48x48", "--chunk", "16x16x16",
                 "--type", "f32", "--spacing", "1,1,1"]) == 0
    assert main(["build-lod", "--input", str(plct), "--output", str(manifest),
                 "--const-table"]) == 0
    return root


# -- import ------------------------------------------------------------------

def test_import_writes_expected_grid(tmp_path):
    data = np.arange(25, dtype=np.float32).reshape(5, 5)
    raw = tmp_path / "a.raw"
    data.tofile(raw)
    out = tmp_path / "a.plct"
    rc = main(["import", "--input", str(raw), "--output", str(out),
               "--shape", "5x5", "--chunk", "4x4"])
    assert rc == 0 and out.exists()
    header = read_header(out)
    assert header.md.num_chunks() == 4  # ceil(5/4)^2


def test_import_missing_shape_is_usage_error(tmp_path, capsys):
    rc = main(["import", "--input", "x", "--output", "y"])
    assert rc == 1
    assert "--shape" in capsys.readouterr().err


def test_import_dim_mismatch_is_usage_error(tmp_path):
    assert main(["import", "--input", "x", "--output", "y",
                 "--shape", "8x8", "--chunk", "4x4x4"]) == 1


def test_import_wrong_file_size_is_runtime_error(tmp_path, capsys):
    raw = tmp_path / "short.raw"
    raw.write_bytes(b"\0" * 10)
    rc = main(["import", "--input", str(raw), "--output", str(tmp_path / "o.plct"),
               "--shape", "8x8", "--chunk", "4x4"])
    assert rc == 2
    assert "size mismatch" in capsys.readouterr().err


def test_import_unknown_type_is_usage_error():
    assert main(["import", "--input", "x", "--output", "y",
                 "--shape", "8x8", "--chunk", "4x4", "--type", "f16"]) == 1


# -- build-lod ----------------------------------------------------------------

def test_build_lod_level_sizes(workspace, capsys):
    manifest = load_manifest(workspace / "ball.json")
    sizes = [read_header(lv.path).md.size for lv in manifest.levels]
    assert sizes == [(48, 48, 48), (24, 24, 24), (12, 12, 12)]
    assert all(lv.const_table for lv in manifest.levels)


def test_build_lod_rerun_reproduces_bytes(tmp_path):
    raw = tmp_path / "v.raw"
    make_ball(raw, n=32, radius=10)
    plct = tmp_path / "v.plct"
    assert main(["import", "--input", str(raw), "--output", str(plct),
                 "--shape", "32x32x32", "--chunk", "16x16x16"]) == 0
    first, second = tmp_path / "m1.json", tmp_path / "m2.json"
    assert main(["build-lod", "--input", str(plct), "--output", str(first)]) == 0
    level1 = load_manifest(first).levels[1].path
    snapshot = open(level1, "rb").read()
    assert main(["build-lod", "--input", str(plct), "--output", str(second)]) == 0
    assert open(load_manifest(second).levels[1].path, "rb").read() == snapshot


def test_build_lod_missing_input_is_runtime_error(tmp_path):
    assert main(["build-lod", "--input", str(tmp_path / "no.plct"),
                 "--output", str(tmp_path / "m.json")]) == 2


# -- render ---------------------------------------------------------------------

def test_render_matches_library_golden(workspace, tmp_path):
    out = tmp_path / "frame.png"
    rc = main(["render", "--manifest", str(workspace / "ball.json"),
               "--output", str(out), "--frame", "48x32", "--tile", "16x16",
               "--compositing", "mop"])
    assert rc == 0
    got = np.asarray(Image.open(out))
    manifest = load_manifest(workspace / "ball.json")
    with Engine(EngineConfig(stores=StoreConfig(ram_capacity=1 << 28))) as eng:
        pyramid = manifest.open_pyramid()
        cam = camera_for_volume(pyramid.node(0).md, pyramid.embedding(0))
        want = render_frame(eng, pyramid, cam, RaycasterConfig(compositing="mop"),
                            grey_ramp_tf(), (32, 48), (16, 16))
    np.testing.assert_array_equal(got, want)


def test_render_is_deterministic(workspace, tmp_path):
    args = ["render", "--manifest", str(workspace / "ball.json"),
            "--frame", "32x32", "--camera", "60,60,60/23.5,23.5,23.5", "--fov", "30"]
    one, two = tmp_path / "a.png", tmp_path / "b.png"
    assert main(args + ["--output", str(one)]) == 0
    assert main(args + ["--output", str(two)]) == 0
    assert one.read_bytes() == two.read_bytes()


def test_render_es_flag_does_not_change_pixels(workspace, tmp_path):
    base = ["render", "--manifest", str(workspace / "ball.json"), "--frame", "32x32"]
    off, on = tmp_path / "off.png", tmp_path / "on.png"
    assert main(base + ["--es", "off", "--output", str(off)]) == 0
    assert main(base + ["--es", "on", "--output", str(on)]) == 0
    np.testing.assert_array_equal(np.asarray(Image.open(off)), np.asarray(Image.open(on)))


def test_render_timing_prints_one_line(workspace, tmp_path, capsys):
    rc = main(["render", "--manifest", str(workspace / "ball.json"),
               "--output", str(tmp_path / "t.png"), "--frame", "64x48", "--timing"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1
    assert re.fullmatch(r"frame 64x48: \d+\.\d+ s, \d+ brick bytes read", lines[0])


def test_render_nonsquare_frame_orientation(workspace, tmp_path):
    out = tmp_path / "wide.png"
    assert main(["render", "--manifest", str(workspace / "ball.json"),
                 "--output", str(out), "--frame", "64x16"]) == 0
    img = Image.open(out)
    assert img.size == (64, 16)  # PIL size is (width, height)


def test_render_usage_errors(workspace, tmp_path):
    base = ["render", "--manifest", str(workspace / "ball.json"),
            "--output", str(tmp_path / "x.png")]
    assert main(base + ["--frame", "9x"]) == 1
    assert main(base + ["--compositing", "avg"]) == 1
    assert main(base + ["--camera", "1,2/3,4"]) == 1
    assert main(base + ["--tf", "0,1,2"]) == 1


def test_render_missing_manifest_is_runtime_error(tmp_path):
    assert main(["render", "--manifest", str(tmp_path / "no.json"),
                 "--output", str(tmp_path / "x.png")]) == 2


def test_render_corrupt_manifest_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"format\": \"something-else\"}")
    assert main(["render", "--manifest", str(bad),
                 "--output", str(tmp_path / "x.png")]) == 2
    assert "manifest" in capsys.readouterr().err


# -- info -----------------------------------------------------------------------

def test_info_chunked_file_matches_header(workspace, capsys):
    assert main(["info", str(workspace / "ball.plct")]) == 0
    out = capsys.readouterr().out
    assert "48x48x48 f32" in out and "grid 3x3x3" in out and "27/27 stored" in out


def test_info_manifest_lists_levels(workspace, capsys):
    assert main(["info", str(workspace / "ball.json")]) == 0
    out = capsys.readouterr().out
    assert "3 levels" in out
    assert "level 2: 12x12x12" in out and "spacing 4,4,4" in out


def test_info_nonexistent_file_is_runtime_error(tmp_path, capsys):
    assert main(["info", str(tmp_path / "ghost.plct")]) == 2
    assert "ghost.plct" in capsys.readouterr().err


# -- serve (argument handling; request flow is covered by the service tests) -----

def test_serve_rejects_bad_manifest(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("not json at all")
    assert main(["serve", "--manifest", str(bad)]) == 2


def test_serve_rejects_bad_listen(workspace):
    assert main(["serve", "--manifest", str(workspace / "ball.json"),
                 "--listen", "nowhere"]) == 1


# -- top level --------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "Subcommands" not in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 1
