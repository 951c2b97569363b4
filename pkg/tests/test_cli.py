import json

import numpy as np
import pytest

from capradon.cli import (
    ConfigError,
    main,
    parse_config_text,
    read_pgm,
    render_pgm,
    resolve_config,
)

SMALL = {
    "n": "6",
    "n_angles": "4",
    "gaps": "1,2",
    "green_order": "8",
    "x_pad": "2.0",
    "z_max": "2.0",
    "dx": "0.25",
    "dz": "0.25",
    "z_cut": "0.5",
    "image_size": "15",
    "voxel_dx": "2.0",
}


def small_args(tmp_path, outdir="out", **extra):
    phantom = tmp_path / "ball.txt"
    if not phantom.exists():
        phantom.write_text("sphere 4 -2 6 2.5 2.0\n")
    kv = dict(SMALL, phantom=str(phantom), outdir=str(tmp_path / outdir))
    kv.update({k: str(v) for k, v in extra.items()})
    args = []
    for key, value in kv.items():
        args += ["--set", f"{key}={value}"]
    return args


def artifact_bytes(outdir):
    return {p.name: p.read_bytes() for p in sorted(outdir.iterdir())
            if p.suffix in (".ectw", ".ectv", ".ects", ".ectl", ".pgm",
                            ".csv")}


def test_parse_config_text():
    cfg = parse_config_text("n = 12  # sites\n\n# comment\nwindow=hann\n")
    assert cfg == {"n": "12", "window": "hann"}


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("n = 12\nbogus = 1\n")


def test_parse_config_rejects_missing_equals():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words\n")


def test_resolve_defaults():
    cfg = resolve_config()
    assert cfg["n"] == 27
    assert cfg["pitch"] == 2.5
    assert cfg["gaps"] == (1, 2, 3, 4)
    assert cfg["quantize"] is True
    assert cfg["phantom_text"].startswith("#")


def test_resolve_precedence(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("n_angles = 30\nwindow = hann\n")
    cfg = resolve_config(path, ["window=ram-lak", "window=hamming"])
    assert cfg["n_angles"] == 30
    assert cfg["window"] == "hamming"


def test_resolve_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(None, ["n=soon"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["quantize=yes"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["gaps=1,9"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["window=boxcar"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["render=fixed", "render_lo=1", "render_hi=1"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["phantom=/no/such/file.txt"])
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "missing.cfg")
    bad = tmp_path / "bad_phantom.txt"
    bad.write_text("torus 0 0 0 1 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        resolve_config(None, [f"phantom={bad}"])


def test_render_pgm_minmax(tmp_path):
    path = tmp_path / "img.pgm"
    render_pgm(np.array([[0.0, 1.0], [2.0, 3.0]]), path, mode="minmax")
    pixels, comments = read_pgm(path)
    np.testing.assert_array_equal(pixels, [[0, 21845], [43690, 65535]])
    assert any("mode=minmax" in c for c in comments)


def test_render_pgm_symmetric_center(tmp_path):
    path = tmp_path / "img.pgm"
    render_pgm(np.array([[-1.0, 0.0], [0.5, 1.0]]), path, mode="symmetric")
    pixels, _ = read_pgm(path)
    np.testing.assert_array_equal(pixels, [[0, 32768], [49151, 65535]])


def test_render_pgm_constant_is_zero(tmp_path):
    path = tmp_path / "img.pgm"
    render_pgm(np.full((3, 4), 7.5), path, mode="minmax")
    pixels, comments = read_pgm(path)
    np.testing.assert_array_equal(pixels, 0)
    assert pixels.shape == (3, 4)
    assert any("constant" in c for c in comments)


def test_render_pgm_fixed_clips(tmp_path):
    path = tmp_path / "img.pgm"
    render_pgm(np.array([[-1.0, 0.0], [1.0, 3.0]]), path, mode="fixed",
               lo=0.0, hi=2.0)
    pixels, _ = read_pgm(path)
    np.testing.assert_array_equal(pixels, [[0, 0], [32768, 65535]])
    with pytest.raises(ValueError):
        render_pgm(np.zeros((2, 2)), path, mode="fixed", lo=1.0, hi=1.0)


def test_pipeline_smoke(tmp_path):
    assert main(["pipeline"] + small_args(tmp_path)) == 0
    outdir = tmp_path / "out"
    for name in ("weights_k1.ectw", "weights_k2.ectw", "phantom.ectv",
                 "sweep.ects", "layer_k1.ectl", "layer_k2.ectl",
                 "layer_k1.pgm", "layer_k2.pgm", "manifest.json",
                 "cache.json"):
        assert (outdir / name).exists(), name
    manifest = json.loads((outdir / "manifest.json").read_text())
    assert [s["name"] for s in manifest["stages"]] == [
        "weights", "phantom", "forward", "recon", "render"]
    assert all(not s["cached"] for s in manifest["stages"])
    assert manifest["config"]["n"] == 6


def test_pipeline_rerun_hits_cache(tmp_path):
    args = small_args(tmp_path)
    assert main(["pipeline"] + args) == 0
    before = artifact_bytes(tmp_path / "out")
    assert main(["pipeline"] + args) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert all(s["cached"] for s in manifest["stages"])
    assert artifact_bytes(tmp_path / "out") == before


def test_pipeline_partial_invalidation(tmp_path):
    assert main(["pipeline"] + small_args(tmp_path)) == 0
    assert main(["pipeline"] + small_args(tmp_path, window="ram-lak")) == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    cached = {s["name"]: s["cached"] for s in manifest["stages"]}
    assert cached == {"weights": True, "phantom": True, "forward": True,
                      "recon": False, "render": False}


def test_pipeline_worker_count_is_invisible(tmp_path):
    assert main(["pipeline"] + small_args(tmp_path, outdir="a",
                                          workers=1)) == 0
    assert main(["pipeline"] + small_args(tmp_path, outdir="b",
                                          workers=4)) == 0
    assert artifact_bytes(tmp_path / "a") == artifact_bytes(tmp_path / "b")


def test_stagewise_matches_pipeline(tmp_path):
    assert main(["pipeline"] + small_args(tmp_path, outdir="pipe")) == 0
    for command in ("weights", "phantom", "forward", "recon", "render"):
        assert main([command] + small_args(tmp_path, outdir="steps")) == 0
    assert artifact_bytes(tmp_path / "pipe") == artifact_bytes(
        tmp_path / "steps")


def test_pipeline_csv_option(tmp_path):
    assert main(["pipeline"] + small_args(tmp_path, csv=1)) == 0
    assert (tmp_path / "out" / "layer_k1.csv").exists()
    assert (tmp_path / "out" / "layer_k2.csv").exists()


def test_pipeline_empty_phantom(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing in view\n")
    assert main(["pipeline"] + small_args(tmp_path, phantom=str(empty))) == 0
    from capradon.forward import load_sinogram

    sino = load_sinogram(tmp_path / "out" / "sweep.ects")
    for k in (1, 2):
        np.testing.assert_array_equal(sino.data[k], 0.0)


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["pipeline", "--set", "bogus=1"]) == 2
    assert main(["pipeline", "--set", "n"]) == 2
    assert main(["pipeline", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "config error" in capsys.readouterr().err


def test_stage_failures_exit_3(tmp_path, capsys):
    # phantom pokes out of the scan circle -> the forward stage fails
    far = tmp_path / "far.txt"
    far.write_text("sphere 100 0 6 2.5 2.0\n")
    assert main(["pipeline"] + small_args(tmp_path, phantom=str(far))) == 3
    err = capsys.readouterr().err
    assert "error" in err
    outdir = tmp_path / "out"
    assert (outdir / "weights_k1.ectw").exists()
    assert not (outdir / "sweep.ects").exists()
    assert not (outdir / "manifest.json").exists()


def test_missing_prerequisite_exits_3(tmp_path, capsys):
    assert main(["forward"] + small_args(tmp_path, outdir="fresh")) == 3
    assert "weights" in capsys.readouterr().err
