import csv
import json

import numpy as np
import pytest

from kinfit import read_stack, write_stack, StackFile
from kinfit.cli import main
from kinfit.stackio import read_pgm


@pytest.fixture(scope="module")
def phantom_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    spec = {"shape": [12, 12], "shapes": [{"type": "rect", "label": 1, "top_left": [3, 3], "size": [5, 6]}],
            "regions": {"1": {"k": [0.8, 0.6, 0.07, 0.07], "V_b": 0.1}}}
    path = d / "phantom.json"
    path.write_text(json.dumps(spec))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out


def test_simulate_fit_report(tmp_path, phantom_file, capsys):
    sim, fit, rep = tmp_path / "sim", tmp_path / "fit", tmp_path / "rep"
    code, _ = run(["simulate", "--out", sim, "--phantom", phantom_file, "--seed", 3, "--n", 2,
                   "--n-angles", 30, "--write-clean"], capsys)
    assert code == 0
    names = sorted(p.name for p in sim.iterdir())
    assert names == ["clean.kstk", "input_function.json", "manifest.json", "phantom.json",
                     "realization_000.kstk", "realization_001.kstk"]
    man = json.loads((sim / "manifest.json").read_text())
    assert man["seed"] == 3 and man["command"] == "simulate" and "count_scale" in man["config"]
    assert set(man["outputs"]) >= {"clean.kstk", "realization_000.kstk"}

    code, _ = run(["fit", sim / "clean.kstk", "--out", fit, "--phantom", phantom_file, "--no-smooth",
                   "--noiseless", "--eps", 1e-6], capsys)
    assert code == 0
    k_fb = read_stack(fit / "K_k_fb.kstk")
    assert k_fb.voxels.shape == (12, 12, 1) and k_fb.units == "1/min"
    inside = np.zeros((12, 12), bool)
    inside[3:8, 3:9] = True
    np.testing.assert_allclose(k_fb.voxels[inside, 0], 0.8, rtol=1e-3)
    status = read_stack(fit / "status.kstk").voxels[:, :, 0]
    assert np.all(status[~inside] == 2) and np.all(status[inside] == 0)

    code, _ = run(["report", fit, "--out", rep, "--phantom", phantom_file, "--stack", sim / "clean.kstk",
                   "--pixels", "4,4", "0,0"], capsys)
    assert code == 0
    rows = list(csv.DictReader((rep / "summary.csv").open()))
    row = next(r for r in rows if r["parameter"] == "k_fb")
    assert float(row["mean"]) == pytest.approx(0.8, rel=1e-3) and row["n_pixels"] == "30"
    tac = list(csv.reader((rep / "tac.csv").open()))
    assert tac[0] == ["frame", "t_mid_min", "pixel_4_4", "pixel_0_0"] and len(tac) == 28
    assert read_pgm(rep / "K_k_fb.pgm").shape == (12, 12)


def test_report_constant_map(tmp_path, capsys):
    maps = tmp_path / "maps"
    maps.mkdir()
    write_stack(maps / "K_k_fb.kstk", StackFile(np.full((4, 4), 0.5, np.float32)))
    code, _ = run(["report", maps, "--out", tmp_path / "rep"], capsys)
    assert code == 0
    (row,) = list(csv.DictReader((tmp_path / "rep" / "summary.csv").open()))
    assert row["region"] == "all" and float(row["mean"]) == 0.5 and float(row["std"]) == 0.0


def test_segment(tmp_path, capsys):
    ii, jj = np.mgrid[:32, :32]
    disk = (ii - 16) ** 2 + (jj - 16) ** 2 <= 100
    bump = 10 * np.exp(-((ii - 16) ** 2 + (jj - 16) ** 2) / 8.0)
    avg = np.where(disk, np.maximum(bump, 2.0), 0.0)
    write_stack(tmp_path / "s.kstk", StackFile(np.repeat(avg[:, :, None], 2, axis=2).astype(np.float32)))
    code, _ = run(["segment", tmp_path / "s.kstk", "--out", tmp_path / "seg", "--no-smooth",
                   "--gamma-window", 8], capsys)
    assert code == 0
    mask = read_stack(tmp_path / "seg" / "roi.kstk").voxels[:, :, 0]
    np.testing.assert_array_equal(mask.astype(bool), disk)
    info = json.loads((tmp_path / "seg" / "segment.json").read_text())
    assert info["seed"] == [16, 16] and info["n_pixels"] == int(disk.sum())


def test_identify(tmp_path, capsys):
    code, _ = run(["identify", "--model", "three_renal", "--k", "0.5,0.3,0.4,0.2,0.1,0.2,0.002",
                   "--starts", 2, "--out", tmp_path / "id"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "id" / "identify.json").read_text())
    assert rep["coprimality"]["coprime"] == [True, True]
    assert rep["local"]["rank"] == 6 and len(rep["multistart"]["estimates"]) == 2


def test_replay_is_byte_identical(tmp_path, phantom_file, capsys):
    out = tmp_path / "sim"
    assert run(["simulate", "--out", out, "--phantom", phantom_file, "--seed", 5, "--n", 1,
                "--n-angles", 20], capsys)[0] == 0
    first = (out / "realization_000.kstk").read_bytes()
    (out / "realization_000.kstk").unlink()
    assert run(["replay", out / "manifest.json"], capsys)[0] == 0
    assert (out / "realization_000.kstk").read_bytes() == first


@pytest.mark.parametrize("argv,code,kind", [
    (["fit", "missing.kstk", "--out", "x"], 1, "FileNotFoundError"),
    (["frobnicate"], 2, "UsageError"),
    (["simulate", "--out", "x"], 2, "UsageError"),
    (["identify", "--model", "nope", "--k", "1", "--out", "x"], 1, "InvalidArgument"),
])
def test_errors_are_json(tmp_path, monkeypatch, capsys, argv, code, kind):
    monkeypatch.chdir(tmp_path)
    got, out = run(argv, capsys)
    assert got == code
    err = json.loads(out.err.strip().splitlines()[-1])
    assert err["error"] == kind and err["message"]


def test_bad_phantom_reports_position(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"shape": [4, 4],\n "regions": ]}')
    code, out = run(["simulate", "--out", tmp_path / "o", "--phantom", bad, "--seed", 1], capsys)
    assert code == 1
    err = json.loads(out.err)
    assert err["error"] == "FormatError" and "line 2" in err["message"]


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == "0.1.0"


def test_all_zero_stack_gives_zero_maps(tmp_path, capsys):
    from kinfit import default_frame_schedule

    grid = default_frame_schedule()
    path = tmp_path / "zero.kstk"
    write_stack(path, StackFile(np.zeros((6, 5, len(grid)), np.float32), grid))
    code, _ = run(["fit", path, "--out", tmp_path / "fit"], capsys)
    assert code == 0
    for name in ("k_fb", "k_bf", "k_mf", "k_fm"):
        assert not read_stack(tmp_path / "fit" / f"K_{name}.kstk").voxels.any()
    assert (read_stack(tmp_path / "fit" / "status.kstk").voxels == 2).all()
