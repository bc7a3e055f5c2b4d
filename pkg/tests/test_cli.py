import csv
import subprocess
import sys

import numpy as np
import pytest

from smalldepth import io
from smalldepth.cli import main, parse_res


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["init", "--out", str(d / "etm.sdwt"), "--etm", "--seed", "1"]) == 0
    assert main(["fuse", "--in", str(d / "etm.sdwt"), "--out", str(d / "fused.sdwt")]) == 0
    img = np.random.default_rng(0).integers(0, 256, size=(48, 80, 3), dtype=np.uint8)
    (d / "img.ppm").write_bytes(b"P6\n80 48\n255\n" + img.tobytes())
    return d


def test_parse_res():
    assert parse_res("128x416") == (128, 416)
    for bad in ("128", "0x4", "axb"):
        with pytest.raises(Exception):
            parse_res(bad)


def test_profile_writes_csv_and_plot(tmp_path, capsys):
    assert main(["profile", "--res", "128x416", "--csv", str(tmp_path / "p.csv"), "--plot", str(tmp_path / "p.png")]) == 0
    out = capsys.readouterr().out
    assert "total" in out
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    total = sum(int(r["param"]) for r in rows)
    assert abs(total / 2.35e6 - 1) <= 0.15
    assert (tmp_path / "p.png").stat().st_size > 0


def test_fuse_output(work):
    store = io.read_weights(work / "fused.sdwt")
    assert any(n.endswith(".fused") for n in store.names())
    assert max(io.fused_mismatch(store).values()) <= 1e-5


def test_infer_deterministic(work, tmp_path):
    args = ["infer", "--weights", str(work / "fused.sdwt"), "--image", str(work / "img.ppm")]
    assert main(args + ["--out", str(tmp_path / "a.pfm"), "--plot", str(tmp_path / "a.png")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.pfm")]) == 0
    assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()
    assert io.read_pfm(tmp_path / "a.pfm").shape == (48, 80)
    assert main(args + ["--out", str(tmp_path / "n.pfm"), "--native", "--scale", "1", "--depth",
                        "--pgm16", str(tmp_path / "n.pgm")]) == 0
    d = io.read_pfm(tmp_path / "n.pfm")
    assert d.shape == (12, 20) and d.min() > 0
    assert io.read_pgm16(tmp_path / "n.pgm").shape == (12, 20)
    assert main(args + ["--out", str(tmp_path / "x.pfm"), "--scale", "4"]) == 2


def test_infer_fused_matches_etm(work, tmp_path):
    args = ["infer", "--image", str(work / "img.ppm")]
    main(args + ["--weights", str(work / "etm.sdwt"), "--out", str(tmp_path / "e.pfm")])
    main(args + ["--weights", str(work / "fused.sdwt"), "--out", str(tmp_path / "f.pfm")])
    assert np.max(np.abs(io.read_pfm(tmp_path / "e.pfm") - io.read_pfm(tmp_path / "f.pfm"))) <= 1e-4


def test_verify_pass_and_corruption(work, tmp_path, capsys):
    assert main(["verify", "--weights", str(work / "fused.sdwt")]) == 0
    assert "checks passed" in capsys.readouterr().out
    store = io.read_weights(work / "fused.sdwt")
    name = next(n for n in store.names() if n.endswith(".fused"))
    bad = dict(store.entries)
    bad[name] = store[name].copy()
    bad[name].flat[0] += 1.0
    io.write_weights(bad, tmp_path / "bad.sdwt")
    assert main(["verify", "--weights", str(tmp_path / "bad.sdwt")]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_distill_toy_and_eval(tmp_path, capsys):
    teacher = tmp_path / "teacher"
    assert main(["make-teacher", "--out", str(teacher), "--frames", "1", "--res", "32x64"]) == 0
    assert main(["distill-toy", "--teacher", str(teacher), "--iters", "3", "--seed", "0", "--log-every", "1",
                 "--csv", str(tmp_path / "d.csv"), "--plot", str(tmp_path / "d.png"),
                 "--save", str(tmp_path / "s.sdwt")]) == 0
    first = capsys.readouterr().out
    assert first.count("iter") == 3 and "ratio" in first
    main(["distill-toy", "--teacher", str(teacher), "--iters", "3", "--seed", "0", "--log-every", "1"])
    second = capsys.readouterr().out
    assert [l for l in first.splitlines() if l.startswith("iter")] == [l for l in second.splitlines() if l.startswith("iter")]
    assert (tmp_path / "d.png").exists() and io.load_model(tmp_path / "s.sdwt") is not None

    gen = np.random.default_rng(0)
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    for k in ("a", "b"):
        gt = gen.uniform(1, 60, size=(10, 12))
        io.write_pfm(tmp_path / "gt" / f"{k}.pfm", gt)
        io.write_pfm(tmp_path / "pred" / f"{k}.pfm", gt * 3)
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--csv", str(tmp_path / "m.csv"), "--plot", str(tmp_path / "m.png")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["frame"] for r in rows] == ["a", "b", "mean"]
    assert float(rows[-1]["a1"]) == 1.0 and float(rows[-1]["abs_rel"]) < 1e-6


def test_error_exit_codes(tmp_path, capsys):
    assert main(["infer", "--weights", str(tmp_path / "none.sdwt"), "--image", "x", "--out", "y"]) == 2
    (tmp_path / "junk.sdwt").write_bytes(b"nope")
    assert main(["fuse", "--in", str(tmp_path / "junk.sdwt"), "--out", str(tmp_path / "o.sdwt")]) == 2
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["profile", "--res", "bad"])


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "smalldepth.cli", "profile", "--res", "64x96"],
                       capture_output=True, text=True, timeout=120)
    assert r.returncode == 0 and "total" in r.stdout
