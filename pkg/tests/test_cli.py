import json
import shlex
import sys

import numpy as np
import pytest

from mivec import cli, metrics
from mivec.bitstream.codec import decode_sequence
from mivec.seqdata import load_sequence, to_bytes

QUICK = ["--grid-c", "8", "--factors", "4,2", "--epochs", "3", "--qat-epochs", "1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--output", str(root / "seq"), "--views", "3", "--frames", "3",
                     "--height", "32", "--width", "32", "--disparity", "1", "--seed", "4"]) == 0
    assert cli.main(["encode", "--input", str(root / "seq"), "--output", str(root / "out.mvb"), *QUICK]) == 0
    return root


def test_encode_outputs(workdir):
    report = json.loads((workdir / "out.json").read_text())
    for key in ("bpp", "view_psnr", "view_ssim", "timings", "parameter_count", "segment_bytes", "ablations"):
        assert key in report
    assert report["total_bits"] == 8 * (workdir / "out.mvb").stat().st_size


def test_encode_decode_eval_closes(workdir, capsys):
    assert cli.main(["decode", "--input", str(workdir / "out.mvb"), "--output", str(workdir / "dec")]) == 0
    report = json.loads((workdir / "out.json").read_text())
    assert cli.main(["eval", "--ref", str(workdir / "seq"), "--rec", str(workdir / "dec"),
                     "--json", str(workdir / "eval.json")]) == 0
    ev = json.loads((workdir / "eval.json").read_text())
    for j, vals in ev["views"].items():
        assert vals["psnr"] == pytest.approx(report["view_psnr"][j], abs=1e-6)
        assert vals["ssim"] == pytest.approx(report["view_ssim"][j], abs=1e-6)


def test_decode_subset_matches_full(workdir):
    assert cli.main(["decode", "--input", str(workdir / "out.mvb"), "--output", str(workdir / "sub"), "--views", "2"]) == 0
    full = decode_sequence((workdir / "out.mvb").read_bytes())
    sub = cli._load_views(workdir / "sub")
    assert list(sub) == [2]
    assert np.array_equal(to_bytes(sub[2]), to_bytes(full.frames[2]))


def test_eval_identity_and_bd_rate(workdir, capsys, tmp_path):
    assert cli.main(["eval", "--ref", str(workdir / "seq"), "--rec", str(workdir / "seq")]) == 0
    assert "PSNR 99.0000 dB  SSIM 1.000000" in capsys.readouterr().out
    pts = [metrics.RDPoint(b, q, s) for b, q, s in [(0.1, 30, 0.9), (0.2, 33, 0.93), (0.4, 36, 0.95), (0.8, 39, 0.97)]]
    metrics.write_rd_csv(tmp_path / "a.csv", pts)
    metrics.write_rd_csv(tmp_path / "b.csv", [metrics.RDPoint(p.bpp * 2, p.psnr, p.ssim) for p in pts])
    assert cli.main(["eval", "--anchor-csv", str(tmp_path / "a.csv"), "--test-csv", str(tmp_path / "a.csv")]) == 0
    assert "BD-rate (PSNR): +0.000%" in capsys.readouterr().out.replace("-0.000", "+0.000")
    assert cli.main(["eval", "--anchor-csv", str(tmp_path / "a.csv"), "--test-csv", str(tmp_path / "b.csv"),
                     "--plot", str(tmp_path / "rd.svg")]) == 0
    out = capsys.readouterr().out
    assert "BD-rate (PSNR): +100.000%" in out and "BD-rate (SSIM): +100.000%" in out
    assert (tmp_path / "rd.svg").is_file()


def test_exit_codes(workdir, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["encode", "--output", str(tmp_path / "x.mvb")])
    assert info.value.code == 2
    capsys.readouterr()
    data = bytearray((workdir / "out.mvb").read_bytes())
    data[len(data) // 2] ^= 1
    (tmp_path / "bad.mvb").write_bytes(bytes(data))
    assert cli.main(["decode", "--input", str(tmp_path / "bad.mvb"), "--output", str(tmp_path / "d")]) == 3
    assert capsys.readouterr().err.startswith("mivec: error: [implicit]")
    assert cli.main(["synth", "--output", str(tmp_path / "small"), "--views", "2", "--frames", "1",
                     "--height", "16", "--width", "16", "--disparity", "1"]) == 0
    assert cli.main(["eval", "--ref", str(workdir / "seq"), "--rec", str(tmp_path / "small")]) == 4
    assert cli.main(["encode", "--input", str(workdir / "seq"), "--output", str(tmp_path / "y.mvb"),
                     "--grid-c", "8", "--factors", "3,2"]) == 2


def test_seed_fallback_and_ini(monkeypatch, tmp_path):
    parser = cli.build_parser()
    monkeypatch.setenv("MIVEC_SEED", "17")
    args = parser.parse_args(["encode", "--input", "x", "--output", "y"])
    assert cli.codec_config_from_args(args).train.seed == 17
    ini = tmp_path / "train.ini"
    ini.write_text("[train]\nepochs = 12\nalpha = 0.5\nseed = 3\n[model]\ngrid_c = 16\nfactors = 4,2\n")
    args = parser.parse_args(["encode", "--input", "x", "--output", "y", "--config", str(ini), "--alpha", "0.9"])
    cfg = cli.codec_config_from_args(args)
    assert (cfg.train.epochs, cfg.train.alpha, cfg.train.seed, cfg.grid_c, cfg.factors) == (12, 0.9, 3, 16, (4, 2))
    ini.write_text("[train]\nlearning = 1\n")
    with pytest.raises(cli.ConfigurationError):
        cli.codec_config_from_args(parser.parse_args(["encode", "--input", "x", "--output", "y", "--config", str(ini)]))


def test_ablate_marks_switches(workdir):
    out = workdir / "abl.mvb"
    assert cli.main(["ablate", "--input", str(workdir / "seq"), "--output", str(out), *QUICK, "--no-ivc",
                     "--no-grid-emb"]) == 0
    report = json.loads(out.with_suffix(".json").read_text())
    assert report["ablations"] == {"no_grid_emb": True, "no_grid_fea_t": False, "no_grid_fea_v": False, "no_ivc": True}


def test_ablate_without_switches_matches_encode(workdir):
    out = workdir / "plain.mvb"
    assert cli.main(["ablate", "--input", str(workdir / "seq"), "--output", str(out), *QUICK]) == 0
    assert out.read_bytes() == (workdir / "out.mvb").read_bytes()


def test_rd_sweep(tmp_path):
    seq = tmp_path / "seq"
    assert cli.main(["synth", "--output", str(seq), "--views", "2", "--frames", "2", "--height", "16",
                     "--width", "16", "--disparity", "1"]) == 0
    assert cli.main(["encode", "--input", str(seq), "--output", str(tmp_path / "rd.mvb"), "--rd-sweep",
                     "--factors", "4,2", "--epochs", "1", "--qat-epochs", "0"]) == 0
    points = metrics.read_rd_csv(tmp_path / "rd.csv")
    assert [p.label for p in points] == [f"c{c}_qp{q}" for c, q in cli.RD_SCHEDULE]
    assert all((tmp_path / f"rd_{p.label}.mvb").is_file() for p in points)


def test_external_backend_via_cli(workdir, fake_codec, tmp_path):
    py = shlex.quote(sys.executable)
    enc = f"{py} {fake_codec} encode {{input}} {{output}} {{qp}}"
    dec = f"{py} {fake_codec} decode {{input}} {{output}} {{qp}}"
    out = tmp_path / "ext.mvb"
    assert cli.main(["encode", "--input", str(workdir / "seq"), "--output", str(out), *QUICK,
                     "--explicit-backend", "external", "--external-cmd", enc, "--external-decode-cmd", dec]) == 0
    assert cli.main(["decode", "--input", str(out), "--output", str(tmp_path / "d")]) == 2
    assert cli.main(["decode", "--input", str(out), "--output", str(tmp_path / "d"), "--external-decode-cmd", dec]) == 0
    assert len(load_sequence(tmp_path / "d").frames) == 3
