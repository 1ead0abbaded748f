import subprocess
import sys

import numpy as np
import pytest

from _synth import noise_image, repetitive_pair, write_sequence
from xrcmatch.cli import build_parser, main
from xrcmatch.features import compute_pyramid, read_features, write_features
from xrcmatch.imgio import Image, load_image, resize_bilinear, ResizeSpec, write_pnm
from xrcmatch.matcher import TSV_HEADER, read_tsv


@pytest.fixture
def image_file(tmp_path):
    p = tmp_path / "a.ppm"
    write_pnm(noise_image(96, 128, seed=1), p)
    return p


def _usage_error(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    return capsys.readouterr().err


def test_match_self(tmp_path, image_file):
    out = tmp_path / "m.tsv"
    assert main(["match", "--src", str(image_file), "--tgt", str(image_file), "--out", str(out), "--resolution", "128"]) == 0
    text = out.read_text()
    assert text.startswith(TSV_HEADER + "\n")
    rows = read_tsv(out)
    assert len(rows) == 48
    assert np.mean(np.all(rows[:, 0:2] == rows[:, 2:4], axis=1)) >= 0.99


def test_match_to_stdout(image_file, capsys):
    assert main(["match", "--src", str(image_file), "--tgt", str(image_file), "--resolution", "64", "--topk", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == TSV_HEADER and len(lines) == 4


def test_missing_target_is_usage_error(image_file, capsys):
    err = _usage_error(["match", "--src", str(image_file)], capsys)
    assert "usage:" in err and "--tgt" in err


def test_resolution_below_minimum(image_file, capsys):
    err = _usage_error(["match", "--src", str(image_file), "--tgt", str(image_file), "--resolution", "16"], capsys)
    assert "resolution below minimum" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["match", "--bogus"],
        ["eval", "--dataset", "x", "--thresholds", "3,2"],
        ["heatmap", "--src", "a", "--tgt", "b", "--query", "1", "--out", "o"],
        ["heatmap", "--src", "a", "--tgt", "b", "--query", "1,2", "--stage", "nc", "--out", "o"],
        ["match", "--src", "a", "--tgt", "b", "--topk", "0"],
        ["match", "--src", "a", "--tgt", "b", "--epsilon", "-1"],
        ["sweep", "--dataset", "d", "--resolutions", ""],
    ],
)
def test_other_usage_errors(argv, capsys):
    _usage_error(argv, capsys)


def test_unreadable_input_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2")
    assert main(["match", "--src", str(bad), "--tgt", str(bad)]) == 1
    assert "malformed header" in capsys.readouterr().err


def test_eval_identity_dataset(tmp_path, capsys):
    img = noise_image(64, 64, seed=2)
    write_sequence(tmp_path / "ds", "i_a", [img] * 6, [np.eye(3)] * 5)
    out = tmp_path / "mma.csv"
    assert main(["eval", "--dataset", str(tmp_path / "ds"), "--resolution", "64", "--out", str(out)]) == 0
    stdout = capsys.readouterr().out.splitlines()
    assert "auc_all,1.0000" in stdout and "auc_illum,1.0000" in stdout and "auc_view,nan" in stdout
    assert out.read_text().splitlines()[1] == "1,1.0000,nan,1.0000"


def test_eval_thresholds_list(tmp_path, capsys):
    img = noise_image(64, 64, seed=2)
    write_sequence(tmp_path / "ds", "v_a", [img] * 6, [np.eye(3)] * 5)
    out = tmp_path / "mma.csv"
    argv = ["eval", "--dataset", str(tmp_path / "ds"), "--resolution", "64", "--thresholds", "1,3,5", "--out", str(out)]
    assert main(argv) == 0
    assert [line.split(",")[0] for line in out.read_text().splitlines()[1:]] == ["1", "3", "5"]


def test_eval_empty_dataset(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--dataset", str(tmp_path / "empty")]) == 1
    assert "no sequences found" in capsys.readouterr().err


def test_sweep(tmp_path, capsys):
    img = noise_image(64, 64, seed=3)
    write_sequence(tmp_path / "ds", "v_a", [img] * 6, [np.eye(3)] * 5)
    assert main(["sweep", "--dataset", str(tmp_path / "ds"), "--resolutions", "32,64"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "resolution,auc_illum,auc_view,auc_all,wall_s,peak_mem_mb"
    assert [line.split(",")[:4] for line in lines[1:]] == [
        ["32", "nan", "1.0000", "1.0000"],
        ["64", "nan", "1.0000", "1.0000"],
    ]


def _above_half_max(path) -> int:
    g = load_image(path).gray
    return int(np.sum(g > g.max() / 2))


def test_heatmap_stages(tmp_path):
    src, tgt = repetitive_pair(128, 32)
    write_pnm(src, tmp_path / "s.pgm")
    write_pnm(tgt, tmp_path / "t.pgm")
    counts = {}
    for stage in ("raw", "mm1", "mm2", "fine"):
        out = tmp_path / f"{stage}.pgm"
        argv = ["heatmap", "--src", str(tmp_path / "s.pgm"), "--tgt", str(tmp_path / "t.pgm"),
                "--query", "60,60", "--stage", stage, "--out", str(out), "--resolution", "128"]
        assert main(argv) == 0
        img = load_image(out)
        assert img.channels == 1 and img.gray.max() == 255
        assert (img.width, img.height) == ((32, 32) if stage == "fine" else (8, 8))
        counts[stage] = _above_half_max(out)
    assert counts["mm2"] < counts["raw"]


def test_bias(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("0.9\n0.9\n")
    b.write_text("0.1\n0.95\n")
    assert main(["bias", "--a", str(a), "--b", str(b), "--tau", "0.75"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# tau_pos=0.75" and lines[1] == "tau_neg\tcount"
    assert [int(line.split("\t")[1]) for line in lines[2:]] == [0, 0] + [1] * 9
    assert main(["bias", "--a", str(a), "--b", str(a)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(line.endswith("\t0") for line in lines[2:])


def test_features_export_import_and_match(tmp_path, image_file, capsys):
    xfm = tmp_path / "a.xfm"
    assert main(["features", "export", "--image", str(image_file), "--out", str(xfm), "--resolution", "64"]) == 0
    pyr = read_features(xfm)
    resized, _, _ = resize_bilinear(load_image(image_file), ResizeSpec(64))
    np.testing.assert_array_equal(pyr.coarse.data, compute_pyramid(resized).coarse.data)

    assert main(["features", "import", "--in", str(xfm)]) == 0
    out = capsys.readouterr().out
    assert "fine 16x12x32 stride 4" in out and "coarse 4x3x128 stride 16" in out

    # precomputed features on both sides; the images give the frame to report in
    tsv = tmp_path / "m.tsv"
    argv = ["match", "--src", str(image_file), "--tgt", str(image_file), "--src-features", str(xfm),
            "--tgt-features", str(xfm), "--out", str(tsv)]
    assert main(argv) == 0
    direct = tmp_path / "d.tsv"
    main(["match", "--src", str(image_file), "--tgt", str(image_file), "--resolution", "64", "--out", str(direct)])
    assert tsv.read_text() == direct.read_text()


def test_features_import_rejects_corrupt_file(tmp_path, capsys):
    p = tmp_path / "bad.xfm"
    p.write_bytes(b"XFM0" + b"\x00" * 40)
    assert main(["features", "import", "--in", str(p)]) == 1
    assert "unsupported version" in capsys.readouterr().err


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("XRC_THREADS", "3")
    args = build_parser().parse_args(["match", "--src", "a", "--tgt", "b"])
    assert args.threads == 3
    args = build_parser().parse_args(["match", "--src", "a", "--tgt", "b", "--threads", "2"])
    assert args.threads == 2


def _subcommands():
    return [["match"], ["eval"], ["sweep"], ["heatmap"], ["bias"], ["features", "export"], ["features", "import"]]


@pytest.mark.parametrize("cmd", _subcommands())
def test_help_documents_every_flag(cmd, capsys):
    parser = build_parser()
    with pytest.raises(SystemExit) as exc:
        main(cmd + ["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = parser._subparsers._group_actions[0].choices[cmd[0]]
    if len(cmd) == 2:
        sub = sub._subparsers._group_actions[0].choices[cmd[1]]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.default not in (None, False) and action.dest != "help":
            assert "default" in (action.help or "") or "(default:" in text


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "xrcmatch", "match", "--resolution", "8"], capture_output=True, text=True)
    assert r.returncode == 2 and "resolution below minimum" in r.stderr
    r = subprocess.run([sys.executable, "-m", "xrcmatch", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "heatmap" in r.stdout
