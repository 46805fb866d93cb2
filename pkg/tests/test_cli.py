import csv
import io

import numpy as np
import pytest

from sphereprod import vmf
from sphereprod.cli import SUMMARY_HEADER, main, read_manifest, read_pgm
from sphereprod.vae import EpochMetrics, read_metrics_csv, write_metrics_csv

TINY = ["--data", "synthetic:120:6:6", "--epochs", "3", "--warmup", "2", "--hidden", "16",
        "--batch", "40", "--iwae-k", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--composition", "s2x1", "--seeds", "1", "--out", str(out)] + TINY)
    assert code == 0
    return out


def test_train_summary_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--composition", "s20x10x6x1", "--seeds", "1",
                       "--out", str(tmp_path), *TINY)
    assert code == 0
    table = rows(out)
    assert tuple(table[0]) == SUMMARY_HEADER
    assert table[1][:4] == ["seed0", "41", "4", "s20x10x6x1"]
    assert table[-1][0] == "mean"
    ll, elbo, re, kl = (float(v) for v in table[1][4:])
    assert elbo == pytest.approx(-(re + kl), abs=1e-3)
    assert (tmp_path / "summary.csv").read_text().splitlines() == out.splitlines()


def test_train_three_seeds(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--composition", "s3", "--seeds", "3", "--out", str(tmp_path),
                       *TINY)
    assert code == 0
    table = rows(out)
    assert [r[0] for r in table[1:]] == ["seed0", "seed1", "seed2", "mean"]
    elbos = [float(r[5]) for r in table[1:4]]
    assert float(table[4][5]) == pytest.approx(np.mean(elbos), abs=0.01)
    for s in range(3):
        assert (tmp_path / f"seed{s}" / "metrics.csv").exists()
        assert (tmp_path / f"seed{s}" / "model.ckpt").exists()


def test_train_bad_composition_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--composition", "s0x3", "--out", str(tmp_path))
    assert code == 1
    assert "position 1" in err


def test_train_bad_data_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "nope.idx"), "--out", str(tmp_path))
    assert code == 2
    assert "nope.idx" in err


def test_unknown_flag_is_config_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--no-such-flag"])
    assert info.value.code == 1


def test_manifest_records_configuration(trained):
    manifest = read_manifest(trained / "manifest.txt")
    assert manifest["composition"] == "s2x1"
    assert manifest["seeds"] == "0"
    assert manifest["data"] == "synthetic:120:6:6"
    assert len(manifest["code_hash"]) == 16


def test_eval_matches_training_elbo(trained, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", str(trained / "seed0" / "model.ckpt"),
                       "--iwae-k", "4")
    assert code == 0
    header, values = rows(out)
    assert header == ["LL", "ELBO", "RE", "KL", "shell_kls"]
    best = [m for m in read_metrics_csv(trained / "seed0" / "metrics.csv") if m.split == "best"][-1]
    assert float(values[1]) == pytest.approx(best.elbo, abs=1e-4)
    assert len(values[4].split("|")) == 2


def test_eval_composition_mismatch(trained, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(trained / "seed0" / "model.ckpt"),
                       "--composition", "s3")
    assert code == 1
    assert "s2x1" in err and "s3" in err


def test_eval_dimension_mismatch(trained, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(trained / "seed0" / "model.ckpt"),
                       "--data", "synthetic:50:5:5")
    assert code == 1
    assert "25" in err and "36" in err


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.ckpt"))
    assert code == 1


def test_kl_surface_csv(tmp_path, capsys):
    path = tmp_path / "kl.csv"
    code, _, _ = run(capsys, "kl-surface", "--m-range", "2:4", "--kappa-range", "0:10", "--steps", "11",
                     "--out", str(path))
    assert code == 0
    table = rows(path.read_text())
    assert table[0] == ["m", "kappa", "kl"]
    assert len(table) == 1 + 3 * 11
    for m, k, kl in table[1:]:
        assert float(kl) == vmf.kl_to_uniform(int(m), float(k))
    code, out, _ = run(capsys, "kl-surface", "--m-values", "3", "--kappa-range", "1:1", "--steps", "1")
    assert rows(out)[1] == ["3", "1.0", repr(vmf.kl_to_uniform(3, 1.0))]


@pytest.mark.parametrize("bad", [["--m-range", "1:3"], ["--kappa-range", "5:1"], ["--m-range", "a:b"]])
def test_kl_surface_bad_ranges(capsys, bad):
    code, _, _ = run(capsys, "kl-surface", *bad)
    assert code == 1


def test_interpolate_writes_pgm(trained, tmp_path, capsys):
    path = tmp_path / "strip.pgm"
    code, out, _ = run(capsys, "interpolate", "--checkpoint", str(trained / "seed0" / "model.ckpt"),
                       "--shell", "1", "--steps", "8", "--out", str(path))
    assert code == 0
    assert path.read_bytes().startswith(b"P5\n48 6\n255\n")
    pixels, maxval = read_pgm(path)
    assert pixels.shape == (6, 48) and maxval == 255
    assert "dims=S^1" in out and "steps=8" in out
    code, _, _ = run(capsys, "interpolate", "--checkpoint", str(trained / "seed0" / "model.ckpt"),
                     "--shell", "0", "--steps", "1", "--anchor", "sample", "--out", str(path))
    assert code == 0
    assert read_pgm(path)[0].shape == (6, 6)


def test_interpolate_bad_shell(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "interpolate", "--checkpoint", str(trained / "seed0" / "model.ckpt"),
                     "--shell", "5", "--out", str(tmp_path / "x.pgm"))
    assert code == 1


def write_metrics(path, kls, kappas=None):
    kappas = kappas or tuple(1.0 for _ in kls)
    write_metrics_csv(path, [EpochMetrics(0, "val", -1.0, 1.0, 0.0, tuple(kls), kappas, (1.0,) * len(kls)),
                             EpochMetrics(0, "best", -1.0, 1.0, 0.0, tuple(kls), kappas, (1.0,) * len(kls))])


def test_diagnose_all_ignored(tmp_path, capsys):
    path = tmp_path / "m.csv"
    write_metrics(path, (0.0, 0.0, 0.0))
    code, out, _ = run(capsys, "diagnose", "--metrics", str(path), "--composition", "s2x3x1")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "shell,dim,kl,kappa,status"
    assert all(line.endswith(",ignored") for line in lines[1:4])
    assert lines[-1] == "effective_dof=0 of 6 (s2x3x1)"


def test_diagnose_one_active_reads_manifest(trained, tmp_path, capsys):
    kl = vmf.kl_to_uniform(11, 100.0)
    path = trained / "seed0" / "synthetic_metrics.csv"
    write_metrics(path, (kl, 0.0))
    code, out, _ = run(capsys, "diagnose", "--metrics", str(path))
    assert code == 0
    assert out.splitlines()[1].endswith(",active")
    assert out.splitlines()[-1] == "effective_dof=2 of 3 (s2x1)"


def test_diagnose_malformed_csv(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("epoch,split\n1,2,3\n")
    code, _, _ = run(capsys, "diagnose", "--metrics", str(path))
    assert code == 2


def test_reruns_are_byte_identical(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", "--composition", "s2x1", "--seeds", "1",
                           "--out", str(tmp_path / name), *TINY)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for rel in ("seed0/metrics.csv", "seed0/model.ckpt", "summary.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_rerun_reproduces(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--manifest", str(trained / "manifest.txt"), "--out", str(tmp_path))
    assert code == 0
    assert (tmp_path / "seed0" / "model.ckpt").read_bytes() == (trained / "seed0" / "model.ckpt").read_bytes()
