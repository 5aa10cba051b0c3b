import subprocess
import sys

import numpy as np
import pytest

from volseq.checkpoint import load_checkpoint_with_config
from volseq.cli import main, read_config
from volseq.data import read_manifest, write_manifest


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_cohort")
    assert main(["synth", "--out", str(out), "--per-class", "2", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(cohort, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck") / "m.ckpt"
    code = main(["train", "--manifest", str(cohort / "manifest.tsv"), "--arch", "lstm", "--profile", "reduced",
                 "--epochs", "1", "--out", str(ck)])
    assert code == 0
    return ck


class TestSynth:
    def test_files(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--out", tmp_path, "--per-class", 10, "--shape", "16x16x16")
        assert code == 0
        assert len(list(tmp_path.glob("*.nii.gz"))) == 80
        assert len(read_manifest(tmp_path / "manifest.tsv").rows) == 80

    def test_deterministic(self, tmp_path, capsys):
        for d in ("a", "b"):
            run(capsys, "synth", "--out", tmp_path / d, "--per-class", 1, "--shape", "16x16x16", "--seed", 4)
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    @pytest.mark.parametrize("shape", ["8x8x8", "16x16", "axbxc"])
    def test_bad_shape(self, tmp_path, capsys, shape):
        code, _, err = run(capsys, "synth", "--out", tmp_path, "--shape", shape)
        assert code == 2 and "error" in err


class TestAugment:
    def test_balances(self, tmp_path, capsys):
        src = tmp_path / "src"
        main(["synth", "--out", str(src), "--per-class", "2", "--shape", "16x16x16"])
        m = read_manifest(src / "manifest.tsv")
        # drop one class-4 patient so the classes start unbalanced
        m = m.with_rows([r for r in m.rows if r.patient_id != "c4p0001"])
        write_manifest(m, src / "unbalanced.tsv")
        code, out, _ = run(capsys, "augment", "--manifest", src / "unbalanced.tsv", "--target", 3,
                           "--out", tmp_path / "out" / "aug.tsv")
        assert code == 0
        assert "before class1=2 class2=2 class3=2 class4=1" in out
        assert "after class1=3 class2=3 class3=3 class4=3" in out
        aug = read_manifest(tmp_path / "out" / "aug.tsv")
        assert aug.sequence_counts() == {1: 3, 2: 3, 3: 3, 4: 3}
        for r in aug.rows:
            assert aug.resolve(r.path).is_file()
        assert (tmp_path / "out" / "aug.counts.tsv").is_file()

    def test_capacity(self, cohort, tmp_path, capsys):
        code, _, err = run(capsys, "augment", "--manifest", cohort / "manifest.tsv", "--target", 1,
                           "--out", tmp_path / "a.tsv")
        assert code == 2 and "error" in err


def test_split(cohort, tmp_path, capsys):
    code, out, _ = run(capsys, "split", "--manifest", cohort / "manifest.tsv", "--test-fraction", 0.5,
                       "--out-train", tmp_path / "tr.tsv", "--out-test", tmp_path / "te.tsv")
    assert code == 0 and "train=4 test=4" in out
    tr, te = read_manifest(tmp_path / "tr.tsv"), read_manifest(tmp_path / "te.tsv")
    assert not {r.patient_id for r in tr.rows} & {r.patient_id for r in te.rows}


class TestTrainEvaluatePredict:
    def test_history(self, checkpoint):
        lines = open(f"{checkpoint}.history.tsv").read().splitlines()
        assert lines[0] == "epoch\tloss\taccuracy" and len(lines) == 2
        _, cfg = load_checkpoint_with_config(checkpoint)
        assert cfg["epochs"] == 1 and cfg["profile"] == "reduced"

    def test_evaluate(self, checkpoint, cohort, tmp_path, capsys):
        code, out, _ = run(capsys, "evaluate", "--checkpoint", checkpoint, "--manifest", cohort / "manifest.tsv",
                           "--report", tmp_path)
        assert code == 0
        for key in ("MAAccuracy=", "MAPrecision=", "MARecall=", "MAF1=", "AUC_class4=", "MacroOVR_AUC="):
            assert key in out
        for name in ("metrics.txt", "metrics.tsv", "confusion.tsv", "predictions.tsv", "roc_class1.tsv"):
            assert (tmp_path / name).is_file()
        cm = np.loadtxt(tmp_path / "confusion.tsv", skiprows=1, usecols=range(1, 5))
        assert cm.sum() == 8

    def test_predict(self, checkpoint, cohort, capsys):
        vols = sorted(cohort.glob("c1p0000_*.nii.gz"))
        code, out, _ = run(capsys, "predict", "--checkpoint", checkpoint, "--sequence", *vols)
        assert code == 0
        probs = [float(t.split("=")[1]) for t in out.splitlines()[0].split()]
        assert len(probs) == 4 and abs(sum(probs) - 1) < 1e-5
        assert out.splitlines()[1] == f"class={int(np.argmax(probs)) + 1}"

    def test_inspect_checkpoint(self, checkpoint, capsys):
        code, out, _ = run(capsys, "inspect", "--checkpoint", checkpoint)
        assert code == 0 and "reduced" in out

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "none.ckpt", "--sequence", "x.nii")
        assert code == 2 and "no such file" in err

    def test_corrupted_checkpoint(self, checkpoint, cohort, tmp_path, capsys):
        blob = bytearray(checkpoint.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        code, _, err = run(capsys, "evaluate", "--checkpoint", tmp_path / "bad.ckpt",
                           "--manifest", cohort / "manifest.tsv", "--report", tmp_path)
        assert code == 2 and "error" in err


class TestInspect:
    @pytest.mark.parametrize("arch", ["gru", "sgru", "sbigru", "lstm", "slstm", "sbilstm"])
    def test_golden(self, arch, capsys):
        code, out, _ = run(capsys, "inspect", "--arch", arch, "--golden")
        assert code == 0 and "golden: match" in out

    def test_table_out(self, tmp_path, capsys):
        run(capsys, "inspect", "--arch", "sbilstm", "--table-out", tmp_path / "t.tsv")
        rows = (tmp_path / "t.tsv").read_text().splitlines()
        assert rows[0] == "layer\ttype\toutput_shape\tparams"
        assert sum(int(r.split("\t")[3]) for r in rows[1:]) == 2871428

    def test_bad_arch(self, capsys):
        code, _, err = run(capsys, "inspect", "--arch", "bogus")
        assert code == 2 and "sbilstm" in err

    def test_golden_reduced(self, capsys):
        assert run(capsys, "inspect", "--arch", "gru", "--profile", "reduced", "--golden")[0] == 2


class TestConfig:
    def test_read_config(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# comment\nper-class = 3\nseed=5\n\n")
        assert read_config(tmp_path / "c.cfg") == {"per-class": "3", "seed": "5"}

    def test_flag_beats_file(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("per_class=3\nshape=16x16x16\n")
        run(capsys, "synth", "--config", tmp_path / "c.cfg", "--out", tmp_path / "a")
        assert len(read_manifest(tmp_path / "a" / "manifest.tsv").rows) == 24
        run(capsys, "synth", "--config", tmp_path / "c.cfg", "--per-class", 1, "--out", tmp_path / "b")
        assert len(read_manifest(tmp_path / "b" / "manifest.tsv").rows) == 8

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("colour=blue\n")
        code, _, err = run(capsys, "synth", "--config", tmp_path / "c.cfg", "--out", tmp_path)
        assert code == 2 and "colour" in err

    def test_missing_required(self, capsys):
        assert run(capsys, "train", "--arch", "gru")[0] == 2


def test_console_script():
    res = subprocess.run([sys.executable, "-m", "volseq.cli", "inspect", "--arch", "gru", "--golden"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "total 2100100" in res.stdout
