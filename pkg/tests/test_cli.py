import csv
import io
import json

import numpy as np
import pytest

from emodiff.audio.features import Waveform
from emodiff.audio.io import write_wav
from emodiff.autodiff.edtf import load
from emodiff.cli import main

# Toy preset shrunk so end-to-end commands finish in seconds.
SMALL = ["--preset", "toy", "--set", "toy.utterances=3", "--set", "diffusion.train_steps=3",
         "--set", "diffusion.batch=4", "--set", "diffusion.sample_steps=5", "--set", "classifier.epochs=1",
         "--set", "classifier.conv_filters=4,4,4", "--set", "classifier.hidden=4", "--set", "denoiser.res_filters=16",
         "--set", "denoiser.n_res_pre=1", "--set", "denoiser.n_res_post=1"]


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy", "--out", str(out), *SMALL]) == 0
    return out


def test_gen_toy_is_byte_identical(toy, tmp_path):
    assert main(["gen-toy", "--out", str(tmp_path), *SMALL]) == 0
    assert tree(tmp_path) == tree(toy)
    rows = (toy / "manifest.csv").read_text().splitlines()
    assert rows[0] == "path,emotion,speaker,text" and len(rows) == 1 + 4 * 4 * 3
    assert "toy.utterances = 3" in (toy / "config.txt").read_text()


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sample"])
    assert exc.value.code == 1
    assert main(["gen-toy", "--out", str(tmp_path), "--set", "diffusion.bogus=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["gen-toy", "--out", str(tmp_path), "--set", "nonsense"]) == 1


def test_missing_artifact_names_path(tmp_path, capsys):
    code = main(["sample", "--checkpoint", str(tmp_path / "nowhere"), "--emotion", "sad", "--speaker", "s",
                 "--out", str(tmp_path / "o"), *SMALL])
    assert code == 2 and "nowhere" in capsys.readouterr().err
    code = main(["eval-mad", "--real", str(tmp_path / "r.csv"), "--syn", str(tmp_path / "s.csv"),
                 "--out", str(tmp_path / "m")])
    assert code == 2 and "r.csv" in capsys.readouterr().err


class TestFeaturize:
    def test_empty_manifest(self, tmp_path, caplog):
        (tmp_path / "m.csv").write_text("path,emotion,speaker,text\n")
        assert main(["featurize", str(tmp_path / "m.csv"), "--out", str(tmp_path / "f")]) == 0
        assert "no files" in caplog.text
        assert (tmp_path / "f" / "manifest.csv").read_text() == "path,emotion,speaker,text\n"

    def test_three_seconds_and_bad_file(self, tmp_path):
        t = np.arange(3 * 22050) / 22050
        write_wav(tmp_path / "a.wav", Waveform(0.5 * np.sin(2 * np.pi * 440 * t)))
        (tmp_path / "broken.wav").write_bytes(b"not a wav")
        (tmp_path / "m.csv").write_text("path,emotion,speaker,text\na.wav,happy,s1,hello there\n"
                                        "broken.wav,sad,s2,\n")
        outs = []
        for name in ("f1", "f2"):
            assert main(["featurize", str(tmp_path / "m.csv"), "--out", str(tmp_path / name)]) == 0
            outs.append(tree(tmp_path / name))
        assert outs[0] == outs[1]
        stats = json.loads(outs[0]["stats.json"])
        assert stats["segments"] == 2 and [f["path"] for f in stats["failures"]] == ["broken.wav"]
        grid = load(tmp_path / "f1" / "a#0.edtf")
        assert grid.shape == (80, 256)


@pytest.fixture(scope="module")
def trained(toy, tmp_path_factory):
    out = tmp_path_factory.mktemp("diff")
    assert main(["train-diffusion", "--data", str(toy / "manifest.csv"), "--out", str(out), *SMALL]) == 0
    return out


class TestPipeline:
    def test_train_diffusion_rerun(self, toy, trained, tmp_path):
        assert main(["train-diffusion", "--data", str(toy / "manifest.csv"), "--out", str(tmp_path), *SMALL]) == 0
        assert tree(tmp_path) == tree(trained)
        assert (trained / "loss.csv").read_text().startswith("step,l_simple,l_vlb,l_total\n")

    def test_sample(self, trained, tmp_path):
        args = ["sample", "--checkpoint", str(trained), "--emotion", "angry", "--speaker", "toy-spk0",
                "--text", "a line", "--count", "3", "--seed", "4", *SMALL]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        a = tree(tmp_path / "a")
        assert a == tree(tmp_path / "b")
        assert sum(k.endswith(".edtf") for k in a) == 3 and sum(k.endswith(".pgm") for k in a) == 3
        assert load(tmp_path / "a" / "sample-00000#0.edtf").shape == (16, 64)

    def test_sample_count_zero(self, trained, tmp_path):
        assert main(["sample", "--checkpoint", str(trained), "--emotion", "sad", "--speaker", "x", "--count", "0",
                     "--out", str(tmp_path), *SMALL]) == 0
        assert (tmp_path / "manifest.csv").read_text() == "path,emotion,speaker,text\n"

    def test_eval_mad_identity(self, toy, tmp_path, capsys):
        m = str(toy / "manifest.csv")
        assert main(["eval-mad", "--real", m, "--syn", m, "--out", str(tmp_path), *SMALL]) == 0
        table = json.loads((tmp_path / "mad.json").read_text())["mad"]
        assert set(table.values()) == {0.0}

    def test_train_ser(self, toy, tmp_path):
        m = str(toy / "manifest.csv")
        assert main(["train-ser", "--train", m, "--dev", m, "--test", m, "--out", str(tmp_path), *SMALL]) == 0
        result = json.loads((tmp_path / "test.json").read_text())
        assert 0 <= result["uar"] <= 1 and (tmp_path / "checkpoint" / "checkpoint.json").exists()

    def test_augment_exp_rows(self, toy, trained, tmp_path):
        args = ["augment-exp", "--data", str(toy / "manifest.csv"), "--generator", str(trained),
                "--set", "experiment.seeds=0,1", "--set", "experiment.dev_fraction=0.34", *SMALL]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        rows = list(csv.reader(io.StringIO((tmp_path / "a" / "augment.csv").read_text())))
        assert len(rows) - 1 == 4 * 4 * 2  # folds x conditions x seeds
        assert {r[1] for r in rows[1:]} == {"real", "syn", "real+syn", "+mixup"}
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")
        report = json.loads((tmp_path / "a" / "augment.json").read_text())
        assert report[0]["config"]["run"]["preset"] == "toy"

    def test_cross_corpus(self, toy, trained, tmp_path):
        target = tmp_path / "target"
        assert main(["gen-toy", "--out", str(target), "--shift", "0.5", *SMALL]) == 0
        assert main(["cross-corpus", "--source", str(toy / "manifest.csv"), "--target", str(target / "manifest.csv"),
                     "--generator", str(trained), "--set", "experiment.seeds=0", "--set", "experiment.conditions=real",
                     "--set", "experiment.percentages=0,100", "--set", "experiment.dev_fraction=0.34",
                     "--out", str(tmp_path / "x"), *SMALL]) == 0
        curve = (tmp_path / "x" / "adaptation-curve.csv").read_text().splitlines()
        assert curve[0] == "percent,condition,uar_mean,uar_std" and len(curve) == 3
        assert (tmp_path / "x" / "cross-corpus.csv").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_3(toy, tmp_path):
    code = main(["train-diffusion", "--data", str(toy / "manifest.csv"), "--out", str(tmp_path), *SMALL,
                 "--set", "diffusion.lr=1e30", "--set", "diffusion.train_steps=20"])
    assert code == 3
