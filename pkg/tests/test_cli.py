import csv
import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from coughscope import cli
from coughscope.signal_prep import AudioSignal, write_wav
from conftest import burst_wav


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(out), "--n-per-class", "4", "--seed", "5"]) == 0
    return out


class TestExtract:
    def test_three_files(self, tmp_path):
        d = tmp_path / "in"
        (d / "sub").mkdir(parents=True)
        for i, p in enumerate([d / "a.wav", d / "b.wav", d / "sub" / "c.wav"]):
            burst_wav(p, seed=i)
        assert cli.main(["extract", "--input", str(d), "--out", str(tmp_path / "f.csv")]) == 0
        table = rows(tmp_path / "f.csv")
        assert len(table) == 4 and len(table[0]) == 46
        assert [r[0] for r in table[1:]] == ["a.wav#0", "b.wav#0", "sub/c.wav#0"]

    def test_silent_file(self, tmp_path, caplog):
        write_wav(tmp_path / "s.wav", AudioSignal(np.zeros(16000), 16000))
        with caplog.at_level(logging.WARNING):
            code = cli.main(["extract", "--wav", str(tmp_path / "s.wav"), "--out", str(tmp_path / "f.csv")])
        assert code == 0
        assert len(rows(tmp_path / "f.csv")) == 1
        assert "no cough segment" in caplog.text

    def test_corrupt_among_valid(self, tmp_path, caplog):
        good = [burst_wav(tmp_path / f"g{i}.wav", seed=i) for i in range(2)]
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"RIFF....WAVEjunk")
        with caplog.at_level(logging.ERROR):
            code = cli.main(["extract", "--wav", *map(str, good + [bad]), "--out", str(tmp_path / "f.csv")])
        assert code == 1
        assert len(rows(tmp_path / "f.csv")) == 3
        assert "bad.wav" in caplog.text

    def test_workers_do_not_change_output(self, tmp_path):
        d = tmp_path / "in"
        d.mkdir()
        for i in range(4):
            burst_wav(d / f"{i}.wav", seed=i)
        cli.main(["extract", "--input", str(d), "--out", str(tmp_path / "a.csv")])
        cli.main(["extract", "--input", str(d), "--out", str(tmp_path / "b.csv"), "--workers", "2"])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestWorkflow:
    def test_train_eval_explain_correlate(self, synth_dir, tmp_path):
        m = str(synth_dir / "manifest.csv")
        feats = tmp_path / "features.csv"
        assert cli.main(["train", "--manifest", m, "--epochs", "2", "--features-out", str(feats),
                         "--out", str(tmp_path / "run")]) == 0
        ckpt = tmp_path / "run" / "checkpoint.json"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--manifest", m, "--features", str(feats),
                         "--out", str(tmp_path / "m.json"), "--csv", str(tmp_path / "m.csv")]) == 0
        report = json.loads((tmp_path / "m.json").read_text())
        assert len(report["confusion_matrix"]) == 4
        assert cli.main(["explain", "--checkpoint", str(ckpt), "--manifest", m,
                         "--out", str(tmp_path / "imp.csv"), "--per-sample", str(tmp_path / "ps.csv")]) == 0
        imp = rows(tmp_path / "imp.csv")
        assert imp[0] == ["feature", "weight"] and len(imp) == 15
        assert abs(sum(float(r[1]) for r in imp[1:]) - 1) < 1e-6
        assert len(rows(tmp_path / "ps.csv")) == 17
        assert cli.main(["correlate", "--symptoms", str(synth_dir / "symptoms.csv"),
                         "--out", str(tmp_path / "c.csv")]) == 0
        assert len(rows(tmp_path / "c.csv")) == 14

    def test_config_precedence(self, synth_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochs": 5, "task": "cough_only"}, "seed": 3}))
        m = str(synth_dir / "manifest.csv")
        assert cli.main(["train", "--config", str(cfg), "--manifest", m, "--epochs", "1",
                         "--out", str(tmp_path / "r")]) == 0
        assert len(rows(tmp_path / "r" / "history.csv")) == 2       # flag beats config
        ckpt = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
        assert ckpt["task"] == "cough_only"                          # config beats default
        assert not (tmp_path / "r" / "importance.csv").exists()

    def test_synth_is_reproducible(self, synth_dir, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path), "--n-per-class", "4", "--seed", "5"]) == 0
        for name in ("manifest.csv", "symptoms.csv", "profiles.json", "wav/asthma_0003.wav"):
            assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()

    def test_custom_profiles(self, synth_dir, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["synth", "--out", str(out), "--n-per-class", "1",
                         "--profiles", str(synth_dir / "profiles.json")]) == 0
        assert len(rows(out / "manifest.csv")) == 5


class TestErrors:
    def test_missing_checkpoint(self, synth_dir, tmp_path):
        assert cli.main(["explain", "--checkpoint", str(tmp_path / "none.json"),
                         "--manifest", str(synth_dir / "manifest.csv"), "--out", str(tmp_path / "x")]) == 1

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1, 2]")
        assert cli.main(["correlate", "--symptoms", "x.csv", "--out", "y", "--config", str(cfg)]) == 1

    @pytest.mark.parametrize("text", ['{"sed": 3}', '{"fusion": {"hiden1": 3}}',
                                      '{"synth": {"n_per_clas": 3}}', '{"train": 5}'])
    def test_unknown_config_key(self, tmp_path, text):
        cfg = tmp_path / "c.json"
        cfg.write_text(text)
        assert cli.main(["correlate", "--symptoms", "x.csv", "--out", "y", "--config", str(cfg)]) == 1

    def test_fusion_section_applies(self, synth_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"fusion": {"hidden1": 8}, "train": {"epochs": 1}}')
        assert cli.main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--config", str(cfg),
                         "--out", str(tmp_path / "r")]) == 0
        ckpt = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
        assert ckpt["fusion_config"]["hidden1"] == 8

    def test_invalid_train_value(self, synth_dir, tmp_path):
        assert cli.main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--alpha", "2",
                         "--out", str(tmp_path)]) == 1

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["extract", "--out", "x"], ["synth"]])
    def test_usage(self, argv):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2


def _subparsers():
    parser = cli.build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


@pytest.mark.parametrize("name", sorted(_subparsers()))
def test_help_documents_every_flag(name, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([name, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for action in _subparsers()[name]._actions:
        for flag in action.option_strings:
            assert flag in text


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "coughscope.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "extract" in out.stdout and "Exit codes" in out.stdout
