import json
import shutil

import numpy as np
import pytest

from ccmtad import cli
from ccmtad.config import ConfigError, RunConfig, build_config, parse_config_text, write_config
from ccmtad.data import load_csv

SMALL = ["--L", "12", "--d", "16", "--epochs", "10", "--batch_size", "128", "--learning_rate", "3e-3"]
ANOMALIES = "300:360:mean_shift:4;700:740:mean_shift:4"


def run(*args):
    return cli.main([str(a) for a in args])


def synth(out, *extra):
    return run("synth", "--output_dir", out, "--synth_train_length", 2500, "--synth_test_length", 1000, *extra)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A fixture directory with synth -> cluster -> train -> detect already run."""
    out = tmp_path_factory.mktemp("run")
    assert synth(out, "--synth_anomalies", ANOMALIES) == 0
    common = ["--output_dir", out, "--train_csv", out / "train.csv", "--test_csv", out / "test.csv"]
    assert run("cluster", *common) == 0
    assert run("train", *common, *SMALL) == 0
    assert run("detect", *common, "--h", 10) == 0
    return out, common


class TestConfig:
    def test_defaults_documented(self):
        cfg = RunConfig()
        assert cfg.L == 24 and cfg.delta == 5 and cfg.val_fraction == 0.2 and cfg.alpha_floor == 1e-6

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nd = 16\nM = 2..4  # range\nclip = -4,4\n")
        cfg = build_config(p, ["--d", "32", "--epochs=3"])
        assert cfg.d == 32 and cfg.epochs == 3 and cfg.m_values == [2, 3, 4] and cfg.clip_range == (-4.0, 4.0)

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config_text("nope = 1")
        with pytest.raises(ConfigError):
            build_config(None, ["--nope", "1"])

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            build_config(None, ["--d", "big"])
        with pytest.raises(ConfigError):
            build_config(None, ["--M", "x"]).m_values

    def test_write_round_trip(self, tmp_path):
        cfg = build_config(None, ["--d", "7", "--drop_channels", "a,b"])
        write_config(cfg, tmp_path / "c.cfg")
        assert build_config(tmp_path / "c.cfg") == cfg

    def test_unknown_key_in_file_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("bogus = 1\n")
        assert run("synth", "--config", p) == 2
        assert "bogus" in capsys.readouterr().err


class TestSynth:
    def test_files_parse_back(self, tmp_path):
        assert synth(tmp_path) == 0
        train, test = load_csv(tmp_path / "train.csv"), load_csv(tmp_path / "test.csv")
        assert train.n_steps == 2500 and test.n_steps == 1000
        assert test.labels.sum() == 0
        truth = json.loads((tmp_path / "ground_truth.json").read_text())
        assert truth["planted_clusters"] == [0, 0, 0, 1, 1, 1]

    def test_seed_changes_bytes(self, tmp_path):
        synth(tmp_path / "a")
        synth(tmp_path / "b", "--seed", 1)
        assert (tmp_path / "a/test.csv").read_bytes() != (tmp_path / "b/test.csv").read_bytes()

    def test_idempotent(self, tmp_path):
        synth(tmp_path / "a", "--synth_anomalies", ANOMALIES)
        synth(tmp_path / "b", "--synth_anomalies", ANOMALIES)
        for name in ("train.csv", "test.csv", "ground_truth.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_spec(self, tmp_path):
        assert synth(tmp_path, "--synth_anomalies", "10:50:mean_shift:1;40:60:mean_shift:1") == 2
        assert synth(tmp_path, "--synth_anomalies", "10:50:wobble:1") == 2
        assert synth(tmp_path, "--synth_blocks", "3,x") == 2


class TestCluster:
    def test_range_recommends_planted_count(self, tmp_path):
        synth(tmp_path, "--synth_blocks", "3,3,3", "--synth_train_length", 4000)
        assert run("cluster", "--output_dir", tmp_path, "--train_csv", tmp_path / "train.csv", "--M", "2..5") == 0
        payload = json.loads((tmp_path / "assignment.json").read_text())
        assert payload["recommended_M"] == 3 and payload["M"] == 3
        rows = (tmp_path / "silhouette.csv").read_text().splitlines()
        assert rows[0] == "M,silhouette,has_singleton" and len(rows) == 5

    def test_explicit_m(self, tmp_path):
        synth(tmp_path)
        assert run("cluster", "--output_dir", tmp_path, "--train_csv", tmp_path / "train.csv", "--M", 3) == 0
        assert json.loads((tmp_path / "assignment.json").read_text())["M"] == 3

    def test_missing_file(self, tmp_path, capsys):
        missing = tmp_path / "nowhere.csv"
        assert run("cluster", "--output_dir", tmp_path, "--train_csv", missing) == 2
        assert str(missing) in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, trained):
        out, _ = trained
        for name in ("checkpoint/manifest.json", "checkpoint/tensors.f64", "checkpoint/calibration.json", "train_report.json"):
            assert (out / name).is_file()
        report = json.loads((out / "train_report.json").read_text())
        assert report["val_loss"][-1] < report["initial_val_loss"]

    def test_deterministic(self, trained, tmp_path):
        out, common = trained
        other = tmp_path / "again"
        other.mkdir()
        shutil.copy(out / "assignment.json", other)
        args = ["--output_dir", other, "--train_csv", out / "train.csv"]
        assert run("train", *args, *SMALL) == 0
        for name in ("manifest.json", "tensors.f64", "calibration.json"):
            assert (out / "checkpoint" / name).read_bytes() == (other / "checkpoint" / name).read_bytes()
        assert (out / "train_report.json").read_bytes() == (other / "train_report.json").read_bytes()

    def test_zero_epochs(self, trained, tmp_path):
        out, _ = trained
        assert run("train", "--output_dir", tmp_path, "--train_csv", out / "train.csv", *SMALL, "--epochs", 0) == 0
        report = json.loads((tmp_path / "train_report.json").read_text())
        assert report["train_loss"] == []

    def test_divergence_exit_code(self, tmp_path, capsys):
        lines = ["a,b"] + [f"{np.sin(i)},{np.cos(i)}" for i in range(200)]
        lines[50] = "inf,1.0"
        (tmp_path / "train.csv").write_text("\n".join(lines) + "\n")
        with np.errstate(all="ignore"):
            code = run("train", "--output_dir", tmp_path, "--train_csv", tmp_path / "train.csv", "--M", 1, *SMALL)
        assert code == 3
        assert "epoch" in capsys.readouterr().err


class TestDetect:
    def test_segments_overlap_truth(self, trained):
        out, _ = trained
        segs = json.loads((out / "segments.json").read_text())
        truth = [(300, 360), (700, 740)]
        assert segs
        for a, b in truth:
            assert any(s["t_a_star"] < b and s["t_b_star"] >= a for s in segs)

    def test_score_csv_layout(self, trained):
        out, _ = trained
        lines = (out / "scores.csv").read_text().splitlines()
        assert lines[0] == "t,g,p,beta,s,label"
        assert lines[1].startswith("11,") and len(lines) == 1 + 1000 - 11

    def test_clean_stream_no_segments(self, trained, tmp_path):
        out, _ = trained
        synth(tmp_path, "--seed", 0)  # same process, no anomalies
        args = ["--output_dir", tmp_path, "--test_csv", tmp_path / "test.csv", "--checkpoint", out / "checkpoint"]
        assert run("detect", *args, "--h", 50, "--alpha", 0.001) == 0
        assert json.loads((tmp_path / "segments.json").read_text()) == []

    def test_channel_mismatch(self, trained, tmp_path):
        out, _ = trained
        synth(tmp_path, "--synth_blocks", "2,2")
        args = ["--output_dir", tmp_path, "--test_csv", tmp_path / "test.csv", "--checkpoint", out / "checkpoint"]
        assert run("detect", *args) == 4

    def test_truncated_stream_reproduces_prefix(self, trained, tmp_path):
        out, common = trained
        full = (out / "scores.csv").read_text().splitlines()
        lines = (out / "test.csv").read_text().splitlines()
        cut = 523
        (tmp_path / "test.csv").write_text("\n".join(lines[: cut + 1]) + "\n")
        args = ["--output_dir", tmp_path, "--test_csv", tmp_path / "test.csv", "--checkpoint", out / "checkpoint"]
        assert run("detect", *args, "--h", 10) == 0
        part = (tmp_path / "scores.csv").read_text().splitlines()
        assert [r.rsplit(",", 1)[0] for r in part] == [r.rsplit(",", 1)[0] for r in full[: len(part)]]
        s = np.array([float(r.split(",")[4]) for r in part[1:]])
        final = int(np.flatnonzero(s == 0)[-1])
        assert part[: final + 1] == full[: final + 1]


class TestEval:
    def test_hand_f1(self, tmp_path):
        rows = ["t,g,p,beta,s,label", "0,0.1,0.5,-1.0,0.0,0", "1,0.9,0.0,3.0,3.0,1", "2,0.2,0.5,-1.0,2.0,0", "3,0.1,0.5,-1.0,1.0,0"]
        (tmp_path / "scores.csv").write_text("\n".join(rows) + "\n")
        (tmp_path / "test.csv").write_text("x,label\n0,0\n0,1\n0,1\n0,0\n")
        assert run("eval", "--output_dir", tmp_path, "--test_csv", tmp_path / "test.csv") == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["f1"] == 2 / 3 and metrics["precision"] == 1.0 and metrics["recall"] == 0.5

    def test_misaligned_lengths(self, tmp_path):
        (tmp_path / "scores.csv").write_text("t,g,p,beta,s,label\n0,0.1,0.5,-1.0,0.0,0\n1,0.1,0.5,-1.0,0.0,0\n")
        (tmp_path / "test.csv").write_text("x,label\n0,0\n0,1\n0,1\n")
        assert run("eval", "--output_dir", tmp_path, "--test_csv", tmp_path / "test.csv") == 5

    def test_sweep_dominates_detect_point(self, trained):
        out, common = trained
        assert run("eval", *common, "--sweep", "--add-fap") == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["sweep"]["best_f1"] >= metrics["f1"]
        assert metrics["sweep"]["best_f1"] >= 0.8
        rows = (out / "sweep.csv").read_text().splitlines()
        assert rows[0] == "alpha,h,precision,recall,f1"
        assert max(float(r.split(",")[4]) for r in rows[1:]) == metrics["sweep"]["best_f1"]
        curve = np.loadtxt(out / "add_fap.csv", delimiter=",", skiprows=1)
        assert curve.shape[1] == 3

    def test_gradient_map_is_causal(self, tmp_path):
        synth(tmp_path, "--synth_blocks", "10,10", "--synth_train_length", 1200, "--synth_test_length", 100)
        args = ["--output_dir", tmp_path, "--train_csv", tmp_path / "train.csv", "--test_csv", tmp_path / "test.csv"]
        assert run("train", *args, "--L", 24, "--d", 8, "--epochs", 1) == 0
        assert run("detect", *args) == 0
        assert run("eval", *args, "--gradient-map", 15, 19) == 0
        grad = np.loadtxt(tmp_path / "gradient_map.csv", delimiter=",", skiprows=1)[:, 1:]
        assert grad.shape == (24, 20)
        assert grad[16:].max() <= 1e-12 and grad[:16].max() > 0

    def test_aggregate_protocol_two(self, trained, tmp_path):
        out, _ = trained
        ent = tmp_path / "e1"
        ent.mkdir()
        shutil.copy(out / "scores.csv", ent)
        shutil.copy(out / "test.csv", ent)
        assert run("eval", "--output_dir", tmp_path, "--aggregate", 2, "--entities", ent, ent) == 0
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["n_entities"] == 2 and metrics["per_entity_f1"][0] == metrics["f1"]

    def test_missing_score_file(self, tmp_path):
        assert run("eval", "--output_dir", tmp_path) == 2
