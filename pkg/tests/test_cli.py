import json

import pytest

from semgcnn.cli import derive_seeds, main, read_config_file
from semgcnn.nn.layers import Linear

SYNTH_SMALL = ["--subjects", "2", "--days", "2", "--postures", "2", "--repetitions", "1",
               "--contraction-s", "0.5", "--rest-s", "0.5", "--pool-size", "8"]
RUN_FAST = ["--epochs", "1", "--minibatches", "4", "--jobs", "1"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--force"] + SYNTH_SMALL) == 0
    return out


class TestSynth:
    def test_writes_eight_sessions(self, small_data):
        assert len(list(small_data.glob("*.semg"))) == 8
        prov = json.loads((small_data / "config.json").read_text())
        assert prov["seeds"] == derive_seeds(0) and "manifest_sha256" in prov

    def test_same_seed_same_manifest_hash(self, tmp_path, small_data):
        assert main(["synth", "--out", str(tmp_path)] + SYNTH_SMALL) == 0
        a = json.loads((small_data / "config.json").read_text())["manifest_sha256"]
        b = json.loads((tmp_path / "config.json").read_text())["manifest_sha256"]
        assert a == b
        for f in small_data.glob("*.semg"):
            assert f.read_bytes() == (tmp_path / f.name).read_bytes()

    def test_refuses_non_empty_dir(self, small_data, capsys):
        assert main(["synth", "--out", str(small_data)] + SYNTH_SMALL) == 2
        assert "--force" in capsys.readouterr().err

    def test_env_var_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEMGCNN_DATA", str(tmp_path / "envdata"))
        assert main(["synth", "--subjects", "1", "--days", "1", "--postures", "1", "--repetitions", "1",
                     "--contraction-s", "0.5", "--rest-s", "0.5", "--pool-size", "4"]) == 0
        assert (tmp_path / "envdata" / "s1_d1_p1.semg").exists()


class TestRun:
    def test_single_session_outputs(self, small_data, tmp_path):
        out = tmp_path / "res"
        code = main(["run", "--data", str(small_data), "--out", str(out), "--strategy", "single-session"] + RUN_FAST)
        assert code == 0
        rows = (out / "cells.csv").read_text().splitlines()
        intra = [r for r in rows if ",intra," in r]
        assert len(intra) == 16
        assert (out / "table_single-session_inter-posture.csv").exists()
        assert len(list((out / "curves").glob("*.csv"))) == 16
        prov = json.loads((out / "config.json").read_text())
        assert prov["resolved_train_config"]["epochs"] == 1 and prov["n_failed"] == 0

    def test_byte_identical_reruns(self, small_data, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["run", "--data", str(small_data), "--out", str(out), "--strategy", "two-posture",
                         "--no-curves"] + RUN_FAST) == 0
            outs.append((out / "cells.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_dry_run_lists_jobs(self, small_data, tmp_path, capsys):
        assert main(["run", "--data", str(small_data), "--out", str(tmp_path), "--strategy", "all", "--dry-run"]) == 0
        out = capsys.readouterr().out
        # 8 single-session, 4 two-posture (P1+P2 per subject-day) and 4 two-day (D1+D2 per
        # subject-posture, intra only since D6-D8 are absent) instances, 2 folds each
        assert "32 planned jobs" in out
        assert not (tmp_path / "cells.csv").exists()

    def test_test_flag_adds_holdout_table(self, small_data, tmp_path):
        out = tmp_path / "t"
        assert main(["run", "--data", str(small_data), "--out", str(out), "--strategy", "single-session",
                     "--subjects", "1", "--days", "1", "--test", "--no-curves"] + RUN_FAST) == 0
        rows = (out / "test_single-session.csv").read_text().splitlines()
        assert rows[0].startswith("eval_kind,mu_se")
        assert {r.split(",")[0] for r in rows[1:]} == {"test-inter-day", "test-inter-posture"}

    def test_failed_jobs_give_exit_1(self, small_data, tmp_path):
        out = tmp_path / "f"
        code = main(["run", "--data", str(small_data), "--out", str(out), "--strategy", "single-session",
                     "--epochs", "1", "--minibatches", "100000", "--jobs", "1", "--no-curves"])
        assert code == 1
        assert len((out / "failures.csv").read_text().splitlines()) == 17

    def test_missing_dataset_is_usage_error(self, tmp_path):
        assert main(["run", "--data", str(tmp_path / "nope")]) == 2

    def test_config_file_with_override(self, small_data, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# toy run\ndata = {small_data}\nstrategy = two-posture\nepochs = 3\ndry_run = true\n")
        assert main(["run", "--config", str(cfg), "--strategy", "single-session"]) == 0
        assert "16 planned jobs" in capsys.readouterr().out

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = 0.1\n")
        assert main(["run", "--config", str(cfg)]) == 2

    def test_report_rebuilds_tables(self, small_data, tmp_path, capsys):
        out = tmp_path / "r"
        main(["run", "--data", str(small_data), "--out", str(out), "--strategy", "single-session",
              "--subjects", "1", "--no-curves"] + RUN_FAST)
        capsys.readouterr()
        (out / "table_single-session_inter-posture.csv").unlink()
        assert main(["report", str(out)]) == 0
        assert (out / "table_single-session_inter-posture.csv").exists()
        assert "single-session (inter-posture)" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_layer_subset_passes(self, capsys):
        assert main(["gradcheck", "--layer", "fc3", "fc_out", "--samples", "4"]) == 0
        out = capsys.readouterr().out
        assert "fc3.weight" in out and "conv1.weight" not in out and "PASS" in out

    def test_corrupted_backward_fails(self, monkeypatch):
        original = Linear.backward

        def broken(self, g):
            gx = original(self, g)
            self.params["weight"].grad = self.params["weight"].grad * 1.01
            return gx

        monkeypatch.setattr(Linear, "backward", broken)
        assert main(["gradcheck", "--layer", "fc_out", "--samples", "4"]) == 1

    def test_unknown_layer(self):
        assert main(["gradcheck", "--layer", "nosuch"]) == 2


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == 2


def test_config_parser(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("a = 1  # comment\n\nb-c = x y\n")
    assert read_config_file(p) == {"a": "1", "b_c": "x y"}
