"""Config-file parsing, exit codes, and end-to-end subcommand runs."""

import numpy as np
import pytest

from langfold import cli
from langfold import util as U

FAST_CFG = """\
# narrow spawn band keeps settling quick
side_min = 0.44
side_max = 0.48
center_offset = 0.03
yaw_deg = 5
"""


@pytest.fixture()
def fast_cfg(tmp_path):
    p = tmp_path / "fast.cfg"
    p.write_text(FAST_CFG)
    return str(p)


class TestRunConfig:
    def test_defaults(self):
        cfg = cli.RunConfig()
        assert cfg.seed == 0
        assert cfg.demos_per_cell == 100
        assert cfg.episodes_per_cell == 50
        assert cfg.gated is True

    def test_parse_values_and_comments(self):
        cfg = cli.parse_run_config(
            "seed = 9 # trailing comment\n\n# full-line comment\nlr=0.001\ngated = false\n"
        )
        assert cfg.seed == 9
        assert cfg.lr == pytest.approx(1e-3)
        assert cfg.gated is False

    def test_unknown_key_is_named(self):
        with pytest.raises(cli.ConfigError, match="frobnicate"):
            cli.parse_run_config("frobnicate = 3\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(cli.ConfigError, match="2"):
            cli.parse_run_config("seed = 1\nbatch = many\n")

    def test_malformed_line(self):
        with pytest.raises(cli.ConfigError, match="key = value"):
            cli.parse_run_config("just some words\n")

    def test_bool_spellings(self):
        for raw, want in [("1", True), ("yes", True), ("on", True),
                          ("0", False), ("no", False), ("off", False)]:
            assert cli.parse_run_config(f"gated = {raw}\n").gated is want
        with pytest.raises(cli.ConfigError):
            cli.parse_run_config("gated = maybe\n")

    def test_flag_overrides_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("seed = 5\n" + FAST_CFG)
        out = tmp_path / "a.pgm"
        assert cli.main(["render", "--config", str(cfg), "--seed", "6",
                         "--out", str(out)]) == 0
        ref = tmp_path / "b.pgm"
        assert cli.main(["render", "--seed", "6", "--config", str(cfg),
                         "--out", str(ref)]) == 0
        assert out.read_bytes() == ref.read_bytes()


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert cli.main([]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert cli.main(["gen-data"]) == 1

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["--help"])
        assert e.value.code == 0
        assert "gen-data" in capsys.readouterr().out

    def test_subcommand_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["rollout", "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--policy", "--oracle", "--task", "--direction",
                     "--template", "--dump", "--seed", "--config"):
            assert flag in out

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("zzyzx = 1\n")
        assert cli.main(["render", "--config", str(cfg), "--out",
                         str(tmp_path / "x.pgm")]) == 1
        assert "zzyzx" in capsys.readouterr().err

    def test_rollout_needs_a_policy(self, capsys):
        assert cli.main(["rollout", "--task", "corner",
                         "--direction", "bottom_left"]) == 1

    def test_rollout_rejects_bad_pairing(self, capsys):
        assert cli.main(["rollout", "--oracle", "--task", "half",
                         "--direction", "bottom_left"]) == 1
        assert "not valid" in capsys.readouterr().err

    def test_rollout_rejects_bad_template(self, capsys):
        assert cli.main(["rollout", "--oracle", "--task", "corner",
                         "--direction", "bottom_left", "--template", "99"]) == 1

    def test_missing_dataset_is_runtime_error(self, tmp_path, capsys):
        assert cli.main(["train-edges", "--data", str(tmp_path / "no.ldom"),
                         "--out", str(tmp_path / "o.ldck")]) == 2

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        assert cli.main(["eval", "--policy", str(tmp_path / "no.ldck"),
                         "--out", str(tmp_path / "r.csv")]) == 2


class TestGenData:
    def test_deterministic_across_runs_and_workers(self, tmp_path, fast_cfg):
        a, b = tmp_path / "a.ldom", tmp_path / "b.ldom"
        base = ["gen-data", "--config", fast_cfg, "--demos-per-cell", "1",
                "--seed", "11"]
        assert cli.main(base + ["--out", str(a), "--workers", "1"]) == 0
        assert cli.main(base + ["--out", str(b), "--workers", "2"]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestRender:
    def test_writes_depth_image(self, tmp_path, fast_cfg, capsys):
        out = tmp_path / "d.pgm"
        assert cli.main(["render", "--config", fast_cfg, "--seed", "2",
                         "--out", str(out)]) == 0
        img = U.read_pgm16(out)
        assert img.shape == (64, 64)
        assert img.max() > 0  # the cloth is visible


class TestPipeline:
    def test_stages_chain_and_rollout_prints(self, tmp_path, fast_cfg,
                                             small_dataset, capsys):
        data, _ = small_dataset
        e, p, s = (str(tmp_path / n) for n in ("e.ldck", "p.ldck", "s.ldck"))
        common = ["--config", fast_cfg, "--batch", "4"]

        assert cli.main(["train-edges", "--data", str(data), "--out", e,
                         "--epochs", "2"] + common) == 0
        assert cli.main(["train-policy", "--data", str(data), "--edges", e,
                         "--out", p, "--epochs", "1"] + common) == 0
        assert cli.main(["train-success", "--data", str(data), "--policy", p,
                         "--out", s, "--epochs", "1"] + common) == 0
        capsys.readouterr()

        # stage-1 checkpoint alone cannot drive the neural policy
        assert cli.main(["rollout", "--policy", e, "--task", "corner",
                         "--direction", "bottom_left", "--config", fast_cfg]) == 2

        dump = tmp_path / "maps"
        cfg2 = tmp_path / "open_loop.cfg"
        cfg2.write_text(FAST_CFG + "gated = false\nt_max = 1\n")
        assert cli.main(["rollout", "--policy", s, "--task", "corner",
                         "--direction", "bottom_left", "--template", "3",
                         "--seed", "4", "--config", str(cfg2),
                         "--dump", str(dump)]) == 0
        out = capsys.readouterr().out
        assert "instruction:" in out and "success:" in out and "step 0" in out
        assert (dump / "step0_place.pgm").exists()
        pick = (dump / "step0_pick.csv").read_text().strip().split("\n")
        assert pick[0] == "node,x,y,probability"

    def test_oracle_rollout_prints_success(self, fast_cfg, capsys):
        assert cli.main(["rollout", "--oracle", "--task", "triangle",
                         "--direction", "top_right", "--seed", "1",
                         "--config", fast_cfg]) == 0
        out = capsys.readouterr().out
        assert "success: True" in out

    def test_eval_writes_report(self, tmp_path, fast_cfg, small_dataset, capsys):
        data, _ = small_dataset
        e, p, s = (str(tmp_path / n) for n in ("e.ldck", "p.ldck", "s.ldck"))
        common = ["--config", fast_cfg, "--batch", "4", "--epochs", "1"]
        assert cli.main(["train-edges", "--data", str(data), "--out", e] + common) == 0
        assert cli.main(["train-policy", "--data", str(data), "--edges", e,
                         "--out", p] + common) == 0
        assert cli.main(["train-success", "--data", str(data), "--policy", p,
                         "--out", s] + common) == 0
        report = tmp_path / "r.csv"
        assert cli.main(["eval", "--policy", s, "--out", str(report),
                         "--episodes-per-cell", "1", "--t-max", "1",
                         "--config", fast_cfg]) == 0
        rows = [l for l in report.read_text().strip().split("\n")
                if not l.startswith("#")]
        assert len(rows) == 10  # header plus one row per cell
