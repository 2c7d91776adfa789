import json
import os

import pytest

from brokerfee import cli

BASE_CONFIG = """\
model.epsilon = 0.5
model.rate_lower = -1.0
model.rate_upper = 1.0
model.n_steps = 50
model.n_paths = 2000
model.seed = 7
family.class = constant
family.cap = 1.0
family.coefficients = 0.01
run.mode = {mode}
run.budget = 6
run.depth = 2
run.branching = 2
run.trials = 10
run.out = {out}
"""


def write_config(tmp_path, mode, name="run.cfg"):
    out = tmp_path / f"out_{mode}"
    cfg = tmp_path / name
    cfg.write_text(BASE_CONFIG.format(mode=mode, out=out))
    return cfg, out


def test_parse_round_trip(tmp_path):
    cfg, _ = write_config(tmp_path, "simulate")
    config = cli.parse_config(cfg)
    echoed = config.echo()
    rewritten = tmp_path / "echo.cfg"
    rewritten.write_text("\n".join(f"{k} = {v}" for k, v in echoed.items()))
    again = cli.parse_config(rewritten)
    assert again.params == config.params
    assert again.run["mode"] == config.run["mode"]


def test_parse_error_cites_line(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.sigma = 1.0\nthis line has no equals\n")
    with pytest.raises(ValueError, match=r"bad\.cfg:2"):
        cli.parse_config(cfg)


def test_parse_error_names_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("run.mode = simulate\nrun.colour = blue\n")
    with pytest.raises(ValueError, match="unknown run key: colour"):
        cli.parse_config(cfg)


def test_unknown_mode_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("run.mode = frobnicate\n")
    with pytest.raises(ValueError, match="run.mode"):
        cli.parse_config(cfg)


def test_comments_and_blank_lines(tmp_path):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("# header\n\nrun.mode = report  # trailing comment\n")
    assert cli.parse_config(cfg).run["mode"] == "report"


def test_missing_config_is_exit_2(tmp_path, capsys):
    assert cli.run(tmp_path / "absent.cfg") == 2
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["simulate", "verify", "report"])
def test_mode_writes_manifest(tmp_path, mode, capsys):
    cfg, out = write_config(tmp_path, mode)
    assert cli.run(cfg) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["mode"] == mode
    assert manifest["seed"] == 7
    # every declared output exists and its hash is recorded
    for name, digest in manifest["outputs"].items():
        assert (out / name).exists()
        assert len(digest) == 64
    listed = set(manifest["outputs"])
    actual = {p for p in os.listdir(out) if p != "manifest.json"}
    assert listed == actual
    assert (out / "summary.txt").read_text().startswith(f"mode: {mode}")


def test_optimize_mode_consistent_with_convergence(tmp_path):
    cfg, out = write_config(tmp_path, "optimize")
    assert cli.run(cfg) == 0
    rows = (out / "sequence.csv").read_text().splitlines()
    final_best = float(rows[-1].rsplit(",", 1)[-1])
    conv = dict(line.split(",") for line in
                (out / "convergence.csv").read_text().splitlines()[1:])
    assert float(conv["limit_value"]) == pytest.approx(final_best, abs=1e-12)
    best = json.loads((out / "best_contract.json").read_text())
    assert best["class"] == "constant"
    assert best["value"] == pytest.approx(float(conv["limit_coef_0"]))


def test_oracle_mode_outputs(tmp_path):
    cfg, out = write_config(tmp_path, "oracle")
    assert cli.run(cfg) == 0
    rows = dict(line.split(",") for line in
                (out / "oracle.csv").read_text().splitlines()[1:])
    assert float(rows["value_gap"]) <= 1e-8
    assert int(rows["collapse_counterexamples"]) == 0


def test_deterministic_reruns(tmp_path):
    cfg, out1 = write_config(tmp_path, "verify")
    assert cli.run(cfg, threads=1) == 0
    cfg2, out2 = write_config(tmp_path, "verify", name="run2.cfg")
    cfg2.write_text(cfg.read_text().replace(str(out1), str(out2)))
    assert cli.run(cfg2, threads=1) == 0
    assert ((out1 / "verify.csv").read_bytes()
            == (out2 / "verify.csv").read_bytes())


def test_seed_flag_overrides_config(tmp_path):
    cfg, out = write_config(tmp_path, "report")
    assert cli.run(cfg, seed=99) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 99


def test_main_entry_point(tmp_path, capsys):
    cfg, out = write_config(tmp_path, "report")
    assert cli.main(["report", "--config", str(cfg)]) == 0
    assert "mode: report" in capsys.readouterr().out
