import json
import re
import subprocess
import sys

import pytest

from sail_lab.cli import EXIT_ABORTED, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, main
from sail_lab.config import ConfigError, RunConfig, load_config
from sail_lab.envs import load_demos

TINY_SAIL = {"ppo": {"total_episodes": 2, "memory_capacity": 128, "epochs_per_batch": 2}, "vae_epochs": 20,
             "inverse_epochs": 5, "random_steps": 500, "pretrain_epochs": 50, "critic_steps": 10,
             "eval_episodes": 2}


def write_config(path, **over):
    cfg = {"algorithm": "sail", "env": {"id": "two-ring"}, "demos": {"n": 1}, "sail": TINY_SAIL, "seed": 0}
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


def test_collect_demos_is_byte_deterministic(tmp_path, capsys):
    for name in ("a.demo", "b.demo"):
        assert main(["collect-demos", "--env", "point-mass", "--n", "3", "--seed", "4",
                     "--mod", "gain=0.5", "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a.demo").read_bytes() == (tmp_path / "b.demo").read_bytes()
    assert "trajectories 3" in capsys.readouterr().out
    assert len(load_demos(tmp_path / "a.demo")) == 3


def test_seed_falls_back_to_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("SAIL_LAB_SEED", "4")
    main(["collect-demos", "--env", "point-mass", "--n", "2", "--out", str(tmp_path / "env.demo")])
    monkeypatch.delenv("SAIL_LAB_SEED")
    main(["collect-demos", "--env", "point-mass", "--n", "2", "--seed", "4", "--out", str(tmp_path / "flag.demo")])
    main(["collect-demos", "--env", "point-mass", "--n", "2", "--out", str(tmp_path / "zero.demo")])
    data = {p: (tmp_path / p).read_bytes() for p in ("env.demo", "flag.demo", "zero.demo")}
    assert data["env.demo"] == data["flag.demo"] != data["zero.demo"]
    monkeypatch.setenv("SAIL_LAB_SEED", "four")
    assert main(["collect-demos", "--env", "point-mass", "--out", str(tmp_path / "x")]) == EXIT_INPUT


@pytest.mark.parametrize("argv", [
    ["collect-demos", "--env", "cartpole", "--out", "x"],
    ["collect-demos", "--env", "point-mass", "--n", "0", "--out", "x"],
    ["collect-demos", "--env", "point-mass", "--mod", "speed=2", "--out", "x"],
    ["train"],
    ["no-such-command"],
    ["evaluate", "--checkpoint", "missing.ckpt"],
    ["verify-decomp", "--problem", "missing.decomp"],
    ["plot", "--metrics", "missing.csv", "--out", "x.svg"],
])
def test_bad_input_exits_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INPUT
    assert capsys.readouterr().err


def test_malformed_config_names_the_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", sail={**TINY_SAIL, "ppo": {"kl_lamda": 1.0}})
    assert main(["train", "--config", str(cfg)]) == EXIT_INPUT
    assert "sail.ppo.kl_lamda" in capsys.readouterr().err
    cfg = write_config(tmp_path / "c.json", env={"id": "two-ring", "horizon": "long"})
    assert main(["train", "--config", str(cfg)]) == EXIT_INPUT
    assert "env.horizon" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == EXIT_INPUT
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_INPUT


def test_config_errors_carry_dotted_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write_config(tmp_path / "c.json", algorithm="dagger"))
    assert info.value.key == "algorithm"


def test_config_echo_roundtrips(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", out=str(tmp_path / "run")))
    (tmp_path / "echo.json").write_text(cfg.dumps())
    again = load_config(tmp_path / "echo.json")
    assert again == cfg and again.dumps() == cfg.dumps()
    assert RunConfig().validate().sail.ppo.kl_lambda == cfg.sail.ppo.kl_lambda


def test_unwritable_output_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", "--config", str(cfg), "--out", str(blocker / "run")]) == EXIT_INPUT
    assert main(["collect-demos", "--env", "two-ring", "--out", str(blocker / "d.demo")]) == EXIT_INPUT


def test_train_writes_identical_metrics_and_evaluates(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", sail={**TINY_SAIL, "checkpoint_every": 1})
    for run in ("r1", "r2"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / run), "--seed", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert re.search(r"^init: mean_return", out, re.M) and re.search(r"^best: mean_return", out, re.M)
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    # config.json differs only in its echoed output directory
    for name in ("metrics.csv", "policy_final.ckpt", "policy_best.ckpt", "checkpoints/policy_ep0002.ckpt"):
        assert (r1 / name).read_bytes() == (r2 / name).read_bytes(), name
    report = json.loads((r1 / "report.json").read_text())
    assert {"init", "final", "best"} <= set(report) and report["seed"] == 3
    manifest = json.loads((r1 / "manifest.json").read_text())
    assert "metrics.csv" in manifest["files"]
    echoed = load_config(r1 / "config.json")
    assert echoed.seed == 3 and echoed.sail.ppo.total_episodes == 2

    assert main(["evaluate", "--checkpoint", str(r1 / "policy_final.ckpt"), "--episodes", "3"]) == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert line.startswith("episodes 3 ") and "success_rate" in line
    assert main(["evaluate", "--checkpoint", str(r1 / "policy_final.ckpt"), "--env", "point-mass"]) == EXIT_INPUT


def test_zero_episodes_reports_pretrained_policy(tmp_path):
    sail = {**TINY_SAIL, "ppo": {"total_episodes": 0}}
    cfg = write_config(tmp_path / "c.json", sail=sail)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["init"] == report["final"]


@pytest.mark.parametrize("algorithm", ["bc", "gail_lite", "action_vae_bc"])
def test_baseline_algorithms_run(tmp_path, algorithm):
    cfg = write_config(tmp_path / "c.json", algorithm=algorithm,
                       baselines={"bc_epochs": 5, "gail_disc_steps": 2, "action_vae_epochs": 5})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "policy_final.ckpt"),
                 "--episodes", "2"]) == EXIT_OK


def test_diverging_training_exits_4(tmp_path, capsys, monkeypatch):
    from sail_lab import cli
    from sail_lab.errors import StageError

    def diverge(*args, **kwargs):
        raise StageError("critic", "critic loss diverged at step 3: nan")

    monkeypatch.setattr(cli, "sail_train", diverge)
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_ABORTED
    assert "[critic]" in capsys.readouterr().err


def test_verify_decomp_exit_codes(tmp_path, capsys):
    assert main(["verify-decomp", "--problem", "two-ring"]) == EXIT_INFEASIBLE
    out = capsys.readouterr().out
    assert "status: INFEASIBLE" in out and "psi2 > psi1 > psi2" in out
    (tmp_path / "ok.decomp").write_text("states 1 2\nprefer 1 2 > 1 1\n")
    assert main(["verify-decomp", "--problem", str(tmp_path / "ok.decomp")]) == EXIT_OK
    assert "status: FEASIBLE" in capsys.readouterr().out
    (tmp_path / "bad.decomp").write_text("states 1 2\nprefer 1 3 > 1 1\n")
    assert main(["verify-decomp", "--problem", str(tmp_path / "bad.decomp")]) == EXIT_INPUT


def test_plot_has_one_vertex_per_row(tmp_path):
    from sail_lab.train import write_metrics
    rows = [{"episode": k, "env_steps": 10 * k, "mean_return": k * 0.5, "success_rate": 0.0, "w_estimate": 1.0 / (k + 1),
             "kl_to_prior": 0.1, "clip_obj": 0.0, "vae_loss": 0.0, "inv_loss": 0.0} for k in range(7)]
    write_metrics(rows, tmp_path / "m.csv")
    svg = tmp_path / "curve.svg"
    assert main(["plot", "--metrics", str(tmp_path / "m.csv"), "--out", str(svg)]) == EXIT_OK
    polylines = re.findall(r'points="([^"]*)"', svg.read_text())
    assert len(polylines) == 3 and all(len(p.split()) == 7 for p in polylines)
    assert main(["plot", "--metrics", str(tmp_path / "m.csv"), "--out", str(svg), "--columns", "nope"]) == EXIT_INPUT


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sail_lab.cli", "verify-decomp", "--problem", "two-ring"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_INFEASIBLE and "INFEASIBLE" in proc.stdout
