import csv
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rearrange.cli import run_command
from rearrange.config import ConfigError, ExperimentConfig, canonical_text, load_config, parse_config
from rearrange.metrics import EpisodeSummary, accuracy, compute_metrics, metrics_csv, summaries_from_log

SMALL = """
[env]
n_envs = 4

[train]
steps = 128
"""


def ep(outcome, steps=100, path=1.0, reached=True, d=0.0):
    return EpisodeSummary(outcome, steps, path, reached, (), d)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# metrics ------------------------------------------------------------------------------


def test_metrics_example():
    rep = compute_metrics([ep("Success", 400, 12.0), ep("Collision", 37, 3.0)])
    assert rep.sr == 50.0 and rep.exec_time == 400 and rep.traj_len == 12.0


def test_metrics_without_successes_are_absent():
    rep = compute_metrics([ep("Collision"), ep("Outside", reached=False)])
    assert rep.sr == 0.0 and rep.exec_time is None and rep.traj_len is None
    assert rep.reach == 50.0
    row = rep.row("x")
    assert row["exec_time"] == "" and row["traj_len"] == ""


def test_all_successes_reach_everything():
    rep = compute_metrics([ep("Success", 10 * i) for i in range(1, 5)])
    assert rep.sr == 100.0 and rep.reach == 100.0 and rep.exec_time == 25.0


def test_summary_validation():
    with pytest.raises(ValueError):
        ep("Success", path=-1.0)
    with pytest.raises(ValueError):
        ep("Success", steps=1001)
    with pytest.raises(ValueError):
        compute_metrics([])


def test_accuracy_cases():
    assert accuracy(0.0, 0.1) == (1.0, 0.0)
    assert accuracy(0.1, 0.1) == (0.0, 1.0)
    assert accuracy(7.0, 0.1) == (0.0, 1.0)
    assert accuracy(0.05, 0.1) == (0.5, 0.5)
    with pytest.raises(ValueError):
        accuracy(-1.0, 0.1)
    with pytest.raises(ValueError):
        accuracy(0.1, 0.0)


@given(st.floats(0, 1e6), st.floats(1e-9, 1e3))
def test_accuracy_sums_to_one(d, eps):
    acc, err = accuracy(d, eps)
    assert 0.0 <= err <= 1.0
    assert math.isclose(acc + err, 1.0, abs_tol=1e-15)


def test_error_is_mean_over_episodes():
    rep = compute_metrics([ep("Success", d=0.0), ep("Collision", d=0.05), ep("Outside", d=3.0)], 0.1)
    assert rep.error == pytest.approx(0.5) and rep.acc == pytest.approx(0.5)


# config ---------------------------------------------------------------------------------


def test_config_round_trip():
    cfg = parse_config("[camera]\nfov_h = 69\n[reward]\npreset = swr\n[task]\nformation = cross\nn_objects = 5\n")
    assert math.degrees(cfg.camera.fov_h) == pytest.approx(69)
    text = canonical_text(cfg)
    assert canonical_text(parse_config(text)) == text
    assert canonical_text(ExperimentConfig()) == load_config(None)[1]


def test_config_errors(tmp_path):
    for bad in ("[nope]\nx = 1\n", "[env]\nbogus = 1\n", "[env]\nn_envs = many\n", "[reward]\npreset = x\n",
                "[train]\nnet = huge\n", "not an ini"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


# CLI ------------------------------------------------------------------------------------


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return str(p)


def test_eval_is_byte_identical(tmp_path, small_cfg):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert run_command(["eval", "--config", small_cfg, "--episodes", "8", "--seed", "1", "--out", str(out)]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "run0" / "config.ini").exists() and (tmp_path / "run0" / "checkpoints").is_dir()


def test_metrics_recomputed_from_logs(tmp_path, small_cfg):
    out = tmp_path / "r"
    assert run_command(["eval", "--config", small_cfg, "--policy", "random", "--episodes", "6", "--out", str(out),
                        "--record", "1"]) == 0
    lines = (out / "logs" / "episodes.jsonl").read_text().splitlines()
    recs = summaries_from_log(lines)
    assert len(recs) == 6
    rebuilt = metrics_csv([("random", compute_metrics(recs, 0.10))])
    assert rebuilt == (out / "metrics.csv").read_text()
    traj = (out / "logs" / "trajectory_env0.jsonl").read_text().splitlines()
    assert json.loads(traj[-1])["type"] == "terminal"


def test_expert_command_writes_sr_row(tmp_path, small_cfg):
    out = tmp_path / "e"
    assert run_command(["expert", "--config", small_cfg, "--task", "pair", "--episodes", "16", "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert rows[0]["label"] == "expert/pair" and float(rows[0]["sr"]) >= 90.0
    assert list(rows[0]) == ["label", "episodes", "sr", "reach", "exec_time", "traj_len", "error", "acc"]


def test_ablate_has_four_presets(tmp_path, small_cfg):
    out = tmp_path / "a"
    assert run_command(["ablate", "--config", small_cfg, "--steps", "128", "--eval-episodes", "2",
                        "--out", str(out)]) == 0
    rows = read_csv(out / "ablation.csv")
    assert [r["preset"] for r in rows] == ["base", "swr", "swr_td", "ours"]
    assert len(read_csv(out / "ablation_runs.csv")) == 4


def test_train_distill_eval_pipeline(tmp_path, small_cfg, capsys):
    t = tmp_path / "t"
    assert run_command(["train-teacher", "--config", small_cfg, "--steps", "128", "--eval-episodes", "2",
                        "--out", str(t)]) == 0
    ckpt = str(t / "checkpoints" / "teacher.npz")
    assert (t / "logs" / "train.jsonl").read_text().strip()
    assert run_command(["eval", "--config", small_cfg, "--policy", "teacher", "--checkpoint", ckpt,
                        "--episodes", "2", "--out", str(tmp_path / "te")]) == 0
    for kind in ("keypoint", "depth"):
        d = tmp_path / f"d_{kind}"
        assert run_command(["distill", "--config", small_cfg, "--teacher", ckpt, "--student", kind,
                            "--iterations", "2", "--n-envs", "2", "--out", str(d)]) == 0
        assert len((d / "logs" / "distill.jsonl").read_text().splitlines()) == 2
        assert run_command(["eval", "--config", small_cfg, "--policy", "student", "--checkpoint",
                            str(d / "checkpoints" / "student.npz"), "--episodes", "2",
                            "--out", str(tmp_path / f"se_{kind}")]) == 0
    # a different config refuses the checkpoint unless forced
    other = tmp_path / "other.ini"
    other.write_text(SMALL + "\n[reward]\npreset = swr\n")
    capsys.readouterr()
    rc = run_command(["eval", "--config", str(other), "--policy", "teacher", "--checkpoint", ckpt,
                      "--episodes", "2", "--out", str(tmp_path / "x")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rc != 0 and err["error"] == "checkpoint"
    assert run_command(["eval", "--config", str(other), "--policy", "teacher", "--checkpoint", ckpt,
                        "--episodes", "2", "--force", "--out", str(tmp_path / "x")]) == 0


def test_render_command(tmp_path, small_cfg):
    out = tmp_path / "rr"
    assert run_command(["eval", "--config", small_cfg, "--episodes", "1", "--record", "1", "--out", str(out)]) == 0
    log = out / "logs" / "trajectory_env0.jsonl"
    assert run_command(["render", "--config", small_cfg, "--log", str(log), "--every", "50", "--noise",
                        "--out", str(out)]) == 0
    assert any((out / "frames").glob("*_rgb.png")) and any((out / "frames").glob("*_act.bin"))


@pytest.mark.parametrize("argv,code,kind", [
    (["eval", "--bogus"], 2, "usage"),
    (["frobnicate"], 2, "usage"),
    (["eval", "--config", "/nonexistent/x.ini"], 1, "config"),
    (["eval", "--policy", "teacher"], 2, "usage"),
    (["distill", "--teacher", "/nonexistent.npz"], 1, None),
])
def test_cli_errors_are_machine_readable(argv, code, kind, tmp_path, capsys):
    rc = run_command([*argv, "--out", str(tmp_path / "o")] if argv[0] in ("eval", "distill") else argv)
    err = capsys.readouterr().err.strip().splitlines()
    rec = json.loads(err[-1])
    assert rc == code and "message" in rec
    if kind:
        assert rec["error"] == kind
