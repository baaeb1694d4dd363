"""Command-line entry point.

Every subcommand accepts ``--config FILE --seed INT --out DIR`` and writes::

    DIR/config.ini       resolved config snapshot
    DIR/logs/            JSON-lines logs
    DIR/metrics.csv      metrics table (eval, expert, train-teacher)
    DIR/checkpoints/     parameter files

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr and
exit nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from rearrange.agents.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from rearrange.config import ConfigError, ExperimentConfig, canonical_text, load_config
from rearrange.envbatch import VecEnv, rollout
from rearrange.metrics import compute_metrics, metrics_csv
from rearrange.rewardkit import PRESETS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", default=None, help="INI experiment config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/latest", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rearrange", description="Egocentric multi-object pushing: train, distill, evaluate.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-teacher", help="PPO teacher on keypoint observations")
    _common(p)
    p.add_argument("--steps", type=int, default=None, help="environment steps (default from [train])")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--curriculum", choices=("full", "reach"), default=None)
    p.add_argument("--n-envs", type=int, default=None)
    p.add_argument("--eval-episodes", type=int, default=32)

    p = sub.add_parser("distill", help="teacher -> student distillation")
    _common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--student", choices=("depth", "keypoint"), default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lambda-rel", type=float, default=None)
    p.add_argument("--n-envs", type=int, default=None)
    p.add_argument("--force", action="store_true", help="ignore a config hash mismatch")

    p = sub.add_parser("eval", help="evaluate a policy and write metrics")
    _common(p)
    p.add_argument("--policy", choices=("expert", "teacher", "student", "random"), default="expert")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--record", type=int, default=0, help="log step trajectories of the first N envs")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("expert", help="scripted-expert rollouts")
    _common(p)
    p.add_argument("--task", choices=("pair", "cross", "line"), default=None)
    p.add_argument("--episodes", type=int, default=256)
    p.add_argument("--record", type=int, default=0)

    p = sub.add_parser("render", help="dump synthetic frames")
    _common(p)
    p.add_argument("--log", default=None, help="JSON-lines trajectory log; default: initial scene")
    p.add_argument("--every", type=int, default=1)
    p.add_argument("--noise", action="store_true", help="also dump noisy student layers")

    p = sub.add_parser("ablate", help="train the four reward presets and compare")
    _common(p)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--seeds", default=None, help="comma list (default: --seed)")
    p.add_argument("--eval-episodes", type=int, default=64)
    return ap


# helpers --------------------------------------------------------------------------


def _prepare_out(args, text: str) -> Path:
    out = Path(args.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "config.ini").write_text(text, encoding="utf-8")
    return out


def _write_jsonl(path: Path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_metrics(out: Path, label: str, summaries, cfg: ExperimentConfig):
    _write_jsonl(out / "logs" / "episodes.jsonl", ({"type": "terminal", **s} for s in summaries))
    rep = compute_metrics(summaries, cfg.thresholds.align)
    (out / "metrics.csv").write_text(metrics_csv([(label, rep)]), encoding="utf-8")
    return rep


def _rollout_logged(env: VecEnv, policy, n: int, seed: int, out: Path, record: int):
    files = []
    for i in range(min(record, env.n_envs)):
        fh = open(out / "logs" / f"trajectory_env{i}.jsonl", "w", encoding="utf-8")
        files.append(fh)
        env.record_trajectory(i, fh)
    try:
        return rollout(env, policy, n, seed)
    finally:
        env.close()
        for fh in files:
            fh.close()


def _teacher_from(path, cfg: ExperimentConfig, text: str, force: bool):
    from rearrange.agents.trainer import make_teacher

    header = read_header(path)
    net = header.get("meta", {}).get("net", cfg.net_kwargs())
    net = {k: tuple(v) for k, v in net.items()}
    model = make_teacher(cfg.env_config(), 0, **net)
    load_checkpoint(path, {"teacher": model}, text, force)
    model.eval()
    return model


def _student_obs(cfg: ExperimentConfig, seed: int):
    from rearrange.studentobs import DepthNoise, batch_student_layers

    noise = DepthNoise(cfg.student.noise_scale, cfg.student.dropout, cfg.student.block)
    return lambda env, batch: torch.as_tensor(batch_student_layers(env, noise, seed))


def _make_student(cfg: ExperimentConfig, kind: str, net: dict):
    from rearrange.agents.networks import KeypointStudent, StudentPolicy

    if kind == "keypoint":
        k = cfg.task.keypoints
        return KeypointStudent(group_lengths=(k, k, cfg.camera.n_obs_max * k, k), **net)
    return StudentPolicy(hidden=net.get("hidden", (256, 256)))


# commands -------------------------------------------------------------------------


def cmd_train_teacher(args, cfg: ExperimentConfig, text: str) -> int:
    from rearrange.agents.trainer import evaluate_policy, make_teacher, train_teacher

    # fold flag overrides into the config so the snapshot and checkpoint hash reflect them
    rew = {k: v for k, v in (("preset", args.preset), ("curriculum", args.curriculum)) if v}
    cfg = replace(cfg, reward=replace(cfg.reward, **rew),
                  env=replace(cfg.env, n_envs=args.n_envs or cfg.env.n_envs))
    text = canonical_text(cfg)
    env_cfg = cfg.env_config(args.seed)
    out = _prepare_out(args, text)
    steps = args.steps or cfg.train.steps
    net = cfg.net_kwargs()
    model = make_teacher(env_cfg, args.seed, **net)
    with open(out / "logs" / "train.jsonl", "w", encoding="utf-8") as fh:
        def cb(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        model, log = train_teacher(env_cfg, steps, args.seed, cfg.ppo, model=model, callback=cb)
    save_checkpoint(out / "checkpoints" / "teacher.npz", {"teacher": model}, text,
                    {"kind": "teacher", "net": net, "steps": steps, "seed": args.seed, "preset": env_cfg.preset})
    summ = evaluate_policy(model, env_cfg, args.eval_episodes, seed=args.seed + 10_000, deterministic=False)
    rep = _write_metrics(out, f"teacher/{env_cfg.preset}", summ, cfg)
    print(json.dumps({"steps": steps, "train_reach_rate": log.reach_rate(), "eval_sr": rep.sr}))
    return 0


def cmd_distill(args, cfg: ExperimentConfig, text: str) -> int:
    from rearrange.agents.distill import Distiller

    out = _prepare_out(args, text)
    teacher = _teacher_from(args.teacher, cfg, text, args.force)
    net = read_header(args.teacher).get("meta", {}).get("net", cfg.net_kwargs())
    net = {k: tuple(v) for k, v in net.items()}
    kind = args.student or cfg.student.kind
    dcfg = cfg.distill
    if args.iterations is not None:
        dcfg = replace(dcfg, iterations=args.iterations)
    if args.lambda_rel is not None:
        dcfg = replace(dcfg, lambda_rel=args.lambda_rel)
    torch.manual_seed(args.seed)
    student = _make_student(cfg, kind, net)
    env = VecEnv(cfg.env_config(args.seed, **({"n_envs": args.n_envs} if args.n_envs else {})))
    s_obs = _student_obs(cfg, args.seed) if kind == "depth" else None
    d = Distiller(teacher, student, env, dcfg, s_obs, args.seed)
    with open(out / "logs" / "distill.jsonl", "w", encoding="utf-8") as fh:
        for it in range(dcfg.iterations):
            row = d.step()
            fh.write(json.dumps({"iteration": it + 1, **row}, sort_keys=True) + "\n")
    env.close()
    save_checkpoint(out / "checkpoints" / "student.npz", {"student": student}, text,
                    {"kind": f"student-{kind}", "net": net, "iterations": dcfg.iterations})
    print(json.dumps({"iterations": dcfg.iterations, **d.history[-1]}))
    return 0


def cmd_eval(args, cfg: ExperimentConfig, text: str) -> int:
    from rearrange.agents.expert import ScriptedExpert
    from rearrange.agents.trainer import _sample, obs_tensors

    env_cfg = cfg.env_config(args.seed, n_envs=min(args.episodes, cfg.env.n_envs))
    out = _prepare_out(args, text)
    gen = torch.Generator().manual_seed(args.seed)
    if args.policy == "expert":
        policy = ScriptedExpert()
    elif args.policy == "random":
        rng = np.random.default_rng(args.seed)
        policy = lambda env, batch: rng.uniform(-1, 1, (env.n_envs, 2))  # noqa: E731
    else:
        if args.checkpoint is None:
            raise UsageError(f"--checkpoint is required for --policy {args.policy}")
        if args.policy == "teacher":
            model = _teacher_from(args.checkpoint, cfg, text, args.force)

            def policy(env, batch):
                obs = obs_tensors(batch)
                with torch.no_grad():
                    dist, _ = model.distribution(obs["groups"], obs["prev_action"])
                a = dist.mean if args.deterministic else _sample(dist, gen)
                return a.numpy().astype(np.float64)
        else:
            header = read_header(args.checkpoint)
            kind = header.get("meta", {}).get("kind", "student-depth").split("-", 1)[-1]
            net = {k: tuple(v) for k, v in header.get("meta", {}).get("net", {}).items()}
            student = _make_student(cfg, kind, net)
            load_checkpoint(args.checkpoint, {"student": student}, text, args.force)
            s_obs = _student_obs(cfg, args.seed) if kind == "depth" else (
                lambda env, batch: obs_tensors(batch)["groups"])

            def policy(env, batch):
                with torch.no_grad():
                    mean, _ = student(s_obs(env, batch), obs_tensors(batch)["prev_action"])
                return mean.numpy().astype(np.float64)

    summ = _rollout_logged(VecEnv(env_cfg), policy, args.episodes, args.seed, out, args.record)
    rep = _write_metrics(out, args.policy, summ, cfg)
    print(json.dumps(rep.row(args.policy)))
    return 0


def cmd_expert(args, cfg: ExperimentConfig, text: str) -> int:
    from rearrange.agents.expert import ScriptedExpert

    if args.task:
        n = {"pair": 2, "cross": 5}.get(args.task, cfg.task.n_objects)
        cfg = replace(cfg, task=replace(cfg.task, formation=args.task, n_objects=n))
        text = canonical_text(cfg)
    env_cfg = cfg.env_config(args.seed, n_envs=min(args.episodes, max(cfg.env.n_envs, 256)))
    out = _prepare_out(args, text)
    summ = _rollout_logged(VecEnv(env_cfg), ScriptedExpert(), args.episodes, args.seed, out, args.record)
    rep = _write_metrics(out, f"expert/{cfg.task.formation}", summ, cfg)
    print(json.dumps(rep.row(f"expert/{cfg.task.formation}")))
    return 0


def cmd_render(args, cfg: ExperimentConfig, text: str) -> int:
    from rearrange.envbatch import episode_world
    from rearrange.studentobs import DepthNoise, render_arrays, student_layers, write_depth, write_frame

    out = _prepare_out(args, text)
    frames = out / "frames"
    task = cfg.task_spec()
    if args.log:
        try:
            with open(args.log, encoding="utf-8") as fh:
                recs = [json.loads(ln) for ln in fh if ln.strip()]
        except OSError as exc:
            raise ConfigError(f"cannot read log {args.log}: {exc.strerror}") from exc
        poses = [(r["t"], np.asarray(r["robot"]), np.asarray(r["objects"]), r["roles"])
                 for r in recs if r.get("type") == "step"][:: max(1, args.every)]
    else:
        w = episode_world(task, args.seed, 0, 0)
        poses = [(0, w.robot_pose, w.obj_pose, list(w.roles))]
    noise = DepthNoise(cfg.student.noise_scale, cfg.student.dropout, cfg.student.block)
    written = 0
    for t, robot, objs, roles in poses:
        f = render_arrays(task.shapes, objs, robot, cfg.camera, task.arena_radius)
        write_frame(frames / f"t{t:04d}", f)
        if args.noise:
            layers = student_layers(f, np.asarray(roles), noise, np.random.SeedSequence([args.seed, t]))
            for k, name in enumerate(("act", "anc", "obs")):
                write_depth(frames / f"t{t:04d}_{name}.bin", layers[k])
        written += 1
    print(json.dumps({"frames": written, "dir": str(frames)}))
    return 0


def cmd_ablate(args, cfg: ExperimentConfig, text: str) -> int:
    from rearrange.agents.trainer import run_ablation

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    out = _prepare_out(args, text)
    env_cfg = cfg.env_config(args.seed)
    fields = ("preset", "seed", "steps", "reach_rate", "eval_reach_rate", "eval_success_rate", "final_return")
    with open(out / "logs" / "ablation_runs.jsonl", "w", encoding="utf-8") as fh:
        rows = run_ablation(env_cfg, seeds=seeds, steps=args.steps, hyper=cfg.ppo, net=cfg.net_kwargs(),
                            eval_episodes=args.eval_episodes,
                            callback=lambda r: (fh.write(json.dumps(r, sort_keys=True) + "\n"), fh.flush()))
    with open(out / "ablation_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = []
    for preset in ("base", "swr", "swr_td", "ours"):
        rs = [r for r in rows if r["preset"] == preset]
        summary.append({"preset": preset, "seeds": len(rs),
                        **{k: float(np.mean([r[k] for r in rs])) for k in fields[3:]}})
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("preset", "seeds", *fields[3:]), lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    print(json.dumps(summary))
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "expert": cmd_expert,
    "render": cmd_render,
    "ablate": cmd_ablate,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def run_command(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    try:
        cfg, text = load_config(args.config)
        return COMMANDS[args.command](args, cfg, text)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except ConfigError as exc:
        return _fail("config", str(exc), 1)
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc), 1)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
