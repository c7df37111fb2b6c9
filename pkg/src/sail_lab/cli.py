"""``sail-lab`` command line: collect-demos, train, evaluate, verify-decomp, plot.

Exit codes: 0 ok, 2 usage or input error, 3 infeasible certificate, 4 training aborted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import nn
from .align import ActionVAEPolicy, Standardizer, action_vae_bc
from .analysis import DecompositionProblem, evaluate_policy, verify_decomposability
from .config import ConfigError, RunConfig, load_config
from .envs import DemoSet, DynamicsMod, Env, collect_demos, load_demos, make_env, save_demos, with_horizon
from .errors import ContractError, StageError
from .train import (METRIC_FIELDS, bc_train, derive_seed, gail_lite_train, load_policy, read_metrics, sail_train,
                    save_policy, write_metrics)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_ABORTED = 0, 2, 3, 4
DEMO_PRESETS = (5, 10, 20, 50)
BUNDLED_PROBLEMS = {"two-ring": "two_ring.decomp"}

log = logging.getLogger("sail_lab")


class InputError(Exception):
    """Bad flags, files or configs; maps to exit code 2."""


def resolve_seed(flag: int | None, fallback: int | None = None) -> int:
    """--seed, else $SAIL_LAB_SEED, else ``fallback``, else 0."""
    if flag is not None:
        return flag
    env = os.environ.get("SAIL_LAB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"SAIL_LAB_SEED must be an integer, got {env!r}") from None
    return fallback if fallback is not None else 0


def _mod(text: str | None) -> DynamicsMod:
    try:
        return DynamicsMod.parse(text)
    except ContractError as exc:
        raise InputError(str(exc)) from exc


def _env(env_id: str, mod: DynamicsMod, horizon: int | None = None) -> Env:
    try:
        env = make_env(env_id, mod)
    except ContractError as exc:
        raise InputError(str(exc)) from exc
    return with_horizon(env, horizon) if horizon else env


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc}") from exc
    return out


def write_manifest(out: Path, extra: dict | None = None) -> Path:
    """Index every file under ``out`` with its size and sha256."""
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            data = p.read_bytes()
            files[str(p.relative_to(out))] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
    manifest = {"files": files, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_collect_demos(args) -> int:
    if args.n < 1:
        raise InputError("--n must be >= 1")
    seed = resolve_seed(args.seed)
    mod = _mod(args.mod)
    env = _env(args.env, mod, args.horizon)
    demos = collect_demos(env, args.n, seed=seed)
    out = Path(args.out)
    try:
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        save_demos(demos, out, mod)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    mean_ret = float(np.mean([t.task_return() for t in demos.trajectories]))
    print(f"trajectories {len(demos)}")
    print(f"transitions {demos.n_transitions}")
    print(f"mean_expert_return {mean_ret:.6f}")
    return EXIT_OK


def _load_demoset(cfg: RunConfig, seed: int) -> DemoSet:
    if cfg.demos.path:
        try:
            return load_demos(cfg.demos.path)
        except OSError as exc:
            raise InputError(f"cannot read demos {cfg.demos.path}: {exc}") from exc
        except ContractError as exc:
            raise InputError(str(exc)) from exc
    expert = _env(cfg.env.id, DynamicsMod.from_dict(cfg.demos.expert_mod), cfg.env.horizon)
    return collect_demos(expert, cfg.demos.n, seed=cfg.demos.seed)


def run_training(cfg: RunConfig, out: Path, seed: int) -> dict:
    """Run ``cfg`` and write metrics, checkpoints and a report under ``out``."""
    env = _env(cfg.env.id, DynamicsMod.from_dict(cfg.env.mod), cfg.env.horizon)
    demos = _load_demoset(cfg, seed)
    if demos.state_dim != env.spec.state_dim:
        raise InputError(f"demos have state_dim {demos.state_dim}, env {cfg.env.id} has {env.spec.state_dim}")
    (out / "config.json").write_text(cfg.dumps())
    report: dict = {"algorithm": cfg.algorithm, "seed": seed, "env": cfg.env.id, "mod": cfg.env.mod}
    n_eval = cfg.sail.eval_episodes
    if cfg.algorithm == "sail":
        ckpt_dir = out / "checkpoints" if cfg.sail.checkpoint_every else None
        if ckpt_dir is not None:
            ckpt_dir.mkdir(exist_ok=True)
        res = sail_train(cfg.sail, env, demos, seed=seed, metrics_path=out / "metrics.csv", checkpoint_dir=ckpt_dir)
        save_policy(out / "policy_final.ckpt", res.policy)
        save_policy(out / "policy_best.ckpt", res.best_policy)
        report["init"] = res.init_report.to_dict()
        report["final"] = res.final_report.to_dict()
        report["best"] = {**res.best_report.to_dict(), "episode": res.best_episode}
    elif cfg.algorithm == "gail_lite":
        res = gail_lite_train(cfg.sail, env, demos, seed=seed, disc_steps=cfg.baselines.gail_disc_steps,
                              metrics_path=out / "metrics.csv", reward_form=cfg.baselines.gail_reward_form)
        save_policy(out / "policy_final.ckpt", res.policy)
        report["final"] = res.final_report.to_dict()
    elif cfg.algorithm == "bc":
        policy = bc_train(demos, cfg.baselines.bc_epochs, seed=seed, hidden=cfg.sail.hidden, depth=cfg.sail.depth,
                          sigma=cfg.sail.sigma)
        save_policy(out / "policy_final.ckpt", policy)
        report["final"] = evaluate_policy(env, policy, n_eval, seed=derive_seed(seed, 18)).to_dict()
    else:
        policy = action_vae_bc(demos, cfg.sail.beta, seed=seed, epochs=cfg.baselines.action_vae_epochs,
                               hidden=cfg.sail.hidden, depth=cfg.sail.depth)
        save_action_vae(out / "policy_final.ckpt", policy)
        report["final"] = evaluate_policy(env, policy, n_eval, seed=derive_seed(seed, 18)).to_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, {"command": "train", "algorithm": cfg.algorithm, "seed": seed})
    return report


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc
    except ConfigError as exc:
        raise InputError(str(exc)) from exc
    if args.workers is not None:
        if args.workers < 1:
            raise InputError("--workers must be >= 1")
        cfg.sail.workers = args.workers
    if args.out:
        cfg.out = args.out
    seed = resolve_seed(args.seed, cfg.seed)
    cfg.seed = seed
    out = _out_dir(cfg.out)
    try:
        report = run_training(cfg, out, seed)
    except (StageError, FloatingPointError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    for k in ("init", "final", "best"):
        if k in report:
            r = report[k]
            print(f"{k}: mean_return {r['mean_return']:.4f} success_rate {r['success_rate']:.3f}")
    print(f"outputs in {out}")
    return EXIT_OK


def save_action_vae(path, policy: ActionVAEPolicy) -> None:
    nn.write_checkpoint(path, {"avae_encoder": policy.vae.encoder, "avae_decoder": policy.vae.decoder},
                        {"state_mean": policy.vae.norm.mean, "state_std": policy.vae.norm.std,
                         "action_mean": policy.action_norm.mean, "action_std": policy.action_norm.std})


def load_any_policy(path):
    """A GaussianPolicy or an ActionVAEPolicy, depending on the networks in the file."""
    nets, arrays = nn.read_checkpoint(path)
    if "policy_mean" in nets:
        return load_policy(path)
    if "avae_decoder" in nets:
        enc, dec = nets["avae_encoder"], nets["avae_decoder"]
        pol = ActionVAEPolicy.__new__(ActionVAEPolicy)
        from .align import StateVAE
        vae = StateVAE.__new__(StateVAE)
        vae.encoder, vae.decoder = enc, dec
        vae.latent_dim = dec.in_dim
        vae.state_dim = enc.in_dim
        vae.norm = Standardizer(arrays["state_mean"], arrays["state_std"])
        pol.vae = vae
        pol.action_norm = Standardizer(arrays["action_mean"], arrays["action_std"])
        return pol
    raise ContractError(f"{path}: no policy network in checkpoint")


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint {ckpt} not found")
    if args.episodes < 1:
        raise InputError("--episodes must be >= 1")
    env_id, mod_text, horizon = args.env, args.mod, None
    cfg_path = ckpt.parent / "config.json"
    cfg = None
    if cfg_path.is_file():
        try:
            cfg = load_config(cfg_path)
        except ConfigError as exc:
            raise InputError(str(exc)) from exc
    if env_id is None:
        if cfg is None:
            raise InputError("no --env given and no config.json next to the checkpoint")
        env_id, horizon = cfg.env.id, cfg.env.horizon
        mod = DynamicsMod.from_dict(cfg.env.mod) if mod_text is None else _mod(mod_text)
    else:
        mod = _mod(mod_text)
    try:
        policy = load_any_policy(ckpt)
    except (ContractError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load {ckpt}: {exc}") from exc
    env = _env(env_id, mod, horizon)
    if policy.__class__.__name__ == "GaussianPolicy":
        if (policy.state_dim, policy.action_dim) != (env.spec.state_dim, env.spec.action_dim):
            raise InputError(f"checkpoint has state/action dims ({policy.state_dim}, {policy.action_dim}), "
                             f"env {env_id} has ({env.spec.state_dim}, {env.spec.action_dim})")
    seed = resolve_seed(args.seed)
    report = evaluate_policy(env, policy, args.episodes, seed=seed, deterministic_actions=not args.stochastic)
    print(report.text())
    return EXIT_OK


def bundled_problem_path(name: str) -> Path:
    return Path(str(resources.files("sail_lab") / "data" / BUNDLED_PROBLEMS[name]))


def cmd_verify_decomp(args) -> int:
    path = bundled_problem_path(args.problem) if args.problem in BUNDLED_PROBLEMS else Path(args.problem)
    try:
        problem = DecompositionProblem.load(path)
    except OSError as exc:
        raise InputError(f"cannot read problem file {path}: {exc}") from exc
    except ContractError as exc:
        raise InputError(str(exc)) from exc
    cert = verify_decomposability(problem)
    print(cert.text())
    return EXIT_OK if cert.feasible else EXIT_INFEASIBLE


def render_svg(rows: list[dict], columns: list[str], width: int = 640, panel_height: int = 160) -> str:
    """One panel per column, each a single polyline with one vertex per metrics row."""
    pad = 40
    height = panel_height * len(columns)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    n = len(rows)
    for c, col in enumerate(columns):
        top = c * panel_height
        ys = np.array([r[col] for r in rows], dtype=np.float64)
        finite = ys[np.isfinite(ys)]
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        ys = np.where(np.isfinite(ys), ys, lo)
        xs = [pad + (width - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
        py = [top + panel_height - pad / 2 - (panel_height - pad) * (y - lo) / (hi - lo) for y in ys]
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, py))
        parts.append(f'<text x="{pad}" y="{top + 14}" font-size="12" font-family="sans-serif">{col} '
                     f'[{lo:.4g}, {hi:.4g}]</text>')
        parts.append(f'<polyline data-column="{col}" fill="none" stroke="#1f77b4" stroke-width="1.5" '
                     f'points="{points}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    try:
        rows = read_metrics(args.metrics)
    except OSError as exc:
        raise InputError(f"cannot read metrics {args.metrics}: {exc}") from exc
    if not rows:
        raise InputError(f"{args.metrics} has no rows")
    columns = args.columns.split(",") if args.columns else ["mean_return", "success_rate", "w_estimate"]
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise InputError(f"unknown metrics columns {missing}; available {list(rows[0])}")
    out = Path(args.out)
    try:
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(render_svg(rows, columns))
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {out} ({len(rows)} points x {len(columns)} columns)")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sail-lab", description="State-alignment imitation learning lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect-demos", help="record scripted-expert demonstrations")
    c.add_argument("--env", required=True)
    c.add_argument("--mod", default=None, help="e.g. mass=2,gain=0.25,disabled=0:1")
    c.add_argument("--n", type=int, default=5, help=f"trajectory count; presets {DEMO_PRESETS}")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--horizon", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect_demos)

    t = sub.add_parser("train", help="run a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workers", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a policy checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--env", default=None)
    e.add_argument("--mod", default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify-decomp", help="check whether preferences admit a phi(s) + psi(s') reward")
    v.add_argument("--problem", required=True, help=f"a problem file or one of {sorted(BUNDLED_PROBLEMS)}")
    v.set_defaults(func=cmd_verify_decomp)

    pl = sub.add_parser("plot", help="render a metrics CSV as an SVG learning curve")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--columns", default=None, help=f"comma separated, from {list(METRIC_FIELDS)}")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
