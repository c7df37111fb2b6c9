"""SAIL vs BC vs GAIL-lite when the imitator's actuators are weaker than the expert's."""

import argparse

from _common import median, quiet, table

from sail_lab.analysis import evaluate_policy
from sail_lab.envs import DynamicsMod, collect_demos, make_env
from sail_lab.train import PPOConfig, SailConfig, bc_train, gail_lite_train, sail_train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--env", default="point-mass")
    ap.add_argument("--mod", default="gain=0.25", help="imitator dynamics, e.g. gain=0.25 or mass=2")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--episodes", type=int, default=6, help="SAIL/GAIL training episodes")
    ap.add_argument("--memory", type=int, default=1024, help="environment steps per episode")
    args = ap.parse_args()
    quiet()
    cfg = SailConfig(ppo=PPOConfig(total_episodes=args.episodes, memory_capacity=args.memory))
    rows = {k: [] for k in ("sail", "sail-init", "bc", "gail")}
    for seed in range(args.seeds):
        demos = collect_demos(make_env(args.env), 5, seed=seed)
        env = make_env(args.env, DynamicsMod.parse(args.mod))
        res = sail_train(cfg, env, demos, seed=seed)
        rows["sail"].append(res.final_report)
        rows["sail-init"].append(res.init_report)
        rows["gail"].append(gail_lite_train(cfg, env, demos, seed=seed).final_report)
        rows["bc"].append(evaluate_policy(env, bc_train(demos, seed=seed), 20, seed=seed))
        print(f"seed {seed}: " + "  ".join(f"{k} {v[-1].success_rate:.2f}" for k, v in rows.items()), flush=True)
    print(table(["method", "median success", "median return"],
                [[k, median([r.success_rate for r in v]), median([r.mean_return for r in v])]
                 for k, v in rows.items()]))


if __name__ == "__main__":
    main()
