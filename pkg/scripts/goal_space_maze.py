"""Heavy point-mass in the U-maze imitating light demos through a position-only goal space."""

import argparse

from _common import median, quiet, table

from sail_lab.envs import DynamicsMod, collect_demos, make_env
from sail_lab.train import PPOConfig, SailConfig, sail_train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--mass", type=float, default=2.0)
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--memory", type=int, default=2048)
    ap.add_argument("--demos", type=int, default=10)
    ap.add_argument("--kl-lambda", type=float, default=0.1)
    args = ap.parse_args()
    quiet()
    rows = []
    for seed in range(args.seeds):
        demos = collect_demos(make_env("u-maze", velocity_dims=True), args.demos, seed=seed)
        env = make_env("u-maze", DynamicsMod(mass_scale=args.mass), velocity_dims=True)
        cfg = SailConfig(ppo=PPOConfig(total_episodes=args.episodes, memory_capacity=args.memory,
                                          kl_lambda=args.kl_lambda), goal_indices=[0, 1])
        res = sail_train(cfg, env, demos, seed=seed)
        rows.append([seed, res.init_report.success_rate, res.final_report.success_rate,
                     res.best_report.success_rate])
        print(f"seed {seed}: init {rows[-1][1]:.2f} final {rows[-1][2]:.2f} best {rows[-1][3]:.2f}", flush=True)
    rows.append(["median", median([r[1] for r in rows]), median([r[2] for r in rows]), median([r[3] for r in rows])])
    print(table(["seed", "init success", "final success", "best success"], rows))


if __name__ == "__main__":
    main()
