"""Track the critic's Wasserstein estimate across SAIL episodes and test its moving-average trend."""

import argparse

import numpy as np
from _common import quiet, table

from sail_lab.envs import DynamicsMod, collect_demos, make_env
from sail_lab.train import PPOConfig, SailConfig, sail_train


def moving_average(x: np.ndarray, k: int) -> np.ndarray:
    return np.convolve(x, np.ones(k) / k, mode="valid")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--episodes", type=int, default=30)
    ap.add_argument("--memory", type=int, default=512)
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--mod", default="")
    args = ap.parse_args()
    quiet()
    rows = []
    for seed in range(args.seeds):
        demos = collect_demos(make_env("point-mass"), 5, seed=seed)
        env = make_env("point-mass", DynamicsMod.parse(args.mod))
        cfg = SailConfig(ppo=PPOConfig(total_episodes=args.episodes, memory_capacity=args.memory))
        res = sail_train(cfg, env, demos, seed=seed)
        w = np.array([m["w_estimate"] for m in res.metrics])
        ma = moving_average(w, args.window)
        monotone = bool(np.all(np.diff(ma) <= 0))
        rows.append([seed, float(w[0]), float(w[-1]), float(ma[0]), float(ma[-1]), monotone,
                     res.final_report.success_rate])
        print(f"seed {seed}: W " + " ".join(f"{v:.3f}" for v in w), flush=True)
    print(table(["seed", "W first", "W last", "MA first", "MA last", "MA non-increasing", "final success"], rows))
    print(f"non-increasing moving average in {sum(r[5] for r in rows)}/{len(rows)} seeds")


if __name__ == "__main__":
    main()
