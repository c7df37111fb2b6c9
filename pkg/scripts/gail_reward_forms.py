"""GAIL-lite on matched point-mass with the -log(1 - D) and log D reward forms."""

import argparse

import numpy as np
from _common import median, quiet, table

from sail_lab.envs import collect_demos, make_env
from sail_lab.train import GAIL_REWARD_FORMS, PPOConfig, SailConfig, gail_lite_train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--episodes", type=int, default=40)
    args = ap.parse_args()
    quiet()
    env = make_env("point-mass")
    cfg = SailConfig(ppo=PPOConfig(total_episodes=args.episodes, memory_capacity=1024))
    rows = []
    for form in GAIL_REWARD_FORMS:
        frac = []
        for seed in range(args.seeds):
            demos = collect_demos(env, 5, seed=seed)
            expert = np.mean([t.task_return() for t in demos.trajectories])
            res = gail_lite_train(cfg, env, demos, seed=seed, reward_form=form)
            frac.append(res.final_report.mean_return / expert)
        rows.append([form, median(frac), min(frac), max(frac)])
        print(f"{form}: {[round(f, 3) for f in frac]}", flush=True)
    print(table(["reward", "median return / expert", "min", "max"], rows))


if __name__ == "__main__":
    main()
