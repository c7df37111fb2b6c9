"""Sweep the VAE beta on point-mass demos and compare action-predictive VAE-BC with plain BC."""

import argparse

import numpy as np
from _common import median, quiet, table

from sail_lab.align import action_vae_bc, train_vae
from sail_lab.analysis import evaluate_policy
from sail_lab.envs import collect_demos, make_env
from sail_lab.train import action_mse, bc_train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--betas", default="0.2,0.1,0.05,0.01")
    args = ap.parse_args()
    quiet()
    betas = [float(b) for b in args.betas.split(",")]
    env = make_env("point-mass")
    train_err = {b: [] for b in betas}
    held_err = {b: [] for b in betas}
    ret = {"bc": [], "vae-bc": [], "expert": []}
    mse = {"bc": [], "vae-bc": []}
    for seed in range(args.seeds):
        demos = collect_demos(env, 5, seed=seed)
        held = collect_demos(env, 5, seed=100 + seed)
        s, s2 = demos.pairs(2)
        hs, hs2 = held.pairs(2)
        for b in betas:
            vae = train_vae(demos, beta=b, epochs=args.epochs, seed=seed)
            train_err[b].append(vae.reconstruction_error(s, s2))
            held_err[b].append(vae.reconstruction_error(hs, hs2))
        bc = bc_train(demos, seed=seed)
        av = action_vae_bc(demos, beta=0.05, seed=seed, epochs=args.epochs)
        ret["bc"].append(evaluate_policy(env, bc, 20, seed=seed).mean_return)
        ret["vae-bc"].append(evaluate_policy(env, av, 20, seed=seed).mean_return)
        ret["expert"].append(evaluate_policy(env, env.expert_action, 20, seed=seed).mean_return)
        ha_s, ha_a = held.state_actions()
        mse["bc"].append(action_mse(bc, ha_s, ha_a))
        mse["vae-bc"].append(float(np.mean(np.sum((av.mean_action(ha_s) - ha_a) ** 2, axis=-1))))
        print(f"seed {seed} done", flush=True)
    print(table(["beta", "train recon (median)", "held-out recon (median)"],
                [[b, median(train_err[b]), median(held_err[b])] for b in betas]))
    print()
    print(table(["policy", "median return", "held-out action mse"],
                [["bc", median(ret["bc"]), median(mse["bc"])], ["vae-bc", median(ret["vae-bc"]), median(mse["vae-bc"])],
                 ["expert", median(ret["expert"]), "-"]]))


if __name__ == "__main__":
    main()
