"""Policy optimization: KL-regularized clipped PPO toward the action prior, plus BC and GAIL-lite baselines."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .align import (DEFAULT_BETA, DEFAULT_SIGMA, ActionPrior, GoalProjector, Standardizer, _minibatches,
                    train_inverse, train_vae, update_inverse, vae_loss)
from .analysis import EvalReport, evaluate_policy
from .critic import CriticNet, assign_rewards, demo_mean_potential, make_critic, train_critic, wasserstein_estimate
from .envs import DemoSet, Env, Trajectory, random_transitions
from .errors import ContractError, NonFiniteError, StageError
from .nn import Adam, DiagGaussian, Mlp, Tensor, make_mlp

log = logging.getLogger(__name__)

METRIC_FIELDS = ("episode", "env_steps", "mean_return", "success_rate", "w_estimate", "kl_to_prior",
                 "clip_obj", "vae_loss", "inv_loss")


def derive_seed(seed: int, *keys: int) -> int:
    """A 32-bit seed that depends only on ``seed`` and ``keys``."""
    return int(np.random.SeedSequence([int(seed) % 2**63, *keys]).generate_state(1)[0])


# --------------------------------------------------------------------------- #
# Networks
# --------------------------------------------------------------------------- #


class GaussianPolicy:
    """pi(a | s) = N(mean_net(norm(s)), exp(log_std)^2) with a state-independent log-std."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int = 64, depth: int = 3,
                 rng: np.random.Generator | None = None, init_log_std: float = 0.0, out_scale: float = 0.1):
        self.mean_net = make_mlp(state_dim, action_dim, hidden, depth, rng, out_scale=out_scale)
        self.log_std = Tensor(np.full(action_dim, float(init_log_std)), requires_grad=True)
        self.norm = Standardizer.identity(state_dim)

    @property
    def state_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    def parameters(self) -> list[Tensor]:
        return self.mean_net.parameters() + [self.log_std]

    def mean(self, states) -> np.ndarray:
        return self.mean_net.predict(self.norm(np.asarray(states, dtype=np.float64)))

    def mean_tensor(self, states) -> Tensor:
        return self.mean_net(self.norm(np.asarray(states, dtype=np.float64)))

    def distribution_at(self, s) -> DiagGaussian:
        return DiagGaussian(self.mean(np.asarray(s)[None, :])[0], self.log_std.data.copy())

    def log_prob(self, states, actions) -> np.ndarray:
        mean = self.mean(states)
        ls = np.clip(self.log_std.data, nn.LOG_STD_MIN, nn.LOG_STD_MAX)
        z = (np.asarray(actions) - mean) * np.exp(-ls)
        return np.sum(-0.5 * z * z - ls - nn._HALF_LOG_2PI, axis=-1)

    def log_prob_tensor(self, states, actions) -> Tensor:
        return nn.log_prob_tensor(self.mean_tensor(states), self.log_std, actions)

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        mean = self.mean(np.asarray(state)[None, :])[0]
        if deterministic:
            return mean
        rng = rng if rng is not None else np.random.default_rng()
        return mean + np.exp(np.clip(self.log_std.data, nn.LOG_STD_MIN, nn.LOG_STD_MAX)) * rng.standard_normal(mean.shape)

    def copy(self) -> GaussianPolicy:
        clone = GaussianPolicy.__new__(GaussianPolicy)
        clone.mean_net = self.mean_net.copy()
        clone.log_std = Tensor(self.log_std.data.copy(), requires_grad=True)
        clone.norm = Standardizer(self.norm.mean.copy(), self.norm.std.copy())
        return clone

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_flat(), self.log_std.data])


class ValueNet:
    def __init__(self, state_dim: int, hidden: int = 64, depth: int = 3, rng: np.random.Generator | None = None):
        self.net = make_mlp(state_dim, 1, hidden, depth, rng, out_scale=0.1)
        self.norm = Standardizer.identity(state_dim)

    def predict(self, states) -> np.ndarray:
        return self.net.predict(self.norm(np.atleast_2d(np.asarray(states, dtype=np.float64))))[:, 0]

    def __call__(self, states) -> Tensor:
        return self.net(self.norm(np.asarray(states, dtype=np.float64)))[:, 0]


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #


@dataclass
class PPOConfig:
    clip_epsilon: float = 0.2
    kl_lambda: float = 0.1
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_batch: int = 10
    minibatch_size: int = 64
    memory_capacity: int = 2048
    total_episodes: int = 20
    lr: float = 3e-4
    value_lr: float = 1e-3
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ContractError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if not 0 < self.gamma <= 1:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ContractError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.kl_lambda < 0:
            raise ContractError(f"kl_lambda must be >= 0, got {self.kl_lambda}")
        for name in ("epochs_per_batch", "minibatch_size", "memory_capacity"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.total_episodes < 0:
            raise ContractError("total_episodes must be >= 0")


@dataclass
class SailConfig:
    """Everything ``sail_train`` needs besides the env, demos and seed."""

    ppo: PPOConfig = field(default_factory=PPOConfig)
    sigma: float = DEFAULT_SIGMA
    beta: float = DEFAULT_BETA
    hidden: int = 64
    depth: int = 3
    vae_epochs: int = 300
    inverse_epochs: int = 60
    random_steps: int = 4000
    pretrain_epochs: int = 4000
    critic_steps: int = 100
    gp_coef: float = 10.0
    penalty_mode: str = "gp"
    relabel_rewards: bool = True
    inverse_update_epochs: int = 1
    goal_indices: list[int] | None = None
    eval_episodes: int = 20
    workers: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.ppo, dict):
            self.ppo = PPOConfig(**self.ppo)
        if not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if not self.beta >= 0:
            raise ContractError(f"beta must be >= 0, got {self.beta}")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- #
# Rollouts and advantages
# --------------------------------------------------------------------------- #


@dataclass
class Rollout:
    traj: Trajectory
    log_probs: np.ndarray
    task_return: float
    success: bool
    rewards: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.traj)


def run_rollout(env: Env, policy: GaussianPolicy, episode_seed: int) -> Rollout:
    """One stochastic episode; the task return comes from the env's own accumulator."""
    rng = np.random.default_rng(derive_seed(episode_seed, 1))
    logps: list[float] = []

    def actor(s):
        a = policy.act(s, rng)
        logps.append(float(policy.log_prob(s[None, :], a[None, :])[0]))
        return a

    from .envs import run_episode
    traj = run_episode(env, actor, episode_seed)
    return Rollout(traj, np.asarray(logps), float(env.episode_return), bool(env.success))


def _rollout_job(args) -> Rollout:
    env, policy, s = args
    return run_rollout(env, policy, s)


def collect_rollouts(env: Env, policy: GaussianPolicy, min_steps: int, seed: int, workers: int = 1) -> list[Rollout]:
    """Whole episodes until at least ``min_steps`` transitions are gathered.

    Episode ``k`` always uses seed ``derive_seed(seed, k)``; with several
    workers extra episodes may be simulated but are dropped, so the result is
    the same as the sequential one.
    """
    out: list[Rollout] = []
    total, k = 0, 0
    if workers <= 1:
        while total < min_steps:
            r = run_rollout(env, policy, derive_seed(seed, k))
            out.append(r)
            total += len(r)
            k += 1
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        while total < min_steps:
            jobs = [(env.clone(), policy, derive_seed(seed, k + i)) for i in range(workers)]
            for r in pool.map(_rollout_job, jobs):
                if total >= min_steps:
                    break
                out.append(r)
                total += len(r)
            k += workers
    return out


@dataclass
class AdvantageBatch:
    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.states)


def gae_advantages(rollouts: list[Rollout], value: ValueNet, gamma: float, gae_lambda: float,
                   normalize: bool = True) -> AdvantageBatch:
    """Generalized advantage estimation; no bootstrap past a transition flagged done."""
    states, actions, logps, advs, targets = [], [], [], [], []
    for r in rollouts:
        if r.rewards is None:
            raise ContractError("rollouts need assigned rewards before computing advantages")
        t = r.traj
        v = value.predict(t.states)
        v_next = value.predict(t.next_states) * (1.0 - t.dones)
        delta = r.rewards + gamma * v_next - v
        adv = np.zeros(len(t))
        running = 0.0
        for i in range(len(t) - 1, -1, -1):
            running = delta[i] + gamma * gae_lambda * (1.0 - t.dones[i]) * running
            adv[i] = running
        states.append(t.states)
        actions.append(t.actions)
        logps.append(r.log_probs)
        advs.append(adv)
        targets.append(adv + v)
    adv = np.concatenate(advs)
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return AdvantageBatch(np.vstack(states), np.vstack(actions), np.concatenate(logps), adv,
                          np.concatenate(targets), normalize)


# --------------------------------------------------------------------------- #
# Objectives and the update
# --------------------------------------------------------------------------- #


def _clip_term(policy: GaussianPolicy, states, actions, old_logp, adv, eps: float) -> Tensor:
    ratio = nn.texp(policy.log_prob_tensor(states, actions) - old_logp)
    return nn.minimum(ratio * adv, nn.clip(ratio, 1.0 - eps, 1.0 + eps) * adv).mean()


def clip_objective(policy: GaussianPolicy, old_policy: GaussianPolicy | None, batch: AdvantageBatch,
                   eps: float = 0.2) -> float:
    """mean min(ratio A, clip(ratio, 1-eps, 1+eps) A) with ratio = pi / pi_old."""
    if len(batch) == 0:
        raise ContractError("clip_objective needs a non-empty batch")
    old = old_policy.log_prob(batch.states, batch.actions) if old_policy is not None else batch.old_log_probs
    ratio = np.exp(policy.log_prob(batch.states, batch.actions) - old)
    return float(np.mean(np.minimum(ratio * batch.advantages,
                                    np.clip(ratio, 1.0 - eps, 1.0 + eps) * batch.advantages)))


def mean_kl_to_prior(policy: GaussianPolicy, prior_means: np.ndarray, prior_log_std: np.ndarray, states) -> float:
    ls = np.broadcast_to(policy.log_std.data, prior_means.shape)
    return float(np.mean(nn.kl_numpy(policy.mean(states), ls, prior_means, prior_log_std)))


@dataclass
class UpdateStats:
    objective: float
    clip_obj: float
    kl_to_prior: float
    value_loss: float
    minibatch_updates: int
    incidents: int


@dataclass
class Learner:
    """A policy/value pair with their persistent optimizers."""

    policy: GaussianPolicy
    value: ValueNet
    lr: float = 3e-4
    value_lr: float = 1e-3
    policy_opt: Adam | None = None
    value_opt: Adam | None = None

    def __post_init__(self):
        self.policy_opt = self.policy_opt or Adam(self.policy.parameters(), lr=self.lr)
        self.value_opt = self.value_opt or Adam(self.value.net.parameters(), lr=self.value_lr)


def sail_policy_update(learner: Learner, batch: AdvantageBatch, prior: ActionPrior | None, cfg: PPOConfig,
                       seed: int = 0, prior_means: np.ndarray | None = None) -> UpdateStats:
    """Maximize L_clip - lambda * mean KL(pi || p_a) by minibatch Adam; regress the value net.

    With ``kl_lambda == 0`` or no prior the KL term is not built at all, so the
    update is the plain PPO update. A minibatch whose objective or gradient is
    not finite is skipped and counted in ``incidents``.
    """
    if len(batch) == 0:
        raise ContractError("empty batch")
    use_kl = prior is not None and cfg.kl_lambda > 0
    if use_kl and prior_means is None:
        prior_means = prior.means(batch.states)
    prior_ls = prior.log_std if use_kl else None
    policy, value = learner.policy, learner.value
    rng = np.random.default_rng(seed)
    incidents = updates = 0
    for _ in range(cfg.epochs_per_batch):
        for idx in _minibatches(len(batch), cfg.minibatch_size, rng):
            s, a = batch.states[idx], batch.actions[idx]
            objective = _clip_term(policy, s, a, batch.old_log_probs[idx], batch.advantages[idx], cfg.clip_epsilon)
            if use_kl:
                mean = policy.mean_tensor(s)
                kl = nn.kl_tensor(mean, policy.log_std, prior_means[idx], prior_ls).mean()
                objective = objective - kl * cfg.kl_lambda
            loss = -objective
            if not math.isfinite(loss.item()):
                incidents += 1
                log.warning("non-finite PPO objective; minibatch skipped")
                continue
            learner.policy_opt.zero_grad()
            nn.backward(loss)
            try:
                learner.policy_opt.step()
            except NonFiniteError as exc:
                incidents += 1
                log.warning("PPO update skipped: %s", exc)
                continue
            diff = value(s) - batch.value_targets[idx]
            vloss = (diff * diff).mean()
            learner.value_opt.zero_grad()
            nn.backward(vloss)
            try:
                learner.value_opt.step()
            except NonFiniteError as exc:
                incidents += 1
                log.warning("value update skipped: %s", exc)
            updates += 1
    return report_objective(learner, batch, prior_means if use_kl else None, prior_ls, cfg, updates, incidents)


def report_objective(learner: Learner, batch: AdvantageBatch, prior_means, prior_log_std, cfg: PPOConfig,
                     updates: int = 0, incidents: int = 0) -> UpdateStats:
    """Full-batch objective after an update: clip term minus lambda times the mean KL."""
    clip_val = clip_objective(learner.policy, None, batch, cfg.clip_epsilon)
    if prior_means is not None:
        kl = mean_kl_to_prior(learner.policy, prior_means, prior_log_std, batch.states)
        objective = clip_val - cfg.kl_lambda * kl
    else:
        kl, objective = float("nan"), clip_val
    vloss = float(np.mean((learner.value.predict(batch.states) - batch.value_targets) ** 2))
    return UpdateStats(objective, clip_val, kl, vloss, updates, incidents)


def pretrain_policy(policy: GaussianPolicy, prior: ActionPrior, states, epochs: int = 4000, seed: int = 0,
                    batch: int = 64, lr: float = 3e-3, target_kl: float | None = 0.01,
                    check_every: int = 50) -> GaussianPolicy:
    """Regress the policy mean onto the prior means and its log-std onto log(sigma).

    For Gaussians the KL to the prior is zero exactly when both match, so this
    drives KL(pi || p_a) down without sampling. The learning rate follows a
    cosine decay to ``lr / 30``; training stops early once the mean KL on
    ``states`` drops below ``target_kl``.
    """
    states = np.asarray(states, dtype=np.float64)
    if len(states) == 0:
        raise ContractError("pretrain_policy needs states")
    target = prior.means(states)
    target_ls = prior.log_std
    policy.norm = Standardizer.fit(states)
    rng = np.random.default_rng(seed)
    mean_opt = Adam(policy.mean_net.parameters(), lr=lr)
    std_opt = Adam([policy.log_std], lr=lr)
    for epoch in range(epochs):
        mean_opt.state.lr = lr / 30 + (lr - lr / 30) * 0.5 * (1 + math.cos(math.pi * epoch / epochs))
        for idx in _minibatches(len(states), batch, rng):
            diff = policy.mean_tensor(states[idx]) - target[idx]
            d_ls = policy.log_std - target_ls
            loss = (diff * diff).sum(axis=-1).mean() + (d_ls * d_ls).sum()
            mean_opt.zero_grad()
            std_opt.zero_grad()
            nn.backward(loss)
            mean_opt.step()
            std_opt.step()
        if target_kl is not None and (epoch + 1) % check_every == 0:
            std_ok = np.max(np.abs(policy.log_std.data - target_ls)) < 0.01
            if std_ok and mean_kl_to_prior(policy, target, target_ls, states) < target_kl:
                break
    return policy


# --------------------------------------------------------------------------- #
# Training loops
# --------------------------------------------------------------------------- #


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value: ValueNet
    critic: CriticNet | None
    prior: ActionPrior | None
    metrics: list[dict]
    init_report: EvalReport | None = None
    final_report: EvalReport | None = None
    best_policy: GaussianPolicy | None = None
    best_episode: int = -1
    best_report: EvalReport | None = None
    update_stats: list[UpdateStats] = field(default_factory=list)


def write_metrics(rows: list[dict], path, fields=METRIC_FIELDS) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r[k] if isinstance(r[k], (int, np.integer)) else repr(float(r[k])) for k in fields])


def read_metrics(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


RewardFn = Callable[[list[Rollout], int], dict]


def _dynamics_match(env: Env, demos: DemoSet) -> bool:
    return all(t.dynamics_mod == env.mod for t in demos.trajectories)


def ppo_loop(env: Env, learner: Learner, reward_fn: RewardFn, cfg: PPOConfig, seed: int,
             prior: ActionPrior | None = None, after_rollouts: Callable | None = None, workers: int = 1,
             checkpoint: Callable | None = None, checkpoint_every: int = 0,
             ) -> tuple[list[dict], list[UpdateStats]]:
    """Collect -> reward -> (hook) -> GAE -> update, ``cfg.total_episodes`` times.

    ``reward_fn(rollouts, episode)`` fills ``rollout.rewards`` and returns extra
    metric columns; it is the only source of learning signal.
    """
    rows, stats = [], []
    env_steps = 0
    for ep in range(cfg.total_episodes):
        rollouts = collect_rollouts(env, learner.policy, cfg.memory_capacity, derive_seed(seed, 2, ep), workers)
        env_steps += sum(len(r) for r in rollouts)
        extra = reward_fn(rollouts, ep)
        if after_rollouts is not None:
            extra.update(after_rollouts(rollouts, ep))
        batch = gae_advantages(rollouts, learner.value, cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages)
        st = sail_policy_update(learner, batch, prior, cfg, seed=derive_seed(seed, 3, ep))
        stats.append(st)
        row = {"episode": ep, "env_steps": env_steps,
               "mean_return": float(np.mean([r.task_return for r in rollouts])),
               "success_rate": float(np.mean([r.success for r in rollouts])),
               "w_estimate": float("nan"), "kl_to_prior": st.kl_to_prior, "clip_obj": st.clip_obj,
               "vae_loss": float("nan"), "inv_loss": float("nan")}
        row.update(extra)
        rows.append(row)
        log.info("episode %d  return %.3f  success %.2f", ep, row["mean_return"], row["success_rate"])
        if checkpoint is not None and checkpoint_every and (ep + 1) % checkpoint_every == 0:
            checkpoint(ep, row)
    return rows, stats


def sail_train(cfg: SailConfig, env: Env, demos: DemoSet, seed: int = 0, metrics_path=None,
               checkpoint_dir=None) -> TrainResult:
    """Full SAIL pipeline.

    1. inverse dynamics on random imitator transitions (plus the demos when the
       dynamics match), 2. the next-state VAE on demo pairs, 3. the policy
       regressed onto the resulting prior, then per episode: roll out, score
       states with the critic, retrain the critic, fine-tune the inverse model
       and take a regularized PPO step.
    """
    if demos.trajectories[0].states.shape[1] != env.spec.state_dim:
        raise ContractError(f"demos have state_dim {demos.trajectories[0].states.shape[1]}, "
                            f"env has {env.spec.state_dim}")
    if demos.trajectories[0].actions.shape[1] != env.spec.action_dim:
        raise ContractError(f"demos have action_dim {demos.trajectories[0].actions.shape[1]}, "
                            f"env has {env.spec.action_dim}")
    sd, ad = env.spec.state_dim, env.spec.action_dim
    projector = GoalProjector(sd, tuple(cfg.goal_indices)) if cfg.goal_indices is not None else None
    try:
        data = random_transitions(env, cfg.random_steps, seed=derive_seed(seed, 10))
        if _dynamics_match(env, demos):
            data = data + list(demos.trajectories)
        inv = train_inverse(data, epochs=cfg.inverse_epochs, seed=derive_seed(seed, 11), projector=projector,
                            hidden=cfg.hidden, depth=cfg.depth)
    except (ContractError, FloatingPointError) as exc:
        raise StageError("inverse-pretrain", str(exc)) from exc
    try:
        vae = train_vae(demos, beta=cfg.beta, epochs=cfg.vae_epochs, seed=derive_seed(seed, 12),
                        hidden=cfg.hidden, depth=cfg.depth, projector=projector)
        s_t, s_next = demos.pairs(min_len=2)
        if projector is not None:
            s_t, s_next = projector.project(s_t), projector.project(s_next)
        vae_final = vae_loss(vae, s_t, s_next, np.random.default_rng(derive_seed(seed, 13)))
    except (ContractError, FloatingPointError) as exc:
        raise StageError("vae-pretrain", str(exc)) from exc
    prior = ActionPrior(vae, inv, cfg.sigma)
    demo_states = demos.all_states()
    rng = np.random.default_rng(derive_seed(seed, 14))
    policy = GaussianPolicy(sd, ad, cfg.hidden, cfg.depth, rng, init_log_std=math.log(cfg.sigma))
    try:
        pretrain_policy(policy, prior, demos.state_actions()[0], cfg.pretrain_epochs, seed=derive_seed(seed, 15))
    except (ContractError, FloatingPointError) as exc:
        raise StageError("policy-pretrain", str(exc)) from exc
    value = ValueNet(sd, cfg.hidden, cfg.depth, rng)
    value.norm = policy.norm
    learner = Learner(policy, value, cfg.ppo.lr, cfg.ppo.value_lr)
    init_report = evaluate_policy(env, policy, cfg.eval_episodes, seed=derive_seed(seed, 16))

    critic = make_critic(projector.goal_dim if projector else sd, cfg.hidden, cfg.depth, seed=derive_seed(seed, 17),
                         gp_coef=cfg.gp_coef, penalty_mode=cfg.penalty_mode, projector=projector)

    def rewards(rollouts: list[Rollout], ep: int) -> dict:
        visited = np.vstack([r.traj.visited_states() for r in rollouts])
        m = demo_mean_potential(critic, demo_states)
        for r in rollouts:
            r.rewards = assign_rewards(critic, r.traj, demo_states, m).rewards
        try:
            train_critic(critic, demo_states, visited, cfg.critic_steps, seed=derive_seed(seed, 4, ep),
                         epoch_offset=ep * cfg.critic_steps)
        except StageError:
            raise
        if cfg.relabel_rewards:
            m = demo_mean_potential(critic, demo_states)
            for r in rollouts:
                r.rewards = assign_rewards(critic, r.traj, demo_states, m).rewards
        return {"w_estimate": wasserstein_estimate(critic, demo_states, visited)}

    best = {"ret": -np.inf, "policy": policy.copy(), "ep": -1}

    def refresh_inverse(rollouts: list[Rollout], ep: int) -> dict:
        # rollouts were generated by the pre-update policy, so it is the one to keep
        ret = float(np.mean([r.task_return for r in rollouts]))
        if ret > best["ret"]:
            best.update(ret=ret, policy=learner.policy.copy(), ep=ep)
        trajs = [r.traj for r in rollouts]
        s, a, s2 = _last_transitions(trajs, cfg.ppo.memory_capacity)
        # fit the actions the env actually applied, not the raw Gaussian samples
        a = env.applied_action(a)
        try:
            loss = update_inverse(inv, (s, a, s2), cfg.inverse_update_epochs, seed=derive_seed(seed, 5, ep))
        except FloatingPointError as exc:
            raise StageError("inverse-update", str(exc)) from exc
        return {"inv_loss": loss, "vae_loss": vae_final}

    def checkpoint(ep, row):
        if checkpoint_dir is not None:
            save_policy(Path(checkpoint_dir) / f"policy_ep{ep + 1:04d}.ckpt", learner.policy)

    rows, stats = ppo_loop(env, learner, rewards, cfg.ppo, seed, prior=prior, after_rollouts=refresh_inverse,
                           workers=cfg.workers, checkpoint=checkpoint, checkpoint_every=cfg.checkpoint_every)
    for row in rows:
        row["vae_loss"] = vae_final
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    final_report = evaluate_policy(env, policy, cfg.eval_episodes, seed=derive_seed(seed, 18))
    best_report = evaluate_policy(env, best["policy"], cfg.eval_episodes, seed=derive_seed(seed, 18))
    return TrainResult(policy, value, critic, prior, rows, init_report, final_report, update_stats=stats,
                       best_policy=best["policy"], best_episode=best["ep"], best_report=best_report)


def _last_transitions(trajs: list[Trajectory], n: int):
    s = np.vstack([t.states for t in trajs])[-n:]
    a = np.vstack([t.actions for t in trajs])[-n:]
    s2 = np.vstack([t.next_states for t in trajs])[-n:]
    return s, a, s2


# --------------------------------------------------------------------------- #
# Baselines
# --------------------------------------------------------------------------- #


def bc_train(demos: DemoSet, epochs: int = 300, seed: int = 0, hidden: int = 64, depth: int = 3,
             batch: int = 64, lr: float = 1e-3, sigma: float = DEFAULT_SIGMA) -> GaussianPolicy:
    """Behavior cloning: least-squares regression of demo actions on demo states."""
    s, a = demos.state_actions()
    rng = np.random.default_rng(seed)
    policy = GaussianPolicy(s.shape[1], a.shape[1], hidden, depth, rng, init_log_std=math.log(sigma))
    policy.norm = Standardizer.fit(s)
    opt = Adam(policy.mean_net.parameters(), lr=lr)
    for _ in range(epochs):
        for idx in _minibatches(len(s), batch, rng):
            diff = policy.mean_tensor(s[idx]) - a[idx]
            loss = (diff * diff).sum(axis=-1).mean()
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
    return policy


def action_mse(policy, states, actions) -> float:
    return float(np.mean(np.sum((policy.mean(states) - actions) ** 2, axis=-1)))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) without overflow: relu(x) + log(1 + e^{-|x|})."""
    ax = nn.relu(x) + nn.relu(-x)
    return nn.relu(x) + nn.tlog(nn.texp(-ax) + 1.0)


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class Discriminator:
    """D(s, a) = sigmoid(net([s, a])); expert pairs are the positive class."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int = 64, depth: int = 3,
                 rng: np.random.Generator | None = None, lr: float = 3e-4):
        self.net = make_mlp(state_dim + action_dim, 1, hidden, depth, rng)
        self.norm = Standardizer.identity(state_dim + action_dim)
        self.opt = Adam(self.net.parameters(), lr=lr)

    def logits(self, s, a) -> np.ndarray:
        return self.net.predict(self.norm(np.concatenate([s, a], axis=-1)))[:, 0]

    def reward(self, s, a, form: str = "neg_log_one_minus_d") -> np.ndarray:
        """-log(1 - D) = softplus(logit) by default; ``form="log_d"`` gives log D = -softplus(-logit)."""
        if form == "log_d":
            return -softplus_np(-self.logits(s, a))
        return softplus_np(self.logits(s, a))

    def train(self, expert_sa: tuple, policy_sa: tuple, steps: int, rng: np.random.Generator,
              batch: int = 128) -> float:
        xe = self.norm(np.concatenate(expert_sa, axis=-1))
        xp = self.norm(np.concatenate(policy_sa, axis=-1))
        last = float("nan")
        for _ in range(steps):
            le = self.net(xe[rng.integers(len(xe), size=batch)])[:, 0]
            lp = self.net(xp[rng.integers(len(xp), size=batch)])[:, 0]
            # -log D(expert) - log(1 - D(policy))
            loss = softplus(-le).mean() + softplus(lp).mean()
            self.opt.zero_grad()
            nn.backward(loss)
            self.opt.step()
            last = loss.item()
        return last


GAIL_REWARD_FORMS = ("neg_log_one_minus_d", "log_d")


def gail_lite_train(cfg: SailConfig, env: Env, demos: DemoSet, seed: int = 0, disc_steps: int = 50,
                    metrics_path=None, reward_form: str = "neg_log_one_minus_d") -> TrainResult:
    """GAIL-style baseline: state-action discriminator reward, plain PPO, no prior.

    The default reward -log(1 - D) is positive at every step, which in a
    goal-terminated task pays the policy for postponing the goal; ``"log_d"``
    is the always-negative alternative.
    """
    if reward_form not in GAIL_REWARD_FORMS:
        raise ContractError(f"reward_form must be one of {GAIL_REWARD_FORMS}")
    sd, ad = env.spec.state_dim, env.spec.action_dim
    rng = np.random.default_rng(derive_seed(seed, 20))
    es, ea = demos.state_actions()
    policy = GaussianPolicy(sd, ad, cfg.hidden, cfg.depth, rng, init_log_std=math.log(cfg.sigma))
    policy.norm = Standardizer.fit(es)
    value = ValueNet(sd, cfg.hidden, cfg.depth, rng)
    value.norm = policy.norm
    disc = Discriminator(sd, ad, cfg.hidden, cfg.depth, rng)
    disc.norm = Standardizer.fit(np.concatenate([es, ea], axis=-1))
    learner = Learner(policy, value, cfg.ppo.lr, cfg.ppo.value_lr)
    ppo_cfg = PPOConfig(**{**asdict(cfg.ppo), "kl_lambda": 0.0})
    init_report = evaluate_policy(env, policy, cfg.eval_episodes, seed=derive_seed(seed, 16))

    def rewards(rollouts: list[Rollout], ep: int) -> dict:
        ps = np.vstack([r.traj.states for r in rollouts])
        pa = np.vstack([r.traj.actions for r in rollouts])
        try:
            loss = disc.train((es, ea), (ps, pa), disc_steps, np.random.default_rng(derive_seed(seed, 6, ep)))
        except FloatingPointError as exc:
            raise StageError("discriminator", str(exc)) from exc
        for r in rollouts:
            r.rewards = disc.reward(r.traj.states, r.traj.actions, reward_form)
        return {"w_estimate": loss}

    rows, stats = ppo_loop(env, learner, rewards, ppo_cfg, seed, prior=None, workers=cfg.workers)
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    final_report = evaluate_policy(env, policy, cfg.eval_episodes, seed=derive_seed(seed, 18))
    return TrainResult(policy, value, None, None, rows, init_report, final_report, update_stats=stats)


# --------------------------------------------------------------------------- #
# Policy checkpoints
# --------------------------------------------------------------------------- #


def save_policy(path, policy: GaussianPolicy, extra: dict | None = None) -> None:
    arrays = {"log_std": policy.log_std.data, "norm_mean": policy.norm.mean, "norm_std": policy.norm.std}
    arrays.update(extra or {})
    nn.write_checkpoint(path, {"policy_mean": policy.mean_net}, arrays)


def load_policy(path) -> GaussianPolicy:
    nets, arrays = nn.read_checkpoint(path)
    net: Mlp = nets["policy_mean"]
    policy = GaussianPolicy.__new__(GaussianPolicy)
    policy.mean_net = net
    policy.log_std = Tensor(arrays["log_std"], requires_grad=True)
    policy.norm = Standardizer(arrays["norm_mean"], arrays["norm_std"])
    return policy


__all__ = [
    "GaussianPolicy", "ValueNet", "PPOConfig", "SailConfig", "AdvantageBatch", "Rollout", "Learner", "UpdateStats",
    "TrainResult", "gae_advantages", "clip_objective", "sail_policy_update", "pretrain_policy", "sail_train",
    "bc_train", "gail_lite_train", "collect_rollouts", "run_rollout", "ppo_loop", "mean_kl_to_prior",
    "report_objective", "write_metrics", "read_metrics", "save_policy", "load_policy", "derive_seed",
    "Discriminator", "softplus", "action_mse", "METRIC_FIELDS",
]
