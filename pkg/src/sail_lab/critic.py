"""Global alignment: Kantorovich-potential critic, W1 estimate and per-step rewards."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .align import GoalProjector
from .envs import DemoSet, Trajectory
from .errors import ContractError, NonFiniteError, StageError
from .nn import Adam, Mlp, make_mlp

PENALTY_MODES = ("gp", "clip")
CRITIC_METRIC_FIELDS = ("epoch", "duality_gap", "penalty", "mean_grad_norm")


@dataclass
class CriticNet:
    """Scalar potential phi over (optionally projected) states.

    ``penalty_mode="gp"`` adds ``gp_coef * mean((|grad phi| - 1)^2)`` at random
    interpolants; ``"clip"`` instead clamps every weight to ``+-clip_value``
    after each step. For the first ``warmup_steps`` updates of a fresh critic the
    penalty is one-sided (only norms above 1 cost anything) so the sign of phi is
    set by the duality gap rather than by the random initial slope.
    """

    net: Mlp
    gp_coef: float = 10.0
    penalty_mode: str = "gp"
    clip_value: float = 0.5
    projector: GoalProjector | None = None
    lr: float = 1e-3
    warmup_steps: int = 25
    steps_taken: int = 0
    metrics: list[dict] = field(default_factory=list)
    _opt: Adam | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.net.out_dim != 1:
            raise ContractError(f"critic must have a scalar output, got {self.net.out_dim}")
        if self.gp_coef < 0:
            raise ContractError(f"gp_coef must be >= 0, got {self.gp_coef}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ContractError(f"penalty_mode must be one of {PENALTY_MODES}")

    def inputs(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.projector.project(states) if self.projector is not None else states

    def potential(self, states) -> np.ndarray:
        return self.net.predict(self.inputs(states))[:, 0]


def make_critic(input_dim: int, hidden: int = 64, depth: int = 3, seed: int = 0, **kw) -> CriticNet:
    return CriticNet(make_mlp(input_dim, 1, hidden, depth, np.random.default_rng(seed)), **kw)


def _states(x) -> np.ndarray:
    if isinstance(x, DemoSet):
        return x.all_states()
    if isinstance(x, Trajectory):
        return x.visited_states()
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Trajectory):
        return np.vstack([t.visited_states() for t in x if len(t)])
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


@dataclass
class CriticTerms:
    loss: nn.Tensor
    duality_gap: float
    penalty: float
    mean_grad_norm: float


def interpolants(demo_x: np.ndarray, roll_x: np.ndarray, rng: np.random.Generator, n: int | None = None):
    """Random convex combinations of uniformly paired demo / rollout points."""
    n = n or max(len(demo_x), len(roll_x))
    i = rng.integers(len(demo_x), size=n)
    j = rng.integers(len(roll_x), size=n)
    alpha = rng.uniform(size=(n, 1))
    return alpha * demo_x[i] + (1.0 - alpha) * roll_x[j]


def critic_terms(critic: CriticNet, demo_states, rollout_states, rng: np.random.Generator,
                 one_sided: bool = False) -> CriticTerms:
    demo_x, roll_x = critic.inputs(demo_states), critic.inputs(rollout_states)
    if len(demo_x) == 0 or len(roll_x) == 0:
        raise ContractError("critic objective needs non-empty demo and rollout batches")
    gap = critic.net(demo_x).mean() - critic.net(roll_x).mean()
    x_hat = interpolants(demo_x, roll_x, rng)
    grad = nn.input_gradient(critic.net, x_hat, create_graph=True)
    norms = nn.tsqrt((grad * grad).sum(axis=-1) + 1e-12)
    dev = norms - 1.0
    if one_sided:
        dev = nn.relu(dev)
    penalty = (dev * dev).mean()
    if critic.penalty_mode == "gp":
        loss = -gap + penalty * critic.gp_coef
    else:
        loss = -gap
    return CriticTerms(loss, gap.item(), penalty.item(), float(norms.data.mean()))


def critic_objective(critic: CriticNet, demo_states, rollout_states, rng: np.random.Generator) -> float:
    """-(mean phi(demo) - mean phi(rollout)) + gp_coef * gradient penalty."""
    return critic_terms(critic, _states(demo_states), _states(rollout_states), rng).loss.item()


def train_critic(critic: CriticNet, demos, rollouts, steps: int = 200, seed: int = 0,
                 batch: int = 256, epoch_offset: int = 0) -> CriticNet:
    """Adam descent on the critic objective, warm-starting from the current weights.

    One metrics row per step is appended to ``critic.metrics``.
    """
    demo_x, roll_x = _states(demos), _states(rollouts)
    if len(demo_x) == 0 or len(roll_x) == 0:
        raise ContractError("train_critic needs non-empty demo and rollout data")
    rng = np.random.default_rng(seed)
    if critic._opt is None:
        critic._opt = Adam(critic.net.parameters(), lr=critic.lr, beta1=0.5, beta2=0.9)
    for k in range(steps):
        d = demo_x[rng.integers(len(demo_x), size=min(batch, len(demo_x)))]
        r = roll_x[rng.integers(len(roll_x), size=min(batch, len(roll_x)))]
        terms = critic_terms(critic, d, r, rng, one_sided=critic.steps_taken < critic.warmup_steps)
        if not np.isfinite(terms.loss.item()):
            raise StageError("critic", f"critic loss diverged at step {k}: {terms.loss.item()}")
        critic._opt.zero_grad()
        nn.backward(terms.loss)
        try:
            critic._opt.step()
        except NonFiniteError as exc:
            raise StageError("critic", str(exc)) from exc
        if critic.penalty_mode == "clip":
            for p in critic.net.weights:
                np.clip(p.data, -critic.clip_value, critic.clip_value, out=p.data)
        critic.steps_taken += 1
        critic.metrics.append({"epoch": epoch_offset + k, "duality_gap": terms.duality_gap,
                               "penalty": terms.penalty, "mean_grad_norm": terms.mean_grad_norm})
    return critic


def mean_grad_norm(critic: CriticNet, demo_states, rollout_states, seed: int = 0, n: int = 2000) -> float:
    demo_x, roll_x = critic.inputs(_states(demo_states)), critic.inputs(_states(rollout_states))
    x_hat = interpolants(demo_x, roll_x, np.random.default_rng(seed), n)
    g = nn.input_gradient(critic.net, x_hat).data
    return float(np.linalg.norm(g, axis=-1).mean())


def wasserstein_estimate(critic: CriticNet, demo_states, rollout_states) -> float:
    """Empirical duality gap mean phi(demo) - mean phi(rollout)."""
    return float(critic.potential(_states(demo_states)).mean() - critic.potential(_states(rollout_states)).mean())


@dataclass
class RewardBatch:
    rewards: np.ndarray
    horizon: int
    demo_mean_potential: float


def demo_mean_potential(critic: CriticNet, demo_states) -> float:
    return float(critic.potential(_states(demo_states)).mean())


def assign_rewards(critic: CriticNet, rollout, demo_states, demo_mean: float | None = None) -> RewardBatch:
    """r_i = (phi(s_{i+1}) - mean_demo phi) / T over one rollout of length T.

    ``rollout`` is a Trajectory or an array of next-states. ``demo_mean`` may be
    passed in when several rollouts share one assignment call.
    """
    next_states = rollout.next_states if isinstance(rollout, Trajectory) else np.atleast_2d(rollout)
    T = len(next_states)
    if T < 1:
        raise ContractError("cannot assign rewards to an empty rollout")
    m = demo_mean_potential(critic, demo_states) if demo_mean is None else demo_mean
    return RewardBatch((critic.potential(next_states) - m) / T, T, m)


def write_critic_metrics(rows: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CRITIC_METRIC_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in CRITIC_METRIC_FIELDS[1:]])


__all__ = [
    "CriticNet", "make_critic", "critic_objective", "critic_terms", "train_critic", "wasserstein_estimate",
    "assign_rewards", "RewardBatch", "mean_grad_norm", "demo_mean_potential", "write_critic_metrics",
    "interpolants", "CriticTerms",
]
