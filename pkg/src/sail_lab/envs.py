"""Toy environments, scripted experts and demonstration recording.

Three deterministic environments share one small interface:

* ``two-ring``: two one-hot states, a 1-D action whose sign picks
  ``switch`` (> 0) or ``stay`` (<= 0).
* ``point-mass``: kinematic 2-D point, ``x' = x + dt * gain * clip(a) / mass``.
* ``u-maze``: the same kinematics on a 24x24 grid with a U-shaped wall layout;
  a move whose destination is a wall cell leaves the position unchanged.

``step`` returns ``(next_state, done)`` only. The task reward is kept on the
environment (``last_reward``, ``episode_return``) for diagnostics and is never
part of what a learner consumes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError

DEMOSET_TAG = "demoset-v1"


@dataclass(frozen=True)
class DynamicsMod:
    mass_scale: float = 1.0
    action_gain: float = 1.0
    disabled_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.mass_scale > 0 or not self.action_gain > 0:
            raise ContractError(f"mass_scale and action_gain must be positive, got "
                                f"{self.mass_scale}, {self.action_gain}")
        object.__setattr__(self, "disabled_dims", tuple(sorted(set(int(d) for d in self.disabled_dims))))

    def apply(self, action: np.ndarray) -> np.ndarray:
        """Effective control after disabling channels and scaling by gain / mass."""
        out = action * (self.action_gain / self.mass_scale)
        if self.disabled_dims:
            out = out.copy()
            out[list(self.disabled_dims)] = 0.0
        return out

    @property
    def is_identity(self) -> bool:
        return self.mass_scale == 1.0 and self.action_gain == 1.0 and not self.disabled_dims

    def to_dict(self) -> dict:
        return {"mass_scale": self.mass_scale, "action_gain": self.action_gain,
                "disabled_dims": list(self.disabled_dims)}

    @classmethod
    def from_dict(cls, d: dict | None) -> DynamicsMod:
        d = d or {}
        unknown = set(d) - {"mass_scale", "action_gain", "disabled_dims"}
        if unknown:
            raise ContractError(f"unknown dynamics mod keys {sorted(unknown)}")
        return cls(float(d.get("mass_scale", 1.0)), float(d.get("action_gain", 1.0)),
                   tuple(d.get("disabled_dims", ())))

    @classmethod
    def parse(cls, text: str | None) -> DynamicsMod:
        """Parse ``mass=2,gain=0.25,disabled=0:1`` (any subset, any order)."""
        if not text:
            return cls()
        kw: dict = {}
        for part in text.split(","):
            key, _, val = part.partition("=")
            key = key.strip()
            if key in ("mass", "mass_scale"):
                kw["mass_scale"] = float(val)
            elif key in ("gain", "action_gain"):
                kw["action_gain"] = float(val)
            elif key in ("disabled", "disabled_dims"):
                kw["disabled_dims"] = tuple(int(v) for v in val.split(":") if v.strip())
            else:
                raise ContractError(f"unknown dynamics mod key {key!r}")
        return cls(**kw)


IDENTITY = DynamicsMod()


@dataclass(frozen=True)
class EnvSpec:
    id: str
    state_dim: int
    action_dim: int
    horizon: int
    dynamics_mod: DynamicsMod = IDENTITY

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1 or self.horizon < 1:
            raise ContractError(f"invalid env spec {self}")


class Transition:
    """One ``(s, a, s', r, done)`` record.

    ``reward`` is the task reward, kept for diagnostics. Reads are counted in
    ``Transition.reward_reads`` so tests can assert that no learning path
    touches it.
    """

    __slots__ = ("state", "action", "next_state", "_reward", "done")
    reward_reads = 0

    def __init__(self, state, action, next_state, reward: float, done: bool):
        self.state = np.asarray(state, dtype=np.float64)
        self.action = np.asarray(action, dtype=np.float64)
        self.next_state = np.asarray(next_state, dtype=np.float64)
        self._reward = float(reward)
        self.done = bool(done)

    @property
    def reward(self) -> float:
        Transition.reward_reads += 1
        return self._reward

    def __eq__(self, other) -> bool:
        return (isinstance(other, Transition) and self.done == other.done and self._reward == other._reward
                and np.array_equal(self.state, other.state) and np.array_equal(self.action, other.action)
                and np.array_equal(self.next_state, other.next_state))

    def __repr__(self) -> str:
        return f"Transition(s={self.state}, a={self.action}, s'={self.next_state}, done={self.done})"


@dataclass
class Trajectory:
    transitions: list[Transition]
    env_id: str
    dynamics_mod: DynamicsMod = IDENTITY
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> np.ndarray:
        return np.array([t.state for t in self.transitions])

    @property
    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions])

    @property
    def next_states(self) -> np.ndarray:
        return np.array([t.next_state for t in self.transitions])

    @property
    def dones(self) -> np.ndarray:
        return np.array([t.done for t in self.transitions], dtype=bool)

    def visited_states(self) -> np.ndarray:
        """s_1 .. s_T followed by the final successor state."""
        return np.vstack([self.states, self.transitions[-1].next_state[None, :]])

    def task_return(self) -> float:
        return float(sum(t._reward for t in self.transitions))


@dataclass
class DemoSet:
    trajectories: list[Trajectory]
    source_expert: str = "scripted"
    env_id: str = field(init=False, default="")
    state_dim: int = field(init=False, default=0)

    def __post_init__(self):
        if not self.trajectories:
            raise ContractError("a DemoSet needs at least one trajectory")
        nonempty = [t for t in self.trajectories if len(t)]
        if not nonempty:
            raise ContractError("all trajectories are empty")
        self.env_id = self.trajectories[0].env_id
        self.state_dim = int(nonempty[0].transitions[0].state.size)
        for traj in self.trajectories:
            if traj.env_id != self.env_id:
                raise ContractError(f"mixed env ids {self.env_id!r} and {traj.env_id!r}")
            for tr in traj.transitions:
                if tr.state.size != self.state_dim:
                    raise DimensionError(f"state dim {tr.state.size} != {self.state_dim}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def pairs(self, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """(s_t, s_{t+1}) arrays over all trajectories with at least ``min_len`` steps."""
        ss, sn = [], []
        for traj in self.trajectories:
            if len(traj) >= min_len:
                ss.append(traj.states)
                sn.append(traj.next_states)
        return np.vstack(ss), np.vstack(sn)

    def state_actions(self) -> tuple[np.ndarray, np.ndarray]:
        trajs = [t for t in self.trajectories if len(t)]
        return np.vstack([t.states for t in trajs]), np.vstack([t.actions for t in trajs])

    def all_states(self) -> np.ndarray:
        return np.vstack([t.visited_states() for t in self.trajectories if len(t)])

    def transitions(self) -> list[Transition]:
        return [tr for traj in self.trajectories for tr in traj.transitions]


# --------------------------------------------------------------------------- #
# Environments
# --------------------------------------------------------------------------- #


class Env:
    """Shared bookkeeping: horizon, done flag, task-reward log."""

    env_id = "base"

    def __init__(self, state_dim: int, action_dim: int, horizon: int, mod: DynamicsMod = IDENTITY):
        self.spec = EnvSpec(self.env_id, state_dim, action_dim, horizon, mod)
        self.state = np.zeros(state_dim)
        self.t = 0
        self.done = True
        self.success = False
        self.last_reward = 0.0
        self.episode_return = 0.0

    @property
    def mod(self) -> DynamicsMod:
        return self.spec.dynamics_mod

    def _params(self) -> dict:
        return {}

    def with_mod(self, mod: DynamicsMod) -> Env:
        return type(self)(mod=mod, **self._params())

    def clone(self) -> Env:
        return self.with_mod(self.mod)

    def applied_action(self, action):
        """The commanded action after actuator saturation, before the dynamics mod."""
        return np.asarray(action, dtype=np.float64)

    def reset(self, seed: int = 0) -> np.ndarray:
        self.t = 0
        self.done = False
        self.success = False
        self.last_reward = 0.0
        self.episode_return = 0.0
        self.state = self._initial_state(np.random.default_rng(seed))
        return self.state.copy()

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self.done:
            raise ContractError("step() called on a finished episode; call reset() first")
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        if action.shape != (self.spec.action_dim,):
            raise DimensionError(f"action shape {action.shape}, expected ({self.spec.action_dim},)")
        if not np.all(np.isfinite(action)):
            raise ContractError(f"non-finite action {action}")
        next_state, reward, reached = self._transition(self.state, action)
        self.t += 1
        self.state = next_state
        self.last_reward = reward
        self.episode_return += reward
        if reached:
            self.success = True
        self.done = reached or self.t >= self.spec.horizon
        return next_state.copy(), self.done

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, state, action) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class TwoRing(Env):
    """Two states with deterministic stay/switch transitions.

    The expert switches every step, so its state sequence alternates s1, s2, s1, ...
    Task reward is 1 per switch; an episode counts as a success when every step
    switched.
    """

    env_id = "two-ring"
    S1 = np.array([1.0, 0.0])
    S2 = np.array([0.0, 1.0])

    def __init__(self, horizon: int = 64, mod: DynamicsMod = IDENTITY):
        super().__init__(2, 1, horizon, mod)
        self._switches = 0

    def _params(self) -> dict:
        return {"horizon": self.spec.horizon}

    def _initial_state(self, rng):
        self._switches = 0
        return self.S1.copy()

    def _transition(self, state, action):
        switch = bool(self.mod.apply(action)[0] > 0)
        nxt = state[::-1].copy() if switch else state.copy()
        self._switches += switch
        return nxt, float(switch), False

    def step(self, action):
        out = super().step(action)
        self.success = self._switches == self.t
        return out

    def expert_action(self, state):
        return np.array([1.0])


class PointMass(Env):
    """Kinematic point in the plane, moving from near ``start`` to ``goal``.

    Task reward is the per-step decrease in goal distance plus 1 on arrival.
    """

    env_id = "point-mass"

    def __init__(self, horizon: int = 200, dt: float = 0.1, a_max: float = 1.0,
                 start=(-0.8, -0.8), goal=(0.8, 0.8), start_noise: float = 0.1,
                 goal_radius: float = 0.1, expert_speed: float = 0.25, expert_gain: float = 2.5,
                 mod: DynamicsMod = IDENTITY):
        super().__init__(2, 2, horizon, mod)
        self.dt = dt
        self.a_max = a_max
        self.start = np.asarray(start, dtype=np.float64)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.start_noise = start_noise
        self.goal_radius = goal_radius
        self.expert_speed = expert_speed
        self.expert_gain = expert_gain

    def _params(self) -> dict:
        return dict(horizon=self.spec.horizon, dt=self.dt, a_max=self.a_max, start=tuple(self.start),
                    goal=tuple(self.goal), start_noise=self.start_noise, goal_radius=self.goal_radius,
                    expert_speed=self.expert_speed, expert_gain=self.expert_gain)

    def _initial_state(self, rng):
        return self.start + rng.uniform(-self.start_noise, self.start_noise, size=2)

    def applied_action(self, action):
        return np.clip(action, -self.a_max, self.a_max)

    def _transition(self, state, action):
        control = self.mod.apply(self.applied_action(action))
        nxt = state + self.dt * control
        d_prev = np.linalg.norm(state - self.goal)
        d_new = np.linalg.norm(nxt - self.goal)
        reached = bool(d_new < self.goal_radius)
        return nxt, float(d_prev - d_new) + (1.0 if reached else 0.0), reached

    def expert_action(self, state):
        if np.linalg.norm(state - self.goal) < self.goal_radius:
            return np.zeros(2)
        return np.clip(self.expert_gain * (self.goal - state), -self.expert_speed, self.expert_speed)


class UMaze(Env):
    """Point mass in a 24x24 grid maze shaped like a U.

    Cells with ``x == 0``, ``x == 23``, ``y == 0``, ``y == 23`` and the inner
    block ``x < 16, 10 <= y < 14`` are walls. The episode starts in the lower
    left pocket and succeeds on reaching the upper left pocket. States are
    positions divided by the grid size; with ``velocity_dims`` the last
    displacement (in cells) is appended, giving a 4-D state whose first two
    dimensions are the goal space.
    """

    env_id = "u-maze"
    SIZE = 24

    def __init__(self, horizon: int = 400, step_size: float = 1.0, a_max: float = 1.0,
                 expert_speed: float = 0.5, goal=(3.5, 19.5), goal_radius: float = 1.5,
                 velocity_dims: bool = False, mod: DynamicsMod = IDENTITY):
        super().__init__(4 if velocity_dims else 2, 2, horizon, mod)
        self.step_size = step_size
        self.a_max = a_max
        self.expert_speed = expert_speed
        self.goal = np.asarray(goal, dtype=np.float64)
        self.goal_radius = goal_radius
        self.velocity_dims = velocity_dims
        self.walls = self.wall_grid()
        self._dist = self._distance_field()

    def _params(self) -> dict:
        return dict(horizon=self.spec.horizon, step_size=self.step_size, a_max=self.a_max,
                    expert_speed=self.expert_speed, goal=tuple(self.goal), goal_radius=self.goal_radius,
                    velocity_dims=self.velocity_dims)

    @classmethod
    def wall_grid(cls) -> np.ndarray:
        """Boolean ``walls[x, y]``."""
        w = np.zeros((cls.SIZE, cls.SIZE), dtype=bool)
        w[0, :] = w[-1, :] = w[:, 0] = w[:, -1] = True
        w[:16, 10:14] = True
        return w

    def is_wall(self, pos: np.ndarray) -> bool:
        cx, cy = int(np.floor(pos[0])), int(np.floor(pos[1]))
        if not (0 <= cx < self.SIZE and 0 <= cy < self.SIZE):
            return True
        return bool(self.walls[cx, cy])

    def _distance_field(self) -> np.ndarray:
        dist = np.full(self.walls.shape, -1, dtype=int)
        gx, gy = int(self.goal[0]), int(self.goal[1])
        dist[gx, gy] = 0
        queue = deque([(gx, gy)])
        while queue:
            x, y = queue.popleft()
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if 0 <= nx < self.SIZE and 0 <= ny < self.SIZE and not self.walls[nx, ny] and dist[nx, ny] < 0:
                    dist[nx, ny] = dist[x, y] + 1
                    queue.append((nx, ny))
        return dist

    def position(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state[:2]) * self.SIZE

    def _make_state(self, pos, disp) -> np.ndarray:
        s = pos / self.SIZE
        return np.concatenate([s, disp]) if self.velocity_dims else s

    def _initial_state(self, rng):
        pos = rng.uniform(2.0, 6.0, size=2)
        return self._make_state(pos, np.zeros(2))

    def applied_action(self, action):
        return np.clip(action, -self.a_max, self.a_max)

    def _transition(self, state, action):
        pos = self.position(state)
        control = self.mod.apply(self.applied_action(action))
        new_pos = pos + self.step_size * control
        if self.is_wall(new_pos):
            new_pos = pos
        reached = bool(np.linalg.norm(new_pos - self.goal) < self.goal_radius)
        return self._make_state(new_pos, new_pos - pos), (1.0 if reached else 0.0), reached

    def expert_action(self, state):
        pos = self.position(state)
        cx, cy = int(np.floor(pos[0])), int(np.floor(pos[1]))
        d = self._dist[cx, cy]
        if d <= 0:
            target = self.goal
        else:
            target = None
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = cx + dx, cy + dy
                if self._dist[nx, ny] == d - 1:
                    target = np.array([nx + 0.5, ny + 0.5])
                    break
        return np.clip((target - pos) / self.step_size, -self.expert_speed, self.expert_speed)


ENVIRONMENTS: dict[str, type[Env]] = {"two-ring": TwoRing, "point-mass": PointMass, "u-maze": UMaze}


def make_env(env_id: str, mod: DynamicsMod | None = None, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ContractError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(mod=mod or IDENTITY, **kwargs)


def make_variant(env: Env, mod: DynamicsMod) -> Env:
    if not isinstance(mod, DynamicsMod):
        raise ContractError(f"expected a DynamicsMod, got {type(mod).__name__}")
    return env.with_mod(mod)


def reset(env: Env, seed: int) -> np.ndarray:
    return env.reset(seed)


def step(env: Env, action) -> tuple[np.ndarray, bool]:
    return env.step(action)


def scripted_expert_action(env: Env, state) -> np.ndarray:
    return env.expert_action(np.asarray(state, dtype=np.float64))


# --------------------------------------------------------------------------- #
# Rollouts and demonstrations
# --------------------------------------------------------------------------- #

Actor = Callable[[np.ndarray], np.ndarray]


def run_episode(env: Env, actor: Actor, seed: int) -> Trajectory:
    state = env.reset(seed)
    transitions = []
    done = False
    while not done:
        action = np.asarray(actor(state), dtype=np.float64)
        next_state, done = env.step(action)
        transitions.append(Transition(state, action, next_state, env.last_reward, done))
        state = next_state
    has_goal = not isinstance(env, TwoRing)
    return Trajectory(transitions, env.spec.id, env.mod, truncated=has_goal and not env.success)


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def collect_demos(env: Env, n_traj: int, seed: int = 0, expert: Actor | None = None,
                  source: str = "scripted") -> DemoSet:
    """Record ``n_traj`` expert episodes; episode ``i`` is reset with a seed derived from ``seed``."""
    if n_traj < 1:
        raise ContractError(f"n_traj must be >= 1, got {n_traj}")
    actor = expert or env.expert_action
    trajs = [run_episode(env, actor, s) for s in episode_seeds(seed, n_traj)]
    return DemoSet(trajs, source_expert=source)


def random_transitions(env: Env, n_steps: int, seed: int = 0, hold: int = 8) -> list[Trajectory]:
    """Episodes of a uniform random policy that resamples its action every ``hold`` steps."""
    rng = np.random.default_rng(seed)
    trajs: list[Trajectory] = []
    total = 0
    lim = getattr(env, "a_max", 1.0)
    while total < n_steps:
        held = {"a": None, "k": 0}

        def actor(_state):
            if held["k"] % hold == 0:
                held["a"] = rng.uniform(-lim, lim, size=env.spec.action_dim)
            held["k"] += 1
            return held["a"]

        traj = run_episode(env, actor, int(rng.integers(2**31)))
        trajs.append(traj)
        total += len(traj)
    return trajs


# --------------------------------------------------------------------------- #
# demoset-v1 files
# --------------------------------------------------------------------------- #


def _f(x: float) -> str:
    return format(float(x), ".17g")


def save_demos(demos: DemoSet, path, mod: DynamicsMod | None = None) -> None:
    """Write a demoset-v1 file.

    Line 1: ``demoset-v1 <json header>`` with env_id, state_dim, action_dim,
    mod, count (trajectories), transitions, source_expert, truncated flags.
    Then one line per transition, whitespace separated, in this order:
    ``traj step s[0..S) a[0..A) s'[0..S) reward done``.
    """
    first = demos.trajectories[0]
    mod = mod or first.dynamics_mod
    action_dim = int(first.transitions[0].action.size)
    header = {"env_id": demos.env_id, "state_dim": demos.state_dim, "action_dim": action_dim,
              "mod": mod.to_dict(), "count": len(demos), "transitions": demos.n_transitions,
              "source_expert": demos.source_expert,
              "truncated": [bool(t.truncated) for t in demos.trajectories]}
    lines = [f"{DEMOSET_TAG} {json.dumps(header, sort_keys=True)}"]
    for i, traj in enumerate(demos.trajectories):
        for k, tr in enumerate(traj.transitions):
            fields = [str(i), str(k)]
            fields += [_f(v) for v in tr.state]
            fields += [_f(v) for v in tr.action]
            fields += [_f(v) for v in tr.next_state]
            fields += [_f(tr._reward), "1" if tr.done else "0"]
            lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path) -> DemoSet:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(DEMOSET_TAG + " "):
        raise ContractError(f"{path}: missing {DEMOSET_TAG} header")
    header = json.loads(lines[0][len(DEMOSET_TAG) + 1:])
    sd, ad = int(header["state_dim"]), int(header["action_dim"])
    mod = DynamicsMod.from_dict(header["mod"])
    per_traj: list[list[Transition]] = [[] for _ in range(int(header["count"]))]
    for ln, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if len(tok) != 2 + 2 * sd + ad + 2:
            raise ContractError(f"{path}:{ln}: expected {2 + 2 * sd + ad + 2} fields, got {len(tok)}")
        vals = [float(v) for v in tok[2:-1]]
        per_traj[int(tok[0])].append(Transition(vals[:sd], vals[sd:sd + ad], vals[sd + ad:sd + ad + sd],
                                                vals[-1], tok[-1] == "1"))
    flags = header.get("truncated", [False] * len(per_traj))
    trajs = [Trajectory(tr, header["env_id"], mod, truncated=bool(f)) for tr, f in zip(per_traj, flags)]
    return DemoSet(trajs, source_expert=header.get("source_expert", "scripted"))


def with_horizon(env: Env, horizon: int) -> Env:
    params = env._params()
    params["horizon"] = horizon
    return type(env)(mod=env.mod, **params)


__all__ = [
    "DynamicsMod", "EnvSpec", "Transition", "Trajectory", "DemoSet", "Env", "TwoRing", "PointMass", "UMaze",
    "make_env", "make_variant", "reset", "step", "scripted_expert_action", "collect_demos",
    "random_transitions", "run_episode", "save_demos", "load_demos", "episode_seeds", "with_horizon",
]
