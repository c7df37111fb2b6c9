"""Evaluation, exact 1-D Wasserstein distance and the decomposable-reward verifier."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .envs import Env, episode_seeds
from .errors import ContractError

# --------------------------------------------------------------------------- #
# Policy evaluation
# --------------------------------------------------------------------------- #


@dataclass
class EvalReport:
    mean_return: float
    std_return: float
    success_rate: float
    episodes: int
    returns: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.episodes < 1:
            raise ContractError("an EvalReport needs at least one episode")

    def to_dict(self) -> dict:
        return {"mean_return": self.mean_return, "std_return": self.std_return,
                "success_rate": self.success_rate, "episodes": self.episodes}

    def text(self) -> str:
        return (f"episodes {self.episodes}  mean_return {self.mean_return:.4f}  "
                f"std_return {self.std_return:.4f}  success_rate {self.success_rate:.3f}")


def as_actor(policy, deterministic: bool, rng: np.random.Generator):
    """Wrap a policy object (``act(state, rng, deterministic)``) or a plain callable."""
    if hasattr(policy, "act"):
        return lambda s: policy.act(s, rng, deterministic)
    if callable(policy):
        return policy
    raise ContractError(f"cannot act with {type(policy).__name__}")


def evaluate_policy(env: Env, policy, episodes: int = 20, seed: int = 0,
                    deterministic_actions: bool = True) -> EvalReport:
    """Roll out ``policy`` and aggregate the env-side task return and success flag."""
    if episodes < 1:
        raise ContractError(f"episodes must be >= 1, got {episodes}")
    returns, successes = [], []
    for s in episode_seeds(seed, episodes):
        actor = as_actor(policy, deterministic_actions, np.random.default_rng(s + 1))
        state = env.reset(s)
        done = False
        while not done:
            state, done = env.step(np.asarray(actor(state), dtype=np.float64))
        returns.append(env.episode_return)
        successes.append(env.success)
    r = np.asarray(returns)
    return EvalReport(float(r.mean()), float(r.std()), float(np.mean(successes)), episodes, list(map(float, r)))


# --------------------------------------------------------------------------- #
# Exact 1-D W1
# --------------------------------------------------------------------------- #


def exact_w1_1d(samples_a, samples_b) -> float:
    """Exact W1 between two 1-D empirical distributions.

    Equal sizes use the sorted matching; otherwise the integral of
    ``|F_a - F_b|`` over the merged support.
    """
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ContractError("exact_w1_1d needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.concatenate([a, b])
    grid.sort()
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * np.diff(grid)))


# --------------------------------------------------------------------------- #
# Decomposable reward feasibility
# --------------------------------------------------------------------------- #

Pref = tuple[tuple[str, str], tuple[str, str]]


@dataclass
class DecompositionProblem:
    """Strict preferences ``f(i, j) > f(k, l)`` over rewards ``f(s, s') = phi(s) + psi(s')``."""

    states: list[str]
    strict_prefs: list[Pref]
    transitions: list[tuple[str, str]] | None = None

    def __post_init__(self):
        self.states = [str(s) for s in self.states]
        if len(set(self.states)) != len(self.states):
            raise ContractError(f"duplicate state ids in {self.states}")
        known = set(self.states)
        self.strict_prefs = [((str(i), str(j)), (str(k), str(l))) for (i, j), (k, l) in self.strict_prefs]
        if self.transitions is not None:
            self.transitions = [(str(i), str(j)) for i, j in self.transitions]
            for i, j in self.transitions:
                if i not in known or j not in known:
                    raise ContractError(f"transition ({i}, {j}) references an undeclared state")
        allowed = set(self.transitions) if self.transitions is not None else None
        for lhs, rhs in self.strict_prefs:
            for tr in (lhs, rhs):
                if tr[0] not in known or tr[1] not in known:
                    raise ContractError(f"preference uses transition {tr} with an undeclared state")
                if allowed is not None and tr not in allowed:
                    raise ContractError(f"preference uses undeclared transition {tr}")

    @property
    def variables(self) -> list[str]:
        return [f"phi{s}" for s in self.states] + [f"psi{s}" for s in self.states]

    def difference(self, pref: Pref) -> dict[str, int]:
        """Coefficients of ``f(lhs) - f(rhs)``, zero terms dropped."""
        (i, j), (k, l) = pref
        coef: dict[str, int] = {}
        for name, c in ((f"phi{i}", 1), (f"psi{j}", 1), (f"phi{k}", -1), (f"psi{l}", -1)):
            coef[name] = coef.get(name, 0) + c
        return {k: v for k, v in coef.items() if v}

    @classmethod
    def parse(cls, text: str) -> DecompositionProblem:
        """Parse the line format::

            states 1 2
            transition 1 1          (optional; restricts preferences when present)
            prefer 1 2 > 1 1
        """
        states: list[str] | None = None
        transitions: list[tuple[str, str]] = []
        prefs: list[Pref] = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            if head == "states":
                states = rest
            elif head == "transition" and len(rest) == 2:
                transitions.append((rest[0], rest[1]))
            elif head == "prefer" and len(rest) == 5 and rest[2] == ">":
                prefs.append(((rest[0], rest[1]), (rest[3], rest[4])))
            else:
                raise ContractError(f"line {n}: cannot parse {raw!r}")
        if states is None:
            raise ContractError("problem file has no 'states' line")
        return cls(states, prefs, transitions or None)

    @classmethod
    def load(cls, path) -> DecompositionProblem:
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        lines = ["states " + " ".join(self.states)]
        lines += [f"transition {i} {j}" for i, j in self.transitions or []]
        lines += [f"prefer {i} {j} > {k} {l}" for (i, j), (k, l) in self.strict_prefs]
        return "\n".join(lines) + "\n"


TWO_RING_PROBLEM = DecompositionProblem(
    ["1", "2"], [(("1", "2"), ("1", "1")), (("2", "1"), ("2", "2"))],
    [("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")])


@dataclass
class Certificate:
    """FEASIBLE with a witness scaled to margin 1, or INFEASIBLE with a contradiction.

    For INFEASIBLE, ``multipliers`` are positive weights on preferences whose
    weighted sum of ``f(lhs) - f(rhs) > 0`` cancels to ``0 > 0``; ``chain`` spells
    it out as implications between potentials.
    """

    status: str
    phi: dict[str, float] = field(default_factory=dict)
    psi: dict[str, float] = field(default_factory=dict)
    margin: float = 0.0
    multipliers: dict[int, Fraction] = field(default_factory=dict)
    chain: list[str] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == "FEASIBLE"

    def to_dict(self) -> dict:
        d = {"status": self.status}
        if self.feasible:
            d.update(phi=self.phi, psi=self.psi, margin=self.margin)
        else:
            d.update(multipliers={str(k): str(v) for k, v in self.multipliers.items()}, chain=self.chain)
        return d

    def text(self) -> str:
        lines = [f"status: {self.status}"]
        if self.feasible:
            lines += [f"phi[{k}] = {v:g}" for k, v in self.phi.items()]
            lines += [f"psi[{k}] = {v:g}" for k, v in self.psi.items()]
            lines.append(f"margin: {self.margin:g}")
        else:
            lines.append("contradiction: " + " ; ".join(self.chain))
        lines.append("json: " + json.dumps(self.to_dict(), sort_keys=True))
        return "\n".join(lines)


def simplex_max(c: list, A: list[list], b: list) -> tuple[list[Fraction], Fraction, list[Fraction]]:
    """Maximize ``c.x`` subject to ``A x <= b``, ``x >= 0`` with ``b >= 0``, exactly.

    Bland's rule for both entering and leaving variables, so degenerate pivots
    cannot cycle. Returns the optimum ``x``, its value and the dual multipliers.
    """
    m, n = len(A), len(c)
    if any(Fraction(v) < 0 for v in b):
        raise ContractError("simplex_max needs a non-negative right-hand side")
    rows = [[Fraction(v) for v in A[i]] + [Fraction(int(i == k)) for k in range(m)] + [Fraction(b[i])]
            for i in range(m)]
    obj = [-Fraction(v) for v in c] + [Fraction(0)] * (m + 1)
    basis = [n + i for i in range(m)]
    while True:
        enter = next((j for j in range(n + m) if obj[j] < 0), None)
        if enter is None:
            break
        best, leave = None, None
        for i in range(m):
            if rows[i][enter] > 0:
                ratio = rows[i][-1] / rows[i][enter]
                if best is None or ratio < best or (ratio == best and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            raise ContractError("linear program is unbounded")
        piv = rows[leave][enter]
        rows[leave] = [v / piv for v in rows[leave]]
        for i in range(m):
            if i != leave and rows[i][enter] != 0:
                f = rows[i][enter]
                rows[i] = [a - f * p for a, p in zip(rows[i], rows[leave])]
        f = obj[enter]
        obj = [a - f * p for a, p in zip(obj, rows[leave])]
        basis[leave] = enter
    x = [Fraction(0)] * n
    for i, j in enumerate(basis):
        if j < n:
            x[j] = rows[i][-1]
    return x, obj[-1], obj[n:n + m]


def _difference_chain(problem: DecompositionProblem, weights: dict[int, Fraction]) -> list[str]:
    """Render the contradiction, as a cycle ``x > y > ... > x`` when every used preference is a single difference."""
    diffs = {p: problem.difference(problem.strict_prefs[p]) for p in weights}
    if all(len(d) == 2 for d in diffs.values()):
        edges, first = {}, None
        for p, d in sorted(diffs.items()):
            hi = next(k for k, v in d.items() if v > 0)
            lo = next(k for k, v in d.items() if v < 0)
            edges.setdefault(hi, []).append(lo)
            first = first or hi
        start = first
        path, seen, node = [start], {start: 0}, start
        while True:
            node = min(edges.get(node, [None]), key=lambda x: (x is None, x))
            if node is None:
                break
            if node in seen:
                cyc = path[seen[node]:] + [node]
                return [" > ".join(cyc)]
            seen[node] = len(path)
            path.append(node)
    out = []
    for p, w in sorted(weights.items()):
        (i, j), (k, l) = problem.strict_prefs[p]
        terms = " + ".join(f"{v:+d}*{k_}" for k_, v in diffs[p].items()) or "0"
        out.append(f"{w} x [f({i},{j}) > f({k},{l})]: {terms} > 0")
    out.append("weighted sum cancels to 0 > 0")
    return out


def verify_decomposability(problem: DecompositionProblem) -> Certificate:
    """Can some ``phi, psi`` satisfy every strict preference?

    Maximizes a margin ``t in [0, 1]`` subject to ``f(lhs) - f(rhs) >= t`` and
    ``|phi|, |psi| <= 1``; feasible iff the optimum is positive. On
    infeasibility the LP duals give a positive combination of the preferences
    that cancels identically.
    """
    names = problem.variables
    n = len(names)
    index = {v: i for i, v in enumerate(names)}
    if not problem.strict_prefs:
        return Certificate("FEASIBLE", {s: 0.0 for s in problem.states}, {s: 0.0 for s in problem.states}, 1.0)
    # variables: u = v + 1 in [0, 2] for each potential, then t
    A, b = [], []
    for pref in problem.strict_prefs:
        row = [0] * (n + 1)
        for name, coef in problem.difference(pref).items():
            row[index[name]] -= coef
        row[n] = 1
        A.append(row)
        b.append(0)
    for i in range(n):
        A.append([int(k == i) for k in range(n + 1)])
        b.append(2)
    A.append([0] * n + [1])
    b.append(1)
    c = [0] * n + [1]
    x, value, duals = simplex_max(c, A, b)
    if value > 0:
        t = x[n]
        vals = [(x[i] - 1) / t for i in range(n)]
        k = len(problem.states)
        return Certificate("FEASIBLE", {s: float(v) for s, v in zip(problem.states, vals[:k])},
                           {s: float(v) for s, v in zip(problem.states, vals[k:])}, 1.0)
    weights = {p: duals[p] for p in range(len(problem.strict_prefs)) if duals[p] > 0}
    return Certificate("INFEASIBLE", multipliers=weights, chain=_difference_chain(problem, weights))


def check_assignment(problem: DecompositionProblem, phi: dict, psi: dict, margin: float = 0.0) -> bool:
    """True if every preference holds with at least ``margin`` (strictly when margin is 0)."""
    for (i, j), (k, l) in problem.strict_prefs:
        gap = phi[i] + psi[j] - phi[k] - psi[l]
        if (gap < margin - 1e-9) if margin > 0 else (gap <= 0):
            return False
    return True


def brute_force_decomposable(problem: DecompositionProblem, values=range(-3, 4)) -> dict | None:
    """Grid search over integer potentials; returns a witness ``{"phi":..., "psi":...}`` or None."""
    states = problem.states
    pos = {s: i for i, s in enumerate(states)}
    prefs = problem.strict_prefs
    if not prefs:
        return {"phi": {s: 0 for s in states}, "psi": {s: 0 for s in states}}
    grid = np.array(list(itertools.product(list(values), repeat=len(states))), dtype=np.int64)
    # f(lhs) - f(rhs) separates into a phi part and a psi part per preference
    phi_part = np.stack([grid[:, pos[i]] - grid[:, pos[k]] for (i, _), (k, _) in prefs], axis=1)
    psi_part = np.stack([grid[:, pos[j]] - grid[:, pos[l]] for (_, j), (_, l) in prefs], axis=1)
    up, ip = np.unique(phi_part, axis=0, return_index=True)
    uq, iq = np.unique(psi_part, axis=0, return_index=True)
    ok = np.all(up[:, None, :] + uq[None, :, :] > 0, axis=-1)
    hits = np.argwhere(ok)
    if len(hits) == 0:
        return None
    a, c = hits[0]
    return {"phi": dict(zip(states, map(int, grid[ip[a]]))), "psi": dict(zip(states, map(int, grid[iq[c]])))}


__all__ = [
    "EvalReport", "evaluate_policy", "as_actor", "exact_w1_1d", "DecompositionProblem", "Certificate",
    "TWO_RING_PROBLEM", "simplex_max", "verify_decomposability", "check_assignment", "brute_force_decomposable",
]
