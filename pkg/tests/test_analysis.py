from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sail_lab.analysis import (TWO_RING_PROBLEM, DecompositionProblem, EvalReport, brute_force_decomposable,
                               check_assignment, evaluate_policy, exact_w1_1d, simplex_max, verify_decomposability)
from sail_lab.envs import make_env
from sail_lab.errors import ContractError


def random_problem(rng: np.random.Generator) -> DecompositionProblem:
    states = [str(k) for k in range(1, rng.integers(2, 4) + 1)]
    pairs = [(i, j) for i in states for j in states]
    prefs = []
    for _ in range(rng.integers(1, 6)):
        a, b = rng.choice(len(pairs), size=2, replace=False)
        prefs.append((pairs[a], pairs[b]))
    return DecompositionProblem(states, prefs)


def weighted_sum(problem, multipliers) -> dict:
    total = {}
    for p, w in multipliers.items():
        for name, c in problem.difference(problem.strict_prefs[p]).items():
            total[name] = total.get(name, 0) + w * c
    return {k: v for k, v in total.items() if v != 0}


def test_two_ring_is_infeasible_with_cycle():
    cert = verify_decomposability(TWO_RING_PROBLEM)
    assert cert.status == "INFEASIBLE"
    assert cert.chain == ["psi2 > psi1 > psi2"]
    assert all(w > 0 for w in cert.multipliers.values())
    assert weighted_sum(TWO_RING_PROBLEM, cert.multipliers) == {}


def test_bundled_problem_file_matches_constant():
    from importlib import resources
    text = resources.files("sail_lab").joinpath("data/two_ring.decomp").read_text()
    p = DecompositionProblem.parse(text)
    assert p.states == TWO_RING_PROBLEM.states and p.strict_prefs == TWO_RING_PROBLEM.strict_prefs


def test_single_preference_is_feasible_with_unit_margin():
    p = DecompositionProblem(["1", "2"], [(("1", "2"), ("1", "1"))])
    cert = verify_decomposability(p)
    assert cert.feasible and cert.margin >= 1.0
    assert check_assignment(p, cert.phi, cert.psi, margin=1.0)


def test_chain_that_composes_to_self_is_infeasible():
    # f(1,1) > f(2,1) and f(2,2) > f(1,2) give phi1 > phi2 > phi1
    p = DecompositionProblem(["1", "2"], [(("1", "1"), ("2", "1")), (("2", "2"), ("1", "2"))])
    cert = verify_decomposability(p)
    assert not cert.feasible and cert.chain == ["phi1 > phi2 > phi1"]


def test_self_preference_is_infeasible():
    p = DecompositionProblem(["1"], [(("1", "1"), ("1", "1"))])
    assert not verify_decomposability(p).feasible
    assert brute_force_decomposable(p) is None


def test_empty_preferences_are_feasible():
    assert verify_decomposability(DecompositionProblem(["a", "b"], [])).feasible


def test_lp_agrees_with_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    statuses = []
    for _ in range(200):
        p = random_problem(rng)
        cert = verify_decomposability(p)
        witness = brute_force_decomposable(p)
        assert cert.feasible == (witness is not None), p.dump()
        if cert.feasible:
            assert check_assignment(p, cert.phi, cert.psi, margin=1.0)
            assert check_assignment(p, witness["phi"], witness["psi"])
        else:
            assert weighted_sum(p, cert.multipliers) == {}
        statuses.append(cert.feasible)
    assert 0 < sum(statuses) < 200


@given(st.integers(0, 2**31))
def test_certificates_are_self_checking(seed):
    p = random_problem(np.random.default_rng(seed))
    cert = verify_decomposability(p)
    if cert.feasible:
        assert check_assignment(p, cert.phi, cert.psi, margin=1.0)
    else:
        assert cert.multipliers and all(w > 0 for w in cert.multipliers.values())
        assert weighted_sum(p, cert.multipliers) == {}


def test_simplex_small_lp_oracle():
    # max 3x + 2y  s.t. x + y <= 4, x + 3y <= 6, x <= 3 -> (3, 1), value 11
    x, value, duals = simplex_max([3, 2], [[1, 1], [1, 3], [1, 0]], [4, 6, 3])
    assert x == [3, 1] and value == 11
    assert duals == [Fraction(2), Fraction(0), Fraction(1)]
    with pytest.raises(ContractError):
        simplex_max([1], [[1]], [-1])
    with pytest.raises(ContractError):
        simplex_max([1], [[-1]], [1])


def test_problem_parse_dump_roundtrip():
    p = TWO_RING_PROBLEM
    back = DecompositionProblem.parse(p.dump())
    assert back.dump() == p.dump()
    for bad in ("prefer 1 2 > 1 1\n", "states 1 2\nprefer 1 2 1 1\n", "states 1\nprefer 1 2 > 1 1\n",
                "states 1 2\ntransition 1 1\nprefer 1 2 > 1 1\n", "states 1 1\n"):
        with pytest.raises(ContractError):
            DecompositionProblem.parse(bad)


def test_certificate_text_has_json_line():
    text = verify_decomposability(TWO_RING_PROBLEM).text()
    assert text.splitlines()[0] == "status: INFEASIBLE" and '"status": "INFEASIBLE"' in text


def test_exact_w1_examples():
    assert exact_w1_1d([0, 0], [1, 1]) == 1.0
    assert exact_w1_1d([0, 1, 2], [0, 1, 2]) == 0.0
    assert exact_w1_1d([0.0], [0.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert exact_w1_1d([0, 1], [0.5]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ContractError):
        exact_w1_1d([], [1.0])


@given(st.integers(0, 2**31), st.integers(1, 30), st.integers(1, 30), st.integers(1, 30))
def test_exact_w1_metric_properties(seed, n, m, k):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=n), rng.normal(size=m) + 1, rng.normal(size=k) * 2
    ab, ba = exact_w1_1d(a, b), exact_w1_1d(b, a)
    assert abs(ab - ba) <= 1e-9 and ab >= 0
    assert ab <= exact_w1_1d(a, c) + exact_w1_1d(c, b) + 1e-9
    shift = rng.normal()
    assert exact_w1_1d(a, a + shift) == pytest.approx(abs(shift), abs=1e-9)


@given(st.integers(0, 2**31), st.integers(1, 20))
def test_exact_w1_unequal_sizes_match_replication(seed, n):
    # repeating every sample r times leaves the distribution unchanged
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n + 1)
    assert exact_w1_1d(a, b) == pytest.approx(exact_w1_1d(np.repeat(a, n + 1), np.repeat(b, n)), abs=1e-9)


def test_exact_w1_shifted_gaussians():
    rng = np.random.default_rng(0)
    assert exact_w1_1d(rng.normal(1, 0.1, 100_000), rng.normal(0, 0.1, 100_000)) == pytest.approx(1.0, abs=0.02)


def test_evaluation_is_deterministic_and_uses_default_episodes():
    env = make_env("point-mass")
    rng_policy = lambda s: np.sin(17.0 * s)  # noqa: E731
    a, b = evaluate_policy(env, rng_policy, seed=3), evaluate_policy(env, rng_policy, seed=3)
    assert a == b and a.episodes == 20 and len(a.returns) == 20
    with pytest.raises(ContractError):
        evaluate_policy(env, rng_policy, episodes=0)
    with pytest.raises(ContractError):
        EvalReport(0.0, 0.0, 0.0, 0)


@pytest.mark.parametrize("env_id", ["two-ring", "point-mass", "u-maze"])
def test_expert_evaluates_as_successful(env_id):
    env = make_env(env_id)
    report = evaluate_policy(env, env.expert_action, episodes=10)
    assert report.success_rate >= 0.9
    if env_id == "two-ring":
        assert report.success_rate == 1.0 and report.mean_return == env.spec.horizon


def test_uniform_random_policy_rarely_solves_u_maze():
    env = make_env("u-maze")
    rng = np.random.default_rng(0)
    report = evaluate_policy(env, lambda s: rng.uniform(-1, 1, size=2), episodes=100)
    assert report.success_rate < 0.1


def test_report_text_and_dict():
    r = EvalReport(1.5, 0.25, 0.5, 4, [1.0, 2.0])
    assert r.to_dict() == {"mean_return": 1.5, "std_return": 0.25, "success_rate": 0.5, "episodes": 4}
    assert "success_rate 0.500" in r.text()
