import numpy as np
import pytest

from efkit.canonical import CanonicalProblem, canonicalize
from efkit.problems import make_problem
from efkit.solver import (
    InfeasibleError,
    brute_force_oracle,
    build_constraints,
    check_feasible,
    kkt_residual_min_variance,
    max_attainable_total,
    solve_ef,
    solve_min_variance,
)
from conftest import random_feasible_problem


def reference_instance():
    return make_problem(
        returns=[0.04, 0.03, 0.02, 0.01],
        vols=[0.02, 0.03, 0.025, 0.015],
        corr=np.eye(4),
        x_max=[0.591, 0.749, 0.412, 0.545],
        x_min=0.0,
        classes=[0, 0, 1, 1],
        zeta_max=[0.74, 0.58],
        alpha_min=0.81,
        alpha_max=1.0,
        v_target=0.1,
    )


def test_constraint_rows_match_reference_instance():
    p = reference_instance()
    # the reference fields go in verbatim: build_constraints is a pure
    # function of the canonical fields, and this instance is printed unclamped
    cs = build_constraints(CanonicalProblem(problem=p, perm=np.arange(4)))
    A = np.zeros((12, 4))
    A[:4] = np.eye(4)
    A[4:8] = -np.eye(4)
    A[8] = -1
    A[9] = 1
    A[10] = [1, 1, 0, 0]
    A[11] = [0, 0, 1, 1]
    b = [0.591, 0.749, 0.412, 0.545, 0, 0, 0, 0, -0.81, 1.0, 0.74, 0.58]
    assert cs.A.shape == (12, 4)
    assert np.array_equal(cs.A, A)
    assert np.array_equal(cs.b, np.asarray(b, dtype=np.float64))


def test_row_count_without_classes():
    p = make_problem([0.02, 0.01], [0.05, 0.04], np.eye(2), x_max=[1, 1], alpha_min=1, alpha_max=1)
    cs = build_constraints(canonicalize(p))
    assert cs.A.shape == (6, 2)
    assert np.allclose(cs.b, [1, 1, 0, 0, -1, 1])


def test_identical_assets_split_evenly():
    corr = np.array([[1.0, 0.3], [0.3, 1.0]])
    p = make_problem(
        [0.01, 0.01], [0.05, 0.05], corr, x_max=[1, 1], alpha_min=1, alpha_max=1, v_target=1.0
    )
    x, _ = solve_min_variance(build_constraints(canonicalize(p)))
    assert np.allclose(x, [0.5, 0.5], atol=1e-7)


def test_riskless_asset_takes_everything():
    p = make_problem(
        [0.02, 0.01], [0.0, 1.0], np.eye(2), x_max=[1, 1], alpha_min=1, alpha_max=1, v_target=1.0
    )
    x, _ = solve_min_variance(build_constraints(canonicalize(p)))
    assert np.allclose(x, [1, 0], atol=1e-6)
    res = solve_ef(p)
    assert res.ok and np.allclose(res.allocation.x, [1, 0], atol=1e-6)


def test_generous_target_greedy_fill():
    p = make_problem(
        [0.05, 0.02, 0.01],
        [0.02, 0.02, 0.02],
        np.eye(3),
        x_max=[0.4, 0.4, 0.4],
        alpha_min=1,
        alpha_max=1,
        v_target=10.0,
    )
    res = solve_ef(p)
    assert res.ok and res.branch == "max_return"
    assert np.allclose(res.allocation.x, [0.4, 0.4, 0.2], atol=1e-6)


def test_tight_target_takes_min_variance_branch():
    p = make_problem(
        [0.05, 0.02], [0.05, 0.04], np.eye(2), x_max=[1, 1], alpha_min=1, alpha_max=1, v_target=0.001
    )
    res = solve_ef(p)
    assert res.ok and res.branch == "min_variance"


def test_infeasible_detected():
    caps = make_problem(
        [0.01, 0.02], [0.02, 0.02], np.eye(2), x_max=[0.3, 0.3], alpha_min=0.9, alpha_max=1
    )
    assert solve_ef(caps).status == "infeasible"
    classes = make_problem(
        [0.01, 0.02],
        [0.02, 0.02],
        np.eye(2),
        x_max=[0.9, 0.9],
        classes=[0, 0],
        zeta_max=[0.5],
        alpha_min=0.9,
        alpha_max=1,
    )
    assert solve_ef(classes).status == "infeasible"
    with pytest.raises(InfeasibleError):
        check_feasible(build_constraints(canonicalize(caps)))


def test_max_attainable_respects_class_caps():
    p = make_problem(
        [0.03, 0.02, 0.01],
        [0.1, 0.1, 0.1],
        np.eye(3),
        x_max=[0.5, 0.5, 0.4],
        classes=[0, 0, -1],
        zeta_max=[0.6],
    )
    cs = build_constraints(canonicalize(p))
    assert max_attainable_total(cs) == pytest.approx(0.6 + 0.4)


def test_kkt_and_oracle_parity_battery(rng):
    worst_kkt = 0.0
    worst_gap = 0.0
    branches = {"min_variance": 0, "max_return": 0}
    solved = 0
    trial = 0
    while solved < 12 and trial < 120:
        trial += 1
        p = random_feasible_problem(rng)
        res = solve_ef(p)
        if res.status == "infeasible":
            continue
        assert res.ok, f"{res.status} kkt={res.kkt_residual}"
        branches[res.branch] += 1
        worst_kkt = max(worst_kkt, res.kkt_residual)
        orc = brute_force_oracle(p, samples=40_000, seed=trial)
        if res.branch == "min_variance":
            gap = (res.allocation.achieved_vol**2 - orc.achieved_vol**2) * 1e4
        else:
            gap = orc.achieved_return - res.allocation.achieved_return
        worst_gap = max(worst_gap, gap)
        solved += 1
    assert solved == 12
    assert worst_kkt <= 1e-6
    assert worst_gap <= 1e-4
    assert branches["max_return"] > 0


def test_return_scaling_leaves_allocation_alone(rng):
    worst = 0.0
    done = 0
    while done < 6:
        n = int(rng.integers(2, 6))
        p = make_problem(
            rng.uniform(0.005, 0.06, n),
            rng.uniform(0.005, 0.05, n),
            np.eye(n),
            x_max=rng.uniform(0.3, 1.0, n),
            alpha_min=1,
            alpha_max=1,
            v_target=float(rng.uniform(0.01, 0.05)),
        )
        base = solve_ef(p)
        if not base.ok:
            continue
        done += 1
        for lam in (0.5, 2.0, 10.0):
            res = solve_ef(p.with_fields(returns=p.returns * lam))
            assert res.ok
            worst = max(worst, float(np.abs(res.allocation.x - base.allocation.x).max()))
    assert worst <= 1e-6


def test_achieved_return_monotone_in_v_target(rng):
    for _ in range(4):
        p = random_feasible_problem(rng, n=3)
        prev = -np.inf
        for vt in np.linspace(0.003, 0.08, 8):
            res = solve_ef(p.with_fields(v_target=float(vt)))
            if res.status == "infeasible":
                break
            if not res.ok:
                continue
            r = res.allocation.achieved_return
            assert r >= prev - 1e-9
            prev = max(prev, r)


def test_kkt_residual_small_at_reported_solution():
    p = reference_instance()
    cs = build_constraints(canonicalize(p))
    res = solve_ef(p)
    assert res.ok
    assert res.kkt_residual <= 1e-6


def test_solve_batch_preserves_order():
    from efkit.solver import solve_batch

    rng = np.random.default_rng(1)
    problems = [random_feasible_problem(rng, n=2) for _ in range(6)]
    single = [solve_ef(p) for p in problems]
    batch = solve_batch(problems, workers=1)
    for a, b in zip(single, batch):
        assert a.status == b.status
        if a.ok:
            assert np.allclose(a.allocation.x, b.allocation.x, atol=1e-12)
