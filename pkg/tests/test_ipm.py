import numpy as np

from efkit import ipm


def solve(P, q, G, h, **kw):
    return ipm.solve_qp(P, q, G, h, **kw)


def test_unconstrained_interior_minimum():
    # min x'x - 2x s.t. x <= 10 (slack): optimum at x = 1
    P = 2.0 * np.eye(2)
    q = np.array([-2.0, -2.0])
    G = np.eye(2)
    h = np.array([10.0, 10.0])
    res = solve(P, q, G, h)
    assert res.ok
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-7)


def test_active_bound():
    # min (x-3)^2 s.t. x <= 1: optimum pinned at the bound
    P = np.array([[2.0]])
    q = np.array([-6.0])
    G = np.array([[1.0]])
    h = np.array([1.0])
    res = solve(P, q, G, h)
    assert res.ok
    assert np.allclose(res.x, [1.0], atol=1e-7)
    # active constraint carries a positive multiplier
    assert res.z[0] > 1e-8


def test_equality_encoded_as_opposed_rows():
    # sum(x) == 1 via two inequalities; min x'Qx with distinct diagonal
    Q = np.diag([1.0, 2.0])
    q = np.zeros(2)
    G = np.vstack([np.ones(2), -np.ones(2), -np.eye(2)])
    h = np.array([1.0, -1.0, 0.0, 0.0])
    res = solve(2 * Q, q, G, h)
    assert res.ok
    # closed form: weights inversely proportional to diagonal
    assert np.allclose(res.x, [2 / 3, 1 / 3], atol=1e-6)


def test_singular_hessian_returns_usable_best_iterate():
    # one zero-variance direction: Q is rank 1, so the central path stalls
    # short of the 1e-9 default. The contract is that the best iterate comes
    # back anyway, good to ~1e-6, and the caller decides what is acceptable.
    Q = np.array([[1.0, 0.0], [0.0, 0.0]])
    q = np.zeros(2)
    G = np.vstack([np.ones(2), -np.ones(2), -np.eye(2)])
    h = np.array([1.0, -1.0, 0.0, 0.0])
    res = solve(2 * Q, q, G, h)
    assert np.allclose(res.x, [0.0, 1.0], atol=1e-5)
    assert max(res.primal_residual, res.dual_residual, res.gap) <= 1e-6


def test_linear_objective_lp_corner():
    # pure LP: max x0 + 0.5 x1 under the simplex: corner [1, 0]
    P = np.zeros((2, 2))
    q = np.array([-1.0, -0.5])
    G = np.vstack([np.ones(2), -np.ones(2), -np.eye(2)])
    h = np.array([1.0, -1.0, 0.0, 0.0])
    res = solve(P, q, G, h)
    assert res.ok
    assert np.allclose(res.x, [1.0, 0.0], atol=1e-6)


def test_reports_residuals():
    P = 2.0 * np.eye(2)
    q = np.array([-2.0, 0.0])
    G = np.eye(2)
    h = np.array([5.0, 5.0])
    res = solve(P, q, G, h)
    assert res.ok
    assert res.iterations > 0
    assert max(res.primal_residual, res.dual_residual, res.gap) <= 1e-6
