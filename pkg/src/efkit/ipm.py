"""Dense Mehrotra predictor-corrector interior-point method.

Solves inequality-constrained convex QPs

    minimize    0.5 x'Px + q'x
    subject to  Gx <= h

The KKT system solved at each iteration (s = slack, z = dual):

    P dx + G' dz = -r_d        r_d = Px + q + G'z
    G dx + ds    = -r_p        r_p = Gx + s - h
    z.ds + s.dz  = -r_sz       r_sz = s.z            (affine pass)
                               r_sz = s.z - sigma*mu + ds_a.dz_a  (corrector)

Eliminating only ds gives the symmetric quasi-definite augmented system

    [ P   G' ] [dx]   [ -r_d            ]
    [ G  -S/Z ] [dz] = [ -r_p + r_sz / z ]

solved by LU with partial pivoting. The augmented form is preferred over
normal equations because a degenerate instance (duplicated or opposed active
rows, e.g. an equality budget written as two inequalities) drives some
slacks to zero with order-one duals; there s/z stays bounded while the
normal-equations weight z/s overflows. Problem sizes here are tiny
(n <= 12, w <= 40ish), so the larger factorization costs nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = "optimal"
NUMERICAL_FAILURE = "numerical_failure"

DEFAULT_TOL = 1e-9
MAX_ITER = 100
# Fraction of the distance to the boundary taken each step.
STEP_SHRINK = 0.99


@dataclass
class IpmResult:
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _solve_kkt(P, G, d, rhs, reg_base: float):
    """Solve the augmented system for the stacked [dx; dz]; None if hopeless.

    d holds the (2,2) block diagonal s/z. Escalating regularization bumps the
    primal block by +reg and the dual block by -reg, preserving quasi
    definiteness.
    """
    n = P.shape[0]
    w = d.size
    k = np.zeros((n + w, n + w))
    k[:n, :n] = P
    k[:n, n:] = G.T
    k[n:, :n] = G
    k[n:, n:] = -np.diag(d)
    if not np.isfinite(k).all() or not np.isfinite(rhs).all():
        return None
    reg = 0.0
    for _ in range(8):
        if reg:
            k[:n, :n] = P + reg * np.eye(n)
            k[n:, n:] = -np.diag(d + reg)
        try:
            sol = np.linalg.solve(k, rhs)
        except np.linalg.LinAlgError:
            reg = reg_base if reg == 0.0 else reg * 100.0
            continue
        if np.isfinite(sol).all():
            return sol
        reg = reg_base if reg == 0.0 else reg * 100.0
    return None


def solve_qp(
    P: np.ndarray,
    q: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITER,
) -> IpmResult:
    """Run the predictor-corrector iteration to scaled tolerance ``tol``.

    Convergence requires all three of (scaled) primal residual, dual residual
    and complementarity gap below tol. The caller is responsible for ensuring
    the problem is feasible; an infeasible instance surfaces as
    NUMERICAL_FAILURE at the iteration cap.
    """
    P = np.asarray(P, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = q.size
    w = h.size

    x = np.zeros(n)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(w)

    h_scale = 1.0 + float(np.abs(h).max(initial=0.0))
    reg_base = 1e-12 * (1.0 + float(np.trace(P)) / max(n, 1))

    status = NUMERICAL_FAILURE
    it = 0
    rel_p = rel_d = rel_gap = np.inf
    best = None
    best_score = np.inf
    for it in range(1, max_iter + 1):
        px = P @ x
        r_d = px + q + G.T @ z
        r_p = G @ x + s - h
        mu = float(s @ z) / w

        d_scale = 1.0 + float(np.abs(px).max(initial=0.0)) + float(np.abs(q).max(initial=0.0))
        obj = 0.5 * float(x @ px) + float(q @ x)
        rel_p = float(np.abs(r_p).max()) / h_scale
        rel_d = float(np.abs(r_d).max()) / d_scale
        rel_gap = mu / (1.0 + abs(obj))
        score = max(rel_p, rel_d, rel_gap)
        if score < best_score:
            best_score = score
            best = (x.copy(), z.copy(), s.copy(), rel_p, rel_d, rel_gap)
        if rel_p < tol and rel_d < tol and rel_gap < tol:
            status = OPTIMAL
            break

        d_block = s / z

        def newton(r_sz):
            rhs = np.concatenate([-r_d, -r_p + r_sz / z])
            sol = _solve_kkt(P, G, d_block, rhs, reg_base)
            if sol is None:
                return None
            dx = sol[:n]
            dz = sol[n:]
            ds = -r_p - G @ dx
            return dx, ds, dz

        aff = newton(s * z)
        if aff is None:
            break
        dx_a, ds_a, dz_a = aff

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        alpha_aff = min(max_step(s, ds_a), max_step(z, dz_a))
        mu_aff = float((s + alpha_aff * ds_a) @ (z + alpha_aff * dz_a)) / w
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        corr = newton(s * z - sigma * mu + ds_a * dz_a)
        if corr is None:
            break
        dx, ds, dz = corr

        alpha_p = STEP_SHRINK * max_step(s, ds)
        alpha_d = STEP_SHRINK * max_step(z, dz)
        x = x + alpha_p * dx
        s = s + alpha_p * ds
        z = z + alpha_d * dz

    if status != OPTIMAL and best is not None:
        # hand back the cleanest iterate seen, not wherever the path stalled
        x, z, s, rel_p, rel_d, rel_gap = best
    return IpmResult(
        x=x,
        z=z,
        s=s,
        status=status,
        iterations=it,
        primal_residual=rel_p,
        dual_residual=rel_d,
        gap=rel_gap,
    )
