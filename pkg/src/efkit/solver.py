"""Exact efficient-frontier solver.

Assembles the stacked inequality system for a canonical problem, minimizes
portfolio variance over it, and, when the minimum achievable variance fits
under the target budget, maximizes expected return subject to the additional
variance cone. The cone stage runs a bisection over the risk-aversion weight
of a QP scalarization

    maximize  R.x - lam * x'Qx   subject to  Ax <= b

whose achieved variance is monotone non-increasing in lam, finishing with a
convex-combination polish that lands the variance on the budget exactly.

Variance is scaled (covariance times ``scale``, target squared times
``scale``) inside this module only; allocations returned to callers carry
unscaled achieved volatility.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ipm
from .canonical import CanonicalProblem, canonicalize, restore_order
from .problems import DEFAULT_SCALE, Allocation, EfProblem, covariance, validate

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"

MIN_VARIANCE = "min_variance"
MAX_RETURN = "max_return"

# scaled KKT residual bound for a result to count as optimal
KKT_TOL = 1e-6
# slack for the analytic feasibility pre-checks
FEAS_SLACK = 1e-10
# the lam bracket is collapsed until the bracketing points are this close
_BRACKET_TOL = 1e-7


class SolverError(RuntimeError):
    """Base class for solver failures."""


class InfeasibleError(SolverError):
    """The constraint system admits no point."""


class NumericalFailureError(SolverError):
    """An interior-point run hit its iteration cap without converging."""


@dataclass(frozen=True)
class ConstraintSystem:
    """Stacked inequality system Ax <= b plus the scaled quadratic data.

    Row layout, w = 2n + 2 + m: n per-asset upper bounds against x_max, n
    negated per-asset rows against -x_min, one all-minus-ones row against
    -alpha_min, one all-ones row against alpha_max, then one indicator row
    per asset class against its cap.
    """

    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    v_t: float

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0] - 2 * self.n - 2

    @property
    def x_max(self) -> np.ndarray:
        return self.b[: self.n]

    @property
    def x_min(self) -> np.ndarray:
        return -self.b[self.n : 2 * self.n]

    @property
    def alpha_min(self) -> float:
        return -float(self.b[2 * self.n])

    @property
    def alpha_max(self) -> float:
        return float(self.b[2 * self.n + 1])

    @property
    def class_rows(self) -> np.ndarray:
        return self.A[2 * self.n + 2 :]

    @property
    def zeta_max(self) -> np.ndarray:
        return self.b[2 * self.n + 2 :]


@dataclass(frozen=True)
class SolverResult:
    allocation: Optional[Allocation]
    branch: Optional[str]
    qp_iterations: int
    socp_iterations: int
    kkt_residual: float
    status: str

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def build_constraints(canonical: CanonicalProblem, scale: float = DEFAULT_SCALE) -> ConstraintSystem:
    """Assemble A, b, the scaled covariance, and the scaled variance target."""
    p = canonical.problem
    n, m = p.n, p.n_classes
    A = np.zeros((2 * n + 2 + m, n))
    A[:n] = np.eye(n)
    A[n : 2 * n] = -np.eye(n)
    A[2 * n] = -1.0
    A[2 * n + 1] = 1.0
    for j in range(m):
        A[2 * n + 2 + j] = (p.classes == j).astype(np.float64)
    b = np.concatenate([p.x_max, -p.x_min, [-p.alpha_min, p.alpha_max], p.zeta_max])
    Q = covariance(p.vols, p.corr, scale=scale)
    v_t = float(p.v_target**2 * scale)
    return ConstraintSystem(A=A, b=b, Q=Q, v_t=v_t)


def max_attainable_total(cs: ConstraintSystem) -> float:
    """Largest total allocation the box and class caps allow."""
    hi = cs.x_max
    rows = cs.class_rows
    classed = np.zeros(cs.n, dtype=bool)
    total = 0.0
    for j in range(cs.m):
        members = rows[j] > 0.0
        classed |= members
        total += min(float(cs.zeta_max[j]), float(np.sum(hi[members])))
    total += float(np.sum(hi[~classed]))
    return total


def check_feasible(cs: ConstraintSystem) -> None:
    """Exact feasibility decision for the box/band/class-cap polytope.

    Classes partition a subset of the assets, so the polytope is nonempty
    iff the floors fit under every cap and the caps can reach alpha_min;
    no interior-point phase is needed for this geometry.
    """
    lo = cs.x_min
    if float(np.sum(lo)) > cs.alpha_max + FEAS_SLACK:
        raise InfeasibleError("lower bounds alone exceed alpha_max")
    for j in range(cs.m):
        members = cs.class_rows[j] > 0.0
        if float(np.sum(lo[members])) > float(cs.zeta_max[j]) + FEAS_SLACK:
            raise InfeasibleError(f"lower bounds of class {j} exceed its cap")
    if max_attainable_total(cs) < cs.alpha_min - FEAS_SLACK:
        raise InfeasibleError("caps cannot reach alpha_min")


def _clip_box(cs: ConstraintSystem, x: np.ndarray) -> np.ndarray:
    # replicate the reference post-solve clip exactly
    return np.minimum(np.maximum(x, cs.x_min), cs.x_max)


def _variance(cs: ConstraintSystem, x: np.ndarray) -> float:
    return float(x @ cs.Q @ x)


def _kkt_parts(cs: ConstraintSystem, x: np.ndarray, z: np.ndarray, grad: np.ndarray, grad_scale: float):
    slack = cs.b - cs.A @ x
    stat = float(np.abs(grad + cs.A.T @ z).max()) / grad_scale
    prim = max(0.0, -float(slack.min())) / (1.0 + float(np.abs(cs.b).max()))
    comp = float(np.abs(z * slack).max()) / grad_scale
    return max(stat, prim, comp)


def kkt_residual_min_variance(cs: ConstraintSystem, x: np.ndarray, z: np.ndarray) -> float:
    """Scaled KKT residual of the variance stage (objective 0.5 x'Qx)."""
    qx = cs.Q @ x
    return _kkt_parts(cs, x, z, qx, 1.0 + float(np.abs(qx).max()))


def kkt_residual_max_return(
    cs: ConstraintSystem, R: np.ndarray, x: np.ndarray, z: np.ndarray, lam: float
) -> float:
    """Scaled KKT residual of the cone stage under its scalarization.

    The cone multiplier equals the risk-aversion weight lam; cone
    complementarity lam * (x'Qx - v_t) is included in the residual.
    """
    qx = cs.Q @ x
    grad = 2.0 * lam * qx - R
    scale = 1.0 + float(np.abs(R).max()) + 2.0 * lam * float(np.abs(qx).max())
    poly = _kkt_parts(cs, x, z, grad, scale)
    cone_gap = _variance(cs, x) - cs.v_t
    cone_prim = max(0.0, cone_gap) / (1.0 + cs.v_t)
    cone_comp = abs(lam * cone_gap) / (1.0 + cs.v_t)
    return max(poly, cone_prim, cone_comp)


def _min_variance_full(cs: ConstraintSystem, tol: float) -> ipm.IpmResult:
    check_feasible(cs)
    res = ipm.solve_qp(cs.Q, np.zeros(cs.n), cs.A, cs.b, tol=tol)
    if not res.ok:
        # a stalled path can still park on an acceptable iterate; degenerate
        # instances (equality budget, rank-deficient Q) often do
        if kkt_residual_min_variance(cs, res.x, res.z) > KKT_TOL:
            raise NumericalFailureError("variance stage hit the iteration cap")
    return res


def solve_min_variance(cs: ConstraintSystem, tol: float = ipm.DEFAULT_TOL):
    """Minimize 0.5 x'Qx over Ax <= b. Returns (x, iterations)."""
    res = _min_variance_full(cs, tol)
    return _clip_box(cs, res.x), res.iterations


def _max_return_full(cs: ConstraintSystem, R: np.ndarray, tol: float):
    """Bisect the risk-aversion weight until the variance budget binds.

    Returns (x, iterations, lam, z). Caller guarantees the minimum-variance
    point satisfies the cone, so a feasible-side bracket always exists.
    """
    R = np.asarray(R, dtype=np.float64)
    # positive rescaling of R leaves the argmax unchanged; normalizing here
    # pins the numeric path so scaled inputs reproduce the same allocation
    r_norm = float(np.abs(R).max(initial=0.0))
    if r_norm > 0.0:
        R = R / r_norm
    else:
        r_norm = 1.0
    n = cs.n
    iters = 0

    def scalarized(lam):
        nonlocal iters
        res = ipm.solve_qp(2.0 * lam * cs.Q, -R, cs.A, cs.b, tol=tol)
        if not res.ok:
            qx = cs.Q @ res.x
            grad = 2.0 * lam * qx - R
            scale = 1.0 + float(np.abs(R).max()) + 2.0 * lam * float(np.abs(qx).max())
            if _kkt_parts(cs, res.x, res.z, grad, scale) > KKT_TOL:
                raise NumericalFailureError("cone stage hit the iteration cap")
        iters += res.iterations
        return res

    lp = scalarized(0.0)
    var_lp = _variance(cs, lp.x)
    if var_lp <= cs.v_t:
        # the pure return maximizer already satisfies the cone
        return lp.x, iters, 0.0, lp.z * r_norm

    lam_lo, f_lo, x_lo = 0.0, var_lp - cs.v_t, lp.x
    lam = (1.0 + float(np.abs(R).max())) / (1.0 + 2.0 * float(np.abs(cs.Q @ lp.x).max()))
    hi = None
    for _ in range(64):
        res = scalarized(lam)
        f = _variance(cs, res.x) - cs.v_t
        if f <= 0.0:
            hi = (lam, f, res)
            break
        lam_lo, f_lo, x_lo = lam, f, res.x
        lam *= 4.0
    if hi is None:
        raise NumericalFailureError("risk-aversion bracket did not close")
    lam_hi, f_hi, res_hi = hi

    # Illinois variant of regula falsi on f(lam) = variance - v_t
    stale = 0
    f_lo_w = f_lo
    for _ in range(60):
        if float(np.abs(res_hi.x - x_lo).max()) <= _BRACKET_TOL * (1.0 + float(np.abs(res_hi.x).max())):
            break
        if -f_hi <= 1e-10 * (1.0 + cs.v_t):
            break
        denom = f_hi - f_lo_w
        lam_new = (lam_lo * f_hi - lam_hi * f_lo_w) / denom if denom != 0.0 else 0.5 * (lam_lo + lam_hi)
        if not (lam_lo < lam_new < lam_hi):
            lam_new = 0.5 * (lam_lo + lam_hi)
        res = scalarized(lam_new)
        f = _variance(cs, res.x) - cs.v_t
        if f > 0.0:
            lam_lo, f_lo, x_lo = lam_new, f, res.x
            f_lo_w = f
            stale = 0
        else:
            lam_hi, f_hi, res_hi = lam_new, f, res
            stale += 1
            if stale >= 2:
                f_lo_w *= 0.5  # Illinois halving keeps the bracket moving

    # polish: mix toward the infeasible-side point to land variance on v_t
    x_hi = res_hi.x
    d = x_lo - x_hi
    a = float(d @ cs.Q @ d)
    bq = 2.0 * float(x_hi @ cs.Q @ d)
    cq = _variance(cs, x_hi) - cs.v_t  # <= 0
    theta = 0.0
    if cq < 0.0:
        if a > 0.0:
            disc = bq * bq - 4.0 * a * cq
            theta = (-bq + float(np.sqrt(max(disc, 0.0)))) / (2.0 * a)
        elif bq > 0.0:
            theta = -cq / bq
        theta = min(max(theta, 0.0), 1.0)
    x = x_hi + theta * d
    # undo the normalization so duals match the caller's unscaled objective
    return x, iters, lam_hi * r_norm, res_hi.z * r_norm


def solve_max_return(cs: ConstraintSystem, R: np.ndarray, tol: float = ipm.DEFAULT_TOL):
    """Maximize R.x over Ax <= b and x'Qx <= v_t. Returns (x, iterations)."""
    x, iters, _lam, _z = _max_return_full(cs, R, tol)
    return _clip_box(cs, x), iters


def solve_ef(
    problem: EfProblem,
    tol: float = ipm.DEFAULT_TOL,
    scale: float = DEFAULT_SCALE,
) -> SolverResult:
    """Two-stage frontier solve in the caller's asset order.

    Canonicalizes, minimizes variance, and gates on the variance budget:
    when even the minimum-variance point exceeds the target the result is
    that point (branch min_variance); otherwise the return maximizer under
    the cone (branch max_return).
    """
    report = validate(problem)
    if not report.ok:
        raise ValueError("invalid problem: " + "; ".join(v.message for v in report.violations))
    canonical = canonicalize(problem)
    cs = build_constraints(canonical, scale=scale)
    try:
        check_feasible(cs)
    except InfeasibleError:
        return SolverResult(None, None, 0, 0, float("inf"), INFEASIBLE)

    try:
        qp = _min_variance_full(cs, tol)
        x_psi = _clip_box(cs, qp.x)
        if _variance(cs, x_psi) > cs.v_t:
            branch = MIN_VARIANCE
            x_c = x_psi
            socp_iters = 0
            kkt = kkt_residual_min_variance(cs, x_c, qp.z)
        else:
            R_c = canonical.problem.returns
            x_phi, socp_iters, lam, z = _max_return_full(cs, R_c, tol)
            branch = MAX_RETURN
            x_c = _clip_box(cs, x_phi)
            kkt = kkt_residual_max_return(cs, R_c, x_c, z, lam)
    except NumericalFailureError:
        return SolverResult(None, None, 0, 0, float("inf"), NUMERICAL_FAILURE)

    x = restore_order(x_c, canonical.perm)
    alloc = Allocation.from_weights(problem, x)
    status = OPTIMAL if kkt <= KKT_TOL else NUMERICAL_FAILURE
    return SolverResult(alloc, branch, qp.iterations, socp_iters, kkt, status)


def _solve_one(args):
    problem, tol, scale = args
    return solve_ef(problem, tol=tol, scale=scale)


def solve_batch(
    problems: Sequence[EfProblem],
    workers: Optional[int] = None,
    tol: float = ipm.DEFAULT_TOL,
    scale: float = DEFAULT_SCALE,
):
    """Solve k problems, preserving order; workers defaults to the CPU count."""
    items = [(p, tol, scale) for p in problems]
    if workers is None:
        workers = multiprocessing.cpu_count()
    if not items:
        return []
    chunk = max(1, len(items) // (4 * workers))
    with multiprocessing.Pool(workers) as pool:
        return list(pool.imap(_solve_one, items, chunksize=chunk))


# ---------------------------------------------------------------------------
# independent oracle


def _feasible_pool(cs: ConstraintSystem, count: int, rng) -> np.ndarray:
    """Sample feasible points by randomized greedy fills with floor reserves.

    Each sample walks the assets in a random order, granting a random share
    of the headroom that the remaining budget, the asset's class cap, and
    the floors still owed to later assets allow; a second deterministic walk
    tops up whatever the random fractions left unplaced. Feasibility of the
    instance makes every fill land inside the polytope with its total on
    the sampled target.
    """
    n, m = cs.n, cs.m
    lo, hi = cs.x_min, cs.x_max
    lo_total = float(np.sum(lo))
    t_hi = min(cs.alpha_max, max_attainable_total(cs))
    t_lo = min(max(cs.alpha_min, lo_total), t_hi)
    targets = rng.uniform(t_lo, t_hi, count)

    class_of = np.full(n, -1)
    for j in range(m):
        class_of[cs.class_rows[j] > 0.0] = j

    X = np.tile(lo, (count, 1))
    budget = targets - lo_total  # mass to distribute above the floors
    zeta_room = np.empty((count, max(m, 1)))
    for j in range(m):
        members = class_of == j
        zeta_room[:, j] = float(cs.zeta_max[j]) - float(np.sum(lo[members]))
    orders = np.argsort(rng.random((count, n)), axis=1)
    rows = np.arange(count)
    for sweep in range(2):
        frac = rng.random((count, n)) if sweep == 0 else None
        for step in range(n):
            i = orders[:, step]
            room = hi[i] - X[rows, i]
            ci = class_of[i]
            classed = ci >= 0
            room = np.where(classed, np.minimum(room, zeta_room[rows, np.maximum(ci, 0)]), room)
            grant = np.minimum(room, budget)
            if frac is not None:
                grant = grant * frac[rows, i]
            grant = np.maximum(grant, 0.0)
            X[rows, i] += grant
            budget -= grant
            zeta_room[rows[classed], ci[classed]] -= grant[classed]
    return X


def _line_interval(X, d, cs, cone, v_t):
    """Feasible step range [t_lo, t_hi] along d from each row of X."""
    count = X.shape[0]
    t_lo = np.full(count, -np.inf)
    t_hi = np.full(count, np.inf)
    for i in range(cs.n):
        if d[i] > 0.0:
            t_hi = np.minimum(t_hi, (cs.x_max[i] - X[:, i]) / d[i])
            t_lo = np.maximum(t_lo, (cs.x_min[i] - X[:, i]) / d[i])
        elif d[i] < 0.0:
            t_lo = np.maximum(t_lo, (cs.x_max[i] - X[:, i]) / d[i])
            t_hi = np.minimum(t_hi, (cs.x_min[i] - X[:, i]) / d[i])
    sig = float(np.sum(d))
    tot = X.sum(axis=1)
    if sig > 0.0:
        t_hi = np.minimum(t_hi, (cs.alpha_max - tot) / sig)
        t_lo = np.maximum(t_lo, (cs.alpha_min - tot) / sig)
    elif sig < 0.0:
        t_lo = np.maximum(t_lo, (cs.alpha_max - tot) / sig)
        t_hi = np.minimum(t_hi, (cs.alpha_min - tot) / sig)
    for j in range(cs.m):
        row = cs.class_rows[j]
        cj = float(row @ d)
        sj = X @ row
        if cj > 0.0:
            t_hi = np.minimum(t_hi, (cs.zeta_max[j] - sj) / cj)
        elif cj < 0.0:
            t_lo = np.maximum(t_lo, (cs.zeta_max[j] - sj) / cj)
    if cone:
        qd = cs.Q @ d
        a = float(d @ qd)
        b = 2.0 * (X @ qd)
        c = np.einsum("ij,jk,ik->i", X, cs.Q, X) - v_t
        if a > 1e-300:
            disc = np.maximum(b * b - 4.0 * a * c, 0.0)
            root = np.sqrt(disc)
            t_lo = np.maximum(t_lo, (-b - root) / (2.0 * a))
            t_hi = np.minimum(t_hi, (-b + root) / (2.0 * a))
        else:
            pos = b > 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                lim = -c / b
            t_hi = np.where(pos, np.minimum(t_hi, lim), t_hi)
            t_lo = np.where(b < 0.0, np.maximum(t_lo, lim), t_lo)
    return t_lo, t_hi


def _refine(X, cs, R, mode, rng, passes=240):
    """Exact line searches along coordinate, pairwise, and random directions."""
    n = cs.n
    dirs = [np.eye(n)[i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            d = np.zeros(n)
            d[i], d[j] = 1.0, -1.0
            dirs.append(d)
    cone = mode == "return"
    prev = None
    for _ in range(passes):
        extra = [v / np.linalg.norm(v) for v in rng.normal(size=(6, n))] if n > 1 else []
        moved = 0.0
        for d in dirs + extra:
            t_lo, t_hi = _line_interval(X, d, cs, cone, cs.v_t)
            bad = t_lo > t_hi
            if mode == "variance":
                qd = cs.Q @ d
                a = float(d @ qd)
                if a <= 0.0:
                    continue
                t = -(X @ qd) / a
                t = np.clip(t, t_lo, t_hi)
            else:
                rd = float(R @ d)
                if rd == 0.0:
                    continue
                t = t_hi if rd > 0.0 else t_lo
            t = np.where(bad | ~np.isfinite(t), 0.0, t)
            X = X + t[:, None] * d
            moved = max(moved, float(np.abs(t).max(initial=0.0)))
        if prev is not None and moved <= 1e-13 * (1.0 + prev):
            break
        prev = moved
    return X


def brute_force_oracle(
    problem: EfProblem,
    samples: int = 200_000,
    seed: int = 0,
    scale: float = DEFAULT_SCALE,
) -> Allocation:
    """Best allocation found by dense sampling plus local refinement.

    Evaluates the two-stage objective directly: minimum variance decides the
    gate, then return is maximized inside the variance cone when the gate
    allows. Intended for small n as an independent check on the solver;
    callers compare objectives, not weight vectors.
    """
    rng = np.random.default_rng(seed)
    canonical = canonicalize(problem)
    cs = build_constraints(canonical, scale=scale)
    check_feasible(cs)

    pool = _feasible_pool(cs, samples, rng)
    var = np.einsum("ij,jk,ik->i", pool, cs.Q, pool)

    k = min(16, pool.shape[0])
    starts = pool[np.argsort(var)[:k]]
    refined = _refine(starts, cs, None, "variance", rng)
    rvar = np.einsum("ij,jk,ik->i", refined, cs.Q, refined)
    best_var = float(rvar.min())
    x_psi = refined[int(rvar.argmin())]

    if best_var > cs.v_t:
        x_best = x_psi
    else:
        R = canonical.problem.returns
        ret = pool @ R
        order = np.argsort(-ret)
        cands = [x_psi]
        for idx in order[: 4 * k]:
            x = pool[idx]
            v = float(var[idx])
            if v > cs.v_t:
                # pull toward the minimum-variance point until inside the cone
                d = x - x_psi
                a = float(d @ cs.Q @ d)
                b = 2.0 * float(x_psi @ cs.Q @ d)
                c = float(x_psi @ cs.Q @ x_psi) - cs.v_t
                if a <= 0.0:
                    continue
                disc = max(b * b - 4.0 * a * c, 0.0)
                theta = (-b + float(np.sqrt(disc))) / (2.0 * a)
                theta = min(max(theta, 0.0), 1.0)
                x = x_psi + theta * d
            cands.append(x)
            if len(cands) >= k:
                break
        starts = np.array(cands)
        refined = _refine(starts, cs, R, "return", rng)
        rret = refined @ R
        x_best = refined[int(rret.argmax())]

    x = restore_order(np.minimum(np.maximum(x_best, cs.x_min), cs.x_max), canonical.perm)
    return Allocation.from_weights(problem, x)
