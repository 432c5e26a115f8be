"""Dynamic greedy allocation rebalancing: box + total-allocation projection.

Projects an arbitrary weight vector into the per-asset box [x_min, x_max] and
the total-allocation band [alpha_min, alpha_max] in O(n log n): one sort plus
prefix scans. The pipeline is

    clip_bounds -> target_total -> priority_order -> cap_excess -> inflate_deficit

Guarantees: the box holds unconditionally; the total lands in
[alpha_min, alpha_max] whenever sum(x_min) <= alpha_max and
sum(x_max) >= alpha_min. Class caps and any variance budget are explicitly
NOT repaired here. The composed ``dgar`` is exactly idempotent, including at
float precision (an ulp-level repair step pins the float total inside the
band so a second pass takes the identity branches bitwise). One carve-out:
when the floors or caps exhaust a band edge to within float-summation noise,
no in-box vector may sum inside the band at all; the projection then snaps to
the exact floors (caps), matching the edge to machine precision instead.

``dgar_with_vjp`` exposes the same forward together with a hand-written
vector-Jacobian product for use inside training loops; subgradients at kinks
are resolved deterministically (the first argument of each min/max wins
ties), and the ulp repair is treated as the identity it is in exact
arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import EfProblem

_REPAIR_ROUNDS = 6


@dataclass(frozen=True)
class DgarConstraints:
    """Box bounds plus the total-allocation band."""

    x_min: np.ndarray
    x_max: np.ndarray
    alpha_min: float
    alpha_max: float

    def __post_init__(self):
        object.__setattr__(self, "x_min", np.asarray(self.x_min, dtype=np.float64))
        object.__setattr__(self, "x_max", np.asarray(self.x_max, dtype=np.float64))
        object.__setattr__(self, "alpha_min", float(self.alpha_min))
        object.__setattr__(self, "alpha_max", float(self.alpha_max))

    @classmethod
    def from_problem(cls, problem: EfProblem) -> "DgarConstraints":
        return cls(
            x_min=problem.x_min,
            x_max=problem.x_max,
            alpha_min=problem.alpha_min,
            alpha_max=problem.alpha_max,
        )

    @property
    def n(self) -> int:
        return self.x_min.size


def _check_nan(x: np.ndarray, c: DgarConstraints):
    if np.isnan(x).any() or np.isnan(c.x_min).any() or np.isnan(c.x_max).any() \
            or np.isnan(c.alpha_min) or np.isnan(c.alpha_max):
        raise ValueError("NaN input: this is a projection, not a sanitizer")


def clip_bounds(x: np.ndarray, c: DgarConstraints) -> np.ndarray:
    """Elementwise projection onto the box."""
    return np.minimum(np.maximum(x, c.x_min), c.x_max)


def target_total(x_clipped: np.ndarray, c: DgarConstraints) -> float:
    """Total allocation to aim for: the clamped sum of the clipped weights."""
    return float(min(max(float(np.sum(x_clipped)), c.alpha_min), c.alpha_max))


def priority_order(x: np.ndarray) -> np.ndarray:
    """Indices by descending weight; ties broken by ascending original index."""
    return np.argsort(-np.asarray(x), kind="stable")


def _cap_excess_ordered(u, lo_k, alpha_max):
    """Reserve-aware greedy reduction, all arrays already in priority order.

    Walking the priority order, each asset keeps as much of its weight as the
    remaining budget allows once the floors that later assets must retain are
    reserved: x''_k = clamp(alpha_max - taken - later_floors, lo_k, u_k).
    Closed form via prefix sums: with U = cumsum(u) and B_k = alpha_max -
    (floors strictly after k), the running total is S_k = U_k +
    min(0, cummin(B - U)) and x'' = diff(S). With all-zero floors this is
    exactly the plain greedy walk.
    """
    upper = np.cumsum(u)
    floors = np.cumsum(lo_k)
    budget = alpha_max - (floors[-1] - floors)  # alpha_max minus floors strictly after k
    slack = np.minimum(0.0, np.minimum.accumulate(budget - upper))
    running = upper + slack
    out = np.diff(running, prepend=0.0)
    # The closed form respects [lo, u] whenever sum(lo) <= alpha_max; the clip
    # keeps the box unconditional outside that regime.
    return np.minimum(np.maximum(out, lo_k), u)


def cap_excess(x_clipped: np.ndarray, order: np.ndarray, c: DgarConstraints) -> np.ndarray:
    """Reduce weights in priority order until the total fits under alpha_max."""
    x_clipped = np.asarray(x_clipped, dtype=np.float64)
    if float(np.sum(x_clipped)) <= c.alpha_max:
        return x_clipped.copy()
    if float(np.sum(c.x_min)) >= c.alpha_max:
        # budget exhausted by the floors alone: every asset lands exactly there
        return np.minimum(c.x_min, x_clipped)
    out_k = _cap_excess_ordered(x_clipped[order], c.x_min[order], c.alpha_max)
    out = np.empty_like(out_k)
    out[order] = out_k
    return out


def _inflate_ordered(v, hi_k, deficit):
    """Greedy top-up in priority order; returns the per-asset additions."""
    headroom = np.minimum(hi_k - v, deficit)
    taken = np.cumsum(headroom)
    overshoot = np.maximum(0.0, taken - deficit)
    return np.maximum(0.0, headroom - overshoot)


def inflate_deficit(
    x_capped: np.ndarray,
    order: np.ndarray,
    alpha_target: float,
    c: DgarConstraints,
) -> np.ndarray:
    """Raise weights toward their caps, priority first, to reach alpha_target.

    Active only when the running total sits below alpha_min; adds exactly the
    deficit when enough cap headroom exists, else saturates at x_max.
    """
    x_capped = np.asarray(x_capped, dtype=np.float64)
    total = float(np.sum(x_capped))
    if total >= c.alpha_min:
        return x_capped.copy()
    if float(np.sum(c.x_max)) <= c.alpha_min:
        # even full caps cannot reach alpha_min: saturate exactly
        return np.maximum(x_capped, c.x_max)
    add_k = _inflate_ordered(x_capped[order], c.x_max[order], alpha_target - total)
    out = x_capped.copy()
    out[order] = np.minimum(x_capped[order] + add_k, c.x_max[order])
    return out


def _land_total(y, j, lo_j, hi_j, amin, amax):
    """Move y[j] inside [lo_j, hi_j] until float(np.sum(y)) lies in the band.

    np.sum as a function of y[j] is a nondecreasing step function whose steps
    are at most one ulp of the total, so bisection cannot jump over the band;
    it either lands or runs out of room at the asset's bound.
    """
    t = float(np.sum(y))
    if amin <= t <= amax:
        return True
    orig = float(y[j])
    if t < amin:
        probe = min(hi_j, orig + 2.0 * (amin - t))
    else:
        probe = max(lo_j, orig - 2.0 * (t - amax))
    if probe == orig:
        return False
    y[j] = probe
    t2 = float(np.sum(y))
    if amin <= t2 <= amax:
        return True
    if (t < amin) == (t2 < amin):
        # hit the asset's bound while still outside: keep progress, try next
        return False
    # bracket [value giving t < amin, value giving t > amax] and bisect
    lo_v, hi_v = (orig, probe) if t < amin else (probe, orig)
    for _ in range(80):
        mid = 0.5 * (lo_v + hi_v)
        if mid <= lo_v or mid >= hi_v:
            break
        y[j] = mid
        tm = float(np.sum(y))
        if tm < amin:
            lo_v = mid
        elif tm > amax:
            hi_v = mid
        else:
            return True
    y[j] = orig
    return False


def _park_below(y, j, lo_j, hi_j, amax):
    """Set y[j] to the largest in-box value keeping float(np.sum(y)) <= amax.

    Used when the band itself is unreachable on the summation grid; the
    resulting vector reproduces itself bitwise on a rerun because the parked
    value depends only on the other (then unchanged) entries.
    """
    orig = float(y[j])

    def f(v):
        y[j] = v
        return float(np.sum(y))

    if f(hi_j) <= amax:
        return
    if f(lo_j) > amax:
        y[j] = orig
        return
    a, b = lo_j, hi_j  # f(a) <= amax < f(b)
    for _ in range(100):
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        if f(m) <= amax:
            a = m
        else:
            b = m
    y[j] = a


def _repair_total(y, order, c):
    """Pin the float sum of y inside [alpha_min, alpha_max] by ulp nudges.

    The closed-form scans land the exact-arithmetic total inside the band,
    but float summation can sit a few ulp outside it. Adjusting the asset the
    exact walk would have touched last (reduction: lowest surviving priority;
    top-up: highest priority with headroom) restores the bound and makes a
    second dgar pass take the identity branches bitwise.
    """
    amin, amax = c.alpha_min, c.alpha_max
    total = float(np.sum(y))
    if total > amax and float(np.sum(c.x_min)) <= amax:
        reduce = True
    elif total < amin and float(np.sum(c.x_max)) >= amin:
        reduce = False
    else:
        return y

    def flexible():
        if reduce:
            idx = np.flatnonzero((y - c.x_min)[order] > 0.0)[::-1]  # lowest priority first
        else:
            idx = np.flatnonzero((c.x_max - y)[order] > 0.0)  # highest priority first
        return [int(order[k]) for k in idx]

    def try_land(cands):
        for j in cands:
            if _land_total(y, j, float(c.x_min[j]), float(c.x_max[j]), amin, amax):
                return True
        return False

    if try_land(flexible()[:6]):
        return y
    # A zero-width band can fall between the sums reachable by moving one
    # asset: the summation tree rounds in steps, and the band may sit inside
    # a step. Nudging some other asset by its own ulp shifts the true sum at
    # sub-step granularity and re-aligns the grid; assets whose ulp is a
    # sizable fraction of the total's ulp cross the gap in a few nudges.
    # All nudges stay inside the box.
    total = float(np.sum(y))
    step = np.spacing(max(abs(amin), abs(total)))
    for attempt in range(24):
        primary = flexible()[:2]
        if not primary:
            break
        others = [i for i in range(y.size) if i not in primary]
        others.sort(key=lambda i: abs(np.spacing(max(y[i], 1e-300)) - 0.3 * step))
        i = others[attempt % len(others)] if others else None
        if i is None:
            break
        target = c.x_min[i] if reduce else c.x_max[i]
        nudged = float(np.nextafter(y[i], target))
        if nudged == y[i]:
            target = c.x_max[i] if reduce else c.x_min[i]
            nudged = float(np.nextafter(y[i], target))
            if nudged == y[i]:
                continue
        y[i] = nudged
        if try_land(primary):
            return y
    # The band is unreachable on this summation grid (a point band whose
    # float sum parity skips it, typical with a single movable asset). Park
    # the most flexible asset just below alpha_max: the total then misses the
    # band by at most one grid step and a rerun reproduces it bitwise.
    movable = [i for i in range(y.size) if c.x_max[i] > c.x_min[i]]
    if movable:
        j = max(movable, key=lambda i: (y[i], -i))
        _park_below(y, j, float(c.x_min[j]), float(c.x_max[j]), amax)
    return y


def _canonical_cycle(cycle, c):
    """Deterministic representative of a projection orbit cycle.

    Prefers states whose total sits at or below alpha_max, then the smallest
    byte representation; the choice depends only on the cycle's member set,
    so every entry point into the cycle returns the same vector.
    """
    below = [z for z in cycle if float(np.sum(z)) <= c.alpha_max]
    pool = below if below else cycle
    return min(pool, key=lambda z: z.tobytes())


def _settle(y, c):
    """Iterate the single-pass projection to a bitwise fixed point.

    A total already inside the band is a fixed point outright. Otherwise
    (degenerate geometries where the band is unreachable on the float
    summation grid) the orbit reaches a fixed point or a short cycle within a
    few passes; cycles collapse to a canonical representative so that
    projecting the output again reproduces it exactly.
    """
    if c.alpha_min <= float(np.sum(y)) <= c.alpha_max:
        return y
    seen = {y.tobytes(): 0}
    orbit = [y]
    z = y
    for _ in range(48):
        z = _forward(z, c, want_trace=False)[0]
        key = z.tobytes()
        if key in seen:
            return _canonical_cycle(orbit[seen[key]:], c)
        seen[key] = len(orbit)
        orbit.append(z)
    return z


def dgar(x: np.ndarray, c: DgarConstraints) -> np.ndarray:
    """Full projection: clip, cap the excess, inflate the deficit."""
    y, _ = _forward(np.asarray(x, dtype=np.float64), c, want_trace=False)
    if y.size == 0:
        return y
    return _settle(y, c)


def _forward(x, c, want_trace, depth=0):
    _check_nan(x, c)
    if x.size != c.n:
        raise ValueError(f"weight vector length {x.size} does not match constraints ({c.n})")
    if x.size == 0:
        return x.copy(), None
    lo, hi = c.x_min, c.x_max

    x1 = np.minimum(np.maximum(x, lo), hi)
    s1 = float(np.sum(x1))
    alpha_t = min(max(s1, c.alpha_min), c.alpha_max)
    order = np.argsort(-x1, kind="stable")

    lo_k = lo[order]
    hi_k = hi[order]
    u = x1[order]

    # Saturation thresholds carry a summation-noise sliver: when the floors
    # (caps) exhaust the band edge to within a few thousand ulp of the total,
    # a narrow band may be unreachable on the float summation grid, so snap
    # to the exact floors (caps), which a second pass reproduces bitwise.
    edge = 4096.0 * np.finfo(np.float64).eps

    cap_active = s1 > c.alpha_max
    cap_saturated = cap_active and \
        float(np.sum(lo)) >= c.alpha_max - edge * (1.0 + abs(c.alpha_max))
    if cap_saturated:
        x2k = np.minimum(lo_k, u)  # floors alone exhaust the budget
        s2 = float(np.sum(lo))  # unsorted sum, bitwise what a rerun computes
    elif cap_active:
        x2k = _cap_excess_ordered(u, lo_k, c.alpha_max)
        s2 = float(np.sum(x2k))
    else:
        x2k = u
        # reuse s1: summing the permuted array can differ by an ulp and must
        # not flip the inflate gate
        s2 = s1

    fill_active = s2 < c.alpha_min
    fill_saturated = fill_active and \
        float(np.sum(hi)) <= c.alpha_min + edge * (1.0 + abs(c.alpha_min))

    if cap_saturated and fill_active and not fill_saturated and depth == 0:
        # band narrower than the summation noise around the floors: a second
        # pass would start from the snapped vector with its own priority
        # order, so run exactly that pass now
        y = _forward(np.minimum(lo, x1), c, want_trace=False, depth=1)[0]
        return y, ({"snapped": True} if want_trace else None)

    if fill_saturated:
        x3k = np.maximum(x2k, hi_k)  # even full caps cannot reach alpha_min
    elif fill_active:
        deficit = alpha_t - s2
        add_k = _inflate_ordered(x2k, hi_k, deficit)
        x3k = np.minimum(x2k + add_k, hi_k)
    else:
        x3k = x2k

    y = np.empty_like(x3k)
    y[order] = x3k

    if fill_saturated and depth == 0 and float(np.sum(hi)) > c.alpha_max:
        # mirror degeneracy: the snapped caps overshoot a band narrower than
        # their own summation noise; rerun from the snapped vector
        y = _forward(y, c, want_trace=False, depth=1)[0]
        return y, ({"snapped": True} if want_trace else None)

    y = _repair_total(y, order, c)

    trace = None
    if want_trace:
        trace = {
            "x": x, "x1": x1, "s1": s1, "alpha_t": alpha_t, "order": order,
            "lo": lo, "hi": hi, "lo_k": lo_k, "hi_k": hi_k, "u": u,
            "cap_active": cap_active, "cap_saturated": cap_saturated,
            "x2k": x2k, "s2": s2,
            "fill_active": fill_active, "fill_saturated": fill_saturated, "c": c,
        }
    return y, trace


def dgar_with_vjp(x: np.ndarray, c: DgarConstraints):
    """Forward projection plus a pullback for reverse-mode differentiation.

    Returns (y, pullback); pullback(g) gives dL/dx for dL/dy = g under the
    deterministic subgradient convention described in the module docstring.
    Only x carries gradient; the constraints are treated as constants.
    """
    x = np.asarray(x, dtype=np.float64)
    y, tr = _forward(x, c, want_trace=True)
    if x.size:
        # extra settling passes are ulp-level repairs: identity for gradients
        y = _settle(y, c)

    def pullback(g_y: np.ndarray) -> np.ndarray:
        if x.size == 0:
            return np.zeros_like(x)
        if tr.get("snapped"):
            # degenerate-band snap: the output is the constant floor (cap)
            # vector, locally independent of x
            return np.zeros_like(x)
        order = tr["order"]
        lo_k, hi_k, u = tr["lo_k"], tr["hi_k"], tr["u"]
        c_ = tr["c"]

        g3 = np.asarray(g_y, dtype=np.float64)[order]
        g_alpha_t = 0.0
        g_s2_direct = 0.0

        # inflate stage
        if tr["fill_saturated"]:
            # x3k = max(x2k, hi_k): gradient passes only where x2k won
            g_x2k = g3 * (tr["x2k"] >= hi_k)
        elif tr["fill_active"]:
            x2k = tr["x2k"]
            deficit = tr["alpha_t"] - tr["s2"]
            headroom = np.minimum(hi_k - x2k, deficit)
            taken = np.cumsum(headroom)
            overshoot = np.maximum(0.0, taken - deficit)
            add_k = np.maximum(0.0, headroom - overshoot)
            pre = x2k + add_k

            keep = pre <= hi_k  # min(pre, hi): hi branch is constant
            g_pre = g3 * keep
            g_x2k = g_pre.copy()
            g_add = g_pre

            live = (headroom - overshoot) > 0.0  # max(0, .): zero branch is constant
            g_head = g_add * live
            g_over = -g_add * live

            over_live = (taken - deficit) > 0.0
            g_taken = g_over * over_live
            g_deficit = -float(np.sum(g_over * over_live))
            # taken = cumsum(headroom): suffix-sum the gradient
            g_head = g_head + np.cumsum(g_taken[::-1])[::-1]

            head_is_room = (hi_k - x2k) <= deficit  # min's first arg wins ties
            g_x2k -= g_head * head_is_room
            g_deficit += float(np.sum(g_head * ~head_is_room))

            # deficit = alpha_t - s2
            g_alpha_t += g_deficit
            g_s2_direct -= g_deficit
        else:
            g_x2k = g3.copy()

        g_x2k = g_x2k + g_s2_direct  # s2 = sum(x2k), scalar broadcast

        # cap stage
        if tr["cap_saturated"]:
            # x2k = min(lo_k, u): gradient passes only where u won
            g_u = g_x2k * (u < tr["lo_k"])
        elif tr["cap_active"]:
            upper = np.cumsum(u)
            floors = np.cumsum(lo_k)
            budget = c_.alpha_max - (floors[-1] - floors)
            diff_bu = budget - upper
            cummin = np.minimum.accumulate(diff_bu)
            slack = np.minimum(0.0, cummin)
            running = upper + slack
            pre2 = np.diff(running, prepend=0.0)

            # x2k = min(max(pre2, lo_k), u): route per element
            after_max = np.maximum(pre2, lo_k)
            to_pre = (pre2 >= lo_k) & (after_max <= u)
            to_u = after_max > u
            g_u = g_x2k * to_u
            g_pre2 = g_x2k * to_pre

            # pre2 = diff(running): g_running_j = g_pre2_j - g_pre2_{j+1}
            g_running = g_pre2 - np.concatenate([g_pre2[1:], [0.0]])
            g_upper = g_running.copy()
            g_slack = g_running

            g_cummin = g_slack * (cummin < 0.0)  # min(0, .): zero branch constant
            # cummin VJP: route to the first argmin prefix position
            n = u.size
            prev = np.concatenate([[np.inf], cummin[:-1]])
            is_new = diff_bu < prev
            pos = np.where(is_new, np.arange(n), -1)
            argmin_idx = np.maximum.accumulate(pos)
            g_diff = np.zeros(n)
            np.add.at(g_diff, argmin_idx, g_cummin)

            g_upper -= g_diff  # diff_bu = budget - upper; budget is constant
            g_u = g_u + np.cumsum(g_upper[::-1])[::-1]
        else:
            g_u = g_x2k

        # unsort and finish the clip stage
        g_x1 = np.zeros_like(x)
        g_x1[order] = g_u

        g_s1 = 0.0
        if c_.alpha_min <= tr["s1"] <= c_.alpha_max:
            g_s1 += g_alpha_t
        g_x1 = g_x1 + g_s1  # s1 = sum(x1)

        pass_through = (x >= tr["lo"]) & (x <= tr["hi"])
        return g_x1 * pass_through

    return y, pullback


def feasible_total_band(c: DgarConstraints) -> bool:
    """True when the projection can guarantee the total-allocation band."""
    return float(np.sum(c.x_min)) <= c.alpha_max and float(np.sum(c.x_max)) >= c.alpha_min
