"""Canonical form: cap clamping, class normalization, return-sorted ordering.

Canonicalization rewrites an instance into an equivalent one with redundant
slack removed (asset caps never exceed the class cap that already binds them,
degenerate classes are tightened) and assets sorted by descending expected
return. The feasible set and the optimal allocation are unchanged; only the
asset order is, and the permutation is kept so results can be mapped back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import NO_CLASS, EfProblem


@dataclass(frozen=True)
class CanonicalProblem:
    """A canonicalized instance plus the asset permutation that produced it.

    ``perm[j]`` is the original index of the asset now at canonical position
    j, so ``x_original = restore_order(x_canonical, perm)``.
    """

    problem: EfProblem
    perm: np.ndarray

    @property
    def n(self) -> int:
        return self.problem.n


def clamp_asset_caps(problem: EfProblem) -> EfProblem:
    """Tighten per-asset caps against the owning class cap, then floors.

    An asset in class c can never receive more than zeta_max[c], so
    x_max <- min(x_max, zeta_max[class]); afterwards x_min <- min(x_min,
    x_max) keeps the box nonempty. Unclassed assets are untouched.
    """
    x_max = problem.x_max.copy()
    classed = problem.classes != NO_CLASS
    if problem.n_classes and classed.any():
        caps = problem.zeta_max[problem.classes[classed]]
        x_max[classed] = np.minimum(x_max[classed], caps)
    x_min = np.minimum(problem.x_min, x_max)
    return problem.with_fields(x_min=x_min, x_max=x_max)


def normalize_classes(problem: EfProblem) -> EfProblem:
    """Tighten degenerate class caps.

    A singleton class's cap collapses onto its member's x_max; an empty
    class's cap drops to zero. Class membership itself never changes.
    """
    if not problem.n_classes:
        return problem
    zeta = problem.zeta_max.copy()
    for c in range(problem.n_classes):
        members = problem.class_members(c)
        if members.size == 0:
            zeta[c] = 0.0
        elif members.size == 1:
            zeta[c] = min(zeta[c], float(problem.x_max[members[0]]))
    return problem.with_fields(zeta_max=zeta)


def sort_by_returns(problem: EfProblem) -> CanonicalProblem:
    """Stable sort of assets by descending expected return."""
    # argsort is ascending; negate for descending while keeping stability.
    perm = np.argsort(-problem.returns, kind="stable")
    sorted_problem = problem.with_fields(
        returns=problem.returns[perm],
        vols=problem.vols[perm],
        corr=problem.corr[np.ix_(perm, perm)],
        x_min=problem.x_min[perm],
        x_max=problem.x_max[perm],
        classes=problem.classes[perm],
    )
    return CanonicalProblem(problem=sorted_problem, perm=perm)


def canonicalize(problem: EfProblem) -> CanonicalProblem:
    """clamp caps -> normalize classes -> sort by returns."""
    return sort_by_returns(normalize_classes(clamp_asset_caps(problem)))


def restore_order(x_canonical: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Map a vector from canonical asset order back to the original order."""
    x_canonical = np.asarray(x_canonical, dtype=np.float64)
    out = np.empty_like(x_canonical)
    out[np.asarray(perm)] = x_canonical
    return out
