"""Problem and allocation data model for constrained mean-variance portfolios.

A problem instance holds per-asset expected returns and volatilities, a
correlation matrix, box bounds, optional class (sector) caps, and total
allocation bounds together with a volatility target. All arrays are float64
and read-only once constructed; structural errors (shape mismatches) raise at
construction time, while value-level contract violations are reported as data
by :func:`validate`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

# Eigenvalues of the correlation matrix may dip this far below zero before the
# matrix is flagged as not PSD.
PSD_TOL = 1e-8

# Variance rescaling applied when building solver inputs. Keeps the quadratic
# form well-conditioned relative to unit-scale linear constraints.
DEFAULT_SCALE = 1e4

NO_CLASS = -1


def _as_float_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d array, got shape {arr.shape}")
    return arr


def _as_int_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d array, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(arr, dtype=np.float64)):
            raise ValueError(f"{name} must contain integers")
        arr = rounded
    return arr.astype(np.int64)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EfProblem:
    """One efficient-frontier optimization instance.

    Fields
    ------
    returns, vols : per-asset expected return and volatility, length n.
    corr          : n x n correlation matrix.
    x_min, x_max  : per-asset allocation box.
    classes       : per-asset class id in [0, m), or -1 for "no class".
    zeta_max      : per-class allocation caps, length m.
    alpha_min/max : bounds on the total allocation.
    v_target      : volatility target defining the risk budget.
    """

    returns: np.ndarray
    vols: np.ndarray
    corr: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    classes: np.ndarray
    zeta_max: np.ndarray
    alpha_min: float
    alpha_max: float
    v_target: float

    def __post_init__(self):
        returns = _as_float_vector(self.returns, "returns")
        n = returns.size
        vols = _as_float_vector(self.vols, "vols")
        x_min = _as_float_vector(self.x_min, "x_min")
        x_max = _as_float_vector(self.x_max, "x_max")
        classes = _as_int_vector(self.classes, "classes")
        zeta_max = _as_float_vector(self.zeta_max, "zeta_max")
        corr = np.asarray(self.corr, dtype=np.float64)
        if corr.ndim != 2 or corr.shape != (n, n):
            raise ValueError(f"corr must be {n}x{n}, got shape {corr.shape}")
        for name, arr in (("vols", vols), ("x_min", x_min), ("x_max", x_max), ("classes", classes)):
            if arr.size != n:
                raise ValueError(f"{name} has length {arr.size}, expected {n}")
        object.__setattr__(self, "returns", _freeze(returns))
        object.__setattr__(self, "vols", _freeze(vols))
        object.__setattr__(self, "corr", _freeze(corr))
        object.__setattr__(self, "x_min", _freeze(x_min))
        object.__setattr__(self, "x_max", _freeze(x_max))
        object.__setattr__(self, "classes", _freeze(classes))
        object.__setattr__(self, "zeta_max", _freeze(zeta_max))
        object.__setattr__(self, "alpha_min", float(self.alpha_min))
        object.__setattr__(self, "alpha_max", float(self.alpha_max))
        object.__setattr__(self, "v_target", float(self.v_target))

    @property
    def n(self) -> int:
        return self.returns.size

    @property
    def n_classes(self) -> int:
        return self.zeta_max.size

    def with_fields(self, **kwargs) -> "EfProblem":
        return replace(self, **kwargs)

    def class_members(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.classes == class_id)


def covariance(vols: np.ndarray, corr: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """scale * diag(vols) @ corr @ diag(vols), symmetrized.

    The explicit 0.5 * (Q + Q') guards against asymmetry introduced by the
    diagonal sandwich in floating point.
    """
    vols = _as_float_vector(vols, "vols")
    corr = np.asarray(corr, dtype=np.float64)
    if corr.shape != (vols.size, vols.size):
        raise ValueError(f"corr shape {corr.shape} does not match {vols.size} vols")
    q = scale * (corr * vols[:, None] * vols[None, :])
    return 0.5 * (q + q.T)


@dataclass(frozen=True)
class Allocation:
    """A weight vector together with its realized return and volatility."""

    x: np.ndarray
    achieved_return: float
    achieved_vol: float

    def __post_init__(self):
        object.__setattr__(self, "x", _freeze(_as_float_vector(self.x, "x")))
        object.__setattr__(self, "achieved_return", float(self.achieved_return))
        object.__setattr__(self, "achieved_vol", float(self.achieved_vol))

    @classmethod
    def from_weights(cls, problem: EfProblem, x) -> "Allocation":
        x = _as_float_vector(x, "x")
        if x.size != problem.n:
            raise ValueError(f"x has length {x.size}, expected {problem.n}")
        sigma = covariance(problem.vols, problem.corr)
        var = float(x @ sigma @ x)
        return cls(x=x, achieved_return=float(problem.returns @ x), achieved_vol=float(np.sqrt(max(var, 0.0))))


@dataclass(frozen=True)
class Violation:
    field: str
    message: str
    value: float


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, field_name: str, message: str, value: float):
        self.violations.append(Violation(field_name, message, float(value)))

    def __iter__(self):
        return iter(self.violations)


def validate(problem: EfProblem, psd_tol: float = PSD_TOL) -> ValidationReport:
    """Check value-level invariants, returning every violation as data.

    Never raises on bad values; structural issues (wrong shapes) are already
    impossible past the constructor.
    """
    report = ValidationReport()
    p = problem

    if np.any(p.vols < 0):
        report.add("vols", "volatilities must be nonnegative", float(p.vols.min()))

    asym = float(np.abs(p.corr - p.corr.T).max()) if p.n else 0.0
    if asym > 1e-12:
        report.add("corr", "correlation matrix must be symmetric", asym)
    if p.n:
        diag_err = float(np.abs(np.diag(p.corr) - 1.0).max())
        if diag_err > 1e-12:
            report.add("corr", "correlation diagonal must be 1", diag_err)
        off_max = float(np.abs(p.corr).max())
        if off_max > 1.0 + 1e-12:
            report.add("corr", "correlation entries must lie in [-1, 1]", off_max)
        min_eig = float(np.linalg.eigvalsh(0.5 * (p.corr + p.corr.T)).min())
        if min_eig < -psd_tol:
            report.add("corr", f"correlation matrix must be PSD within {psd_tol:g}", min_eig)

    if np.any(p.x_min < 0):
        report.add("x_min", "lower bounds must be nonnegative", float(p.x_min.min()))
    gap = p.x_min - p.x_max
    if np.any(gap > 0):
        report.add("x_min", "x_min must not exceed x_max", float(gap.max()))
    if np.any(p.x_max > 1.0):
        report.add("x_max", "upper bounds must not exceed 1", float(p.x_max.max()))

    if p.alpha_min < 0:
        report.add("alpha_min", "alpha_min must be nonnegative", p.alpha_min)
    if p.alpha_min > p.alpha_max:
        report.add("alpha_min", "alpha_min must not exceed alpha_max", p.alpha_min - p.alpha_max)

    m = p.n_classes
    bad_ids = (p.classes != NO_CLASS) & ((p.classes < 0) | (p.classes >= m))
    if np.any(bad_ids):
        report.add("classes", f"class ids must be -1 or in [0, {m})", float(p.classes[bad_ids][0]))
    if np.any(p.zeta_max < 0):
        report.add("zeta_max", "class caps must be nonnegative", float(p.zeta_max.min()))

    if p.v_target < 0:
        report.add("v_target", "volatility target must be nonnegative", p.v_target)

    return report


def make_problem(
    returns: Sequence[float],
    vols: Sequence[float],
    corr,
    x_max: Sequence[float],
    x_min: Sequence[float] | float = 0.0,
    classes: Sequence[int] | None = None,
    zeta_max: Sequence[float] = (),
    alpha_min: float = 0.0,
    alpha_max: float = 1.0,
    v_target: float = 0.1,
) -> EfProblem:
    """Convenience constructor filling defaults (no classes, zero floors)."""
    returns = _as_float_vector(returns, "returns")
    n = returns.size
    if np.isscalar(x_min):
        x_min = np.full(n, float(x_min))
    if classes is None:
        classes = np.full(n, NO_CLASS, dtype=np.int64)
    return EfProblem(
        returns=returns,
        vols=vols,
        corr=corr,
        x_min=x_min,
        x_max=x_max,
        classes=classes,
        zeta_max=zeta_max,
        alpha_min=alpha_min,
        alpha_max=alpha_max,
        v_target=v_target,
    )
