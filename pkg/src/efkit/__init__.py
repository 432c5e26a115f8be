"""Constrained efficient-frontier toolkit.

Exact two-stage solver for box/class/total-constrained mean-variance
portfolios, a greedy feasibility projection, a transformer surrogate trained
on solver labels, and the data generation, evaluation, and simulation
utilities around them.
"""

from .problems import (
    Allocation,
    EfProblem,
    ValidationReport,
    Violation,
    covariance,
    make_problem,
    validate,
)
from .canonical import CanonicalProblem, canonicalize, restore_order
from .dgar import DgarConstraints, dgar, dgar_with_vjp
from .solver import (
    InfeasibleError,
    NumericalFailureError,
    SolverError,
    SolverResult,
    solve_batch,
    solve_ef,
)
from .datagen import (
    DatasetRecord,
    DomainSpec,
    generate,
    read_dataset,
    read_manifest,
    sample_problem,
)
from .evalkit import EvalReport, evaluate, sweep
from .simkit import BenchResult, McResult, bench, estimate_expectation

__all__ = [
    "Allocation",
    "EfProblem",
    "ValidationReport",
    "Violation",
    "covariance",
    "make_problem",
    "validate",
    "CanonicalProblem",
    "canonicalize",
    "restore_order",
    "DgarConstraints",
    "dgar",
    "dgar_with_vjp",
    "InfeasibleError",
    "NumericalFailureError",
    "SolverError",
    "SolverResult",
    "solve_batch",
    "solve_ef",
    "DatasetRecord",
    "DomainSpec",
    "generate",
    "read_dataset",
    "read_manifest",
    "sample_problem",
    "EvalReport",
    "evaluate",
    "sweep",
    "BenchResult",
    "McResult",
    "bench",
    "estimate_expectation",
]

__version__ = "0.1.0"
