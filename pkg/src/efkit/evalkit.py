"""Accuracy evaluation of allocation functions against exact labels.

Metrics follow the published table layout: weight/return/volatility errors,
extreme quantiles of the per-sample summed weight error, and three
constraint-shaped precisions (ranking, class caps, volatility budget), all
bucketed by asset count. Quantiles are computed by full sort; at desk scale
that is cheaper than being clever, and it doubles as the reference the
streaming variant would be checked against.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field

import numpy as np

from .canonical import canonicalize
from .problems import EfProblem, covariance
from .solver import DEFAULT_SCALE, build_constraints, solve_min_variance

QUANTILES = (95.0, 99.865, 99.997)
# below this bucket size the outer quantiles sit on a handful of order
# statistics and deserve a health warning rather than silent output
QUANTILE_MIN_SAMPLES = 30_000
RANKING_TOL = 1e-4


def weight_errors(pred, truth):
    """(mse, mae, per-sample sum of absolute errors) over matched samples."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    diff = pred - truth
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))
    per_sample = np.abs(diff).sum(axis=1)
    return mse, mae, per_sample


def _rank_blocks(x, tol):
    """Descending tie-merged ordering as a list of index sets.

    Values within tol chain into one block; anything below tol collapses
    into the zero block.
    """
    x = np.where(np.abs(x) < tol, 0.0, np.asarray(x, dtype=np.float64))
    order = np.argsort(-x, kind="stable")
    blocks = []
    current = [int(order[0])]
    for prev, here in zip(order[:-1], order[1:]):
        if x[prev] - x[here] <= tol:
            current.append(int(here))
        else:
            blocks.append(frozenset(current))
            current = [int(here)]
    blocks.append(frozenset(current))
    return blocks


def ranking_matches(pred, truth, tol: float = RANKING_TOL) -> bool:
    """True when the tol-merged descending orders agree exactly."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.size != truth.size:
        raise ValueError("length mismatch")
    if pred.size == 0:
        return True
    return _rank_blocks(pred, tol) == _rank_blocks(truth, tol)


def ranking_precision(preds, truths, tol: float = RANKING_TOL) -> float:
    """Percentage of samples whose merged ranking matches the truth's."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    hits = sum(ranking_matches(p, t, tol) for p, t in zip(preds, truths))
    return 100.0 * hits / len(preds)


def constraint_precisions(
    pred,
    problem: EfProblem,
    v_min_scaled: float | None = None,
    scale: float = DEFAULT_SCALE,
):
    """(zeta_ok, vol_ok) for one prediction in the problem's asset order.

    The volatility budget is max(v_t, V_min*scale): the variance stage's own
    optimum is admissible even when it exceeds the target. If v_min_scaled is
    not supplied, the variance-stage QP is solved here.
    """
    pred = np.asarray(pred, dtype=np.float64)
    zeta_ok = True
    for j in range(problem.n_classes):
        if float(np.sum(pred[problem.classes == j])) > float(problem.zeta_max[j]) + 1e-8:
            zeta_ok = False
            break
    if v_min_scaled is None:
        cs = build_constraints(canonicalize(problem), scale=scale)
        x_min_var, _ = solve_min_variance(cs)
        v_min_scaled = float(x_min_var @ cs.Q @ x_min_var)
    q = covariance(problem.vols, problem.corr, scale=scale)
    v_t = problem.v_target * problem.v_target * scale
    vol_ok = float(pred @ q @ pred) <= max(v_t, v_min_scaled) + 1e-8 * scale
    return zeta_ok, vol_ok


@dataclass
class BucketStats:
    count: int
    weight_mse: float
    weight_mae: float
    return_mse: float
    return_mae: float
    vol_mse: float
    vol_mae: float
    quantiles: tuple
    ranking_precision: float
    zeta_precision: float
    vtarget_precision: float
    sum_errors: np.ndarray  # sorted; the cumulative error distribution


@dataclass
class EvalReport:
    buckets: dict
    warnings: list = field(default_factory=list)

    @property
    def overall(self) -> BucketStats:
        return self.buckets["all"]

    def to_text(self) -> str:
        out = io.StringIO()
        cols = (
            "bucket count w_mse w_mae r_mse r_mae v_mse v_mae "
            "q95 q99.865 q99.997 rank% zeta% vol%"
        ).split()
        out.write("\t".join(cols) + "\n")
        for key in sorted(self.buckets, key=lambda k: (k == "all", k)):
            s = self.buckets[key]
            row = [
                str(key),
                str(s.count),
                f"{s.weight_mse:.3e}",
                f"{s.weight_mae:.3e}",
                f"{s.return_mse:.3e}",
                f"{s.return_mae:.3e}",
                f"{s.vol_mse:.3e}",
                f"{s.vol_mae:.3e}",
                f"{s.quantiles[0]:.3e}",
                f"{s.quantiles[1]:.3e}",
                f"{s.quantiles[2]:.3e}",
                f"{s.ranking_precision:.2f}",
                f"{s.zeta_precision:.2f}",
                f"{s.vtarget_precision:.2f}",
            ]
            out.write("\t".join(row) + "\n")
        for w in self.warnings:
            out.write(f"# warning: {w}\n")
        return out.getvalue()


def _quantiles_sorted(sorted_errors: np.ndarray):
    if sorted_errors.size == 0:
        return tuple(0.0 for _ in QUANTILES)
    return tuple(
        float(np.quantile(sorted_errors, q / 100.0, method="lower"))
        for q in QUANTILES
    )


def _bucket_from_lists(rows) -> BucketStats:
    preds = [r["pred"] for r in rows]
    truths = [r["truth"] for r in rows]
    diffs = [p - t for p, t in zip(preds, truths)]
    flat = np.concatenate(diffs)
    sum_err = np.sort(np.array([float(np.abs(d).sum()) for d in diffs]))
    r_err = np.array([r["ret_pred"] - r["ret_truth"] for r in rows])
    v_err = np.array([r["vol_pred"] - r["vol_truth"] for r in rows])
    rank_hits = np.array([r["rank_ok"] for r in rows])
    zeta_hits = np.array([r["zeta_ok"] for r in rows])
    vol_hits = np.array([r["vol_ok"] for r in rows])
    return BucketStats(
        count=len(rows),
        weight_mse=float(np.mean(flat * flat)),
        weight_mae=float(np.mean(np.abs(flat))),
        return_mse=float(np.mean(r_err * r_err)),
        return_mae=float(np.mean(np.abs(r_err))),
        vol_mse=float(np.mean(v_err * v_err)),
        vol_mae=float(np.mean(np.abs(v_err))),
        quantiles=_quantiles_sorted(sum_err),
        ranking_precision=100.0 * float(np.mean(rank_hits)),
        zeta_precision=100.0 * float(np.mean(zeta_hits)),
        vtarget_precision=100.0 * float(np.mean(vol_hits)),
        sum_errors=sum_err,
    )


def evaluate(dataset, f, ranking_tol: float = RANKING_TOL, scale: float = DEFAULT_SCALE) -> EvalReport:
    """Score an allocation function f(problem) -> Allocation | weights.

    dataset is an iterable of labeled records (problem, allocation, branch).
    The volatility budget uses the label: on the variance branch the stored
    allocation *is* the variance-stage optimum, so its variance equals
    V_min*scale; on the return branch V_min <= v_t and the budget is v_t.
    """
    rows_by_n = {}
    for rec in dataset:
        problem = rec.problem
        pred = f(problem)
        pred = np.asarray(getattr(pred, "x", pred), dtype=np.float64)
        truth = np.asarray(rec.allocation, dtype=np.float64)
        sigma = covariance(problem.vols, problem.corr)
        q_scaled = scale * sigma
        var_truth = float(truth @ q_scaled @ truth)
        v_min_scaled = var_truth if rec.branch == "min_variance" else 0.0
        zeta_ok, vol_ok = constraint_precisions(pred, problem, v_min_scaled=v_min_scaled, scale=scale)
        row = {
            "pred": pred,
            "truth": truth,
            "ret_pred": float(problem.returns @ pred),
            "ret_truth": float(problem.returns @ truth),
            "vol_pred": float(np.sqrt(max(pred @ sigma @ pred, 0.0))),
            "vol_truth": float(np.sqrt(max(truth @ sigma @ truth, 0.0))),
            "rank_ok": ranking_matches(pred, truth, ranking_tol),
            "zeta_ok": zeta_ok,
            "vol_ok": vol_ok,
        }
        rows_by_n.setdefault(problem.n, []).append(row)

    if not rows_by_n:
        raise ValueError("empty dataset")
    buckets = {n: _bucket_from_lists(rows) for n, rows in sorted(rows_by_n.items())}
    buckets["all"] = _bucket_from_lists([r for rows in rows_by_n.values() for r in rows])
    report = EvalReport(buckets=buckets)
    for key, stats in buckets.items():
        if stats.count < QUANTILE_MIN_SAMPLES:
            report.warnings.append(
                f"bucket {key}: {stats.count} samples is thin for the "
                f"{QUANTILES[-1]} quantile; treat the tail numbers as indicative"
            )
    return report


@dataclass
class SweepTable:
    param: str
    values: np.ndarray
    weights: np.ndarray  # steps x n
    returns: np.ndarray
    vols: np.ndarray
    jumps: np.ndarray  # bool; True marks a >0.1 weight move into this row

    def to_csv(self) -> str:
        n = self.weights.shape[1]
        header = ["value"] + [f"w{i}" for i in range(n)] + ["return", "vol", "jump"]
        lines = [",".join(header)]
        for i, v in enumerate(self.values):
            cells = [repr(float(v))]
            cells += [repr(float(w)) for w in self.weights[i]]
            cells += [repr(float(self.returns[i])), repr(float(self.vols[i])), str(int(self.jumps[i]))]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


_PARAM_RE = re.compile(r"^(\w+)(?:\[(\d+)\])?$")


def _set_param(problem: EfProblem, path: str, value: float) -> EfProblem:
    m = _PARAM_RE.match(path)
    if not m:
        raise ValueError(f"cannot parse parameter path {path!r}")
    name, idx = m.group(1), m.group(2)
    if not hasattr(problem, name):
        raise ValueError(f"unknown field {name!r}")
    current = getattr(problem, name)
    if idx is None:
        if np.ndim(current) != 0:
            raise ValueError(f"{name} is a vector; use {name}[i]")
        return problem.with_fields(**{name: float(value)})
    i = int(idx)
    arr = np.array(current, dtype=np.float64)
    if not 0 <= i < arr.size:
        raise ValueError(f"index {i} out of range for {name}")
    arr[i] = value
    return problem.with_fields(**{name: arr})


def sweep(problem: EfProblem, param_path: str, lo: float, hi: float, steps: int, f) -> SweepTable:
    """Evaluate f along one scalar input; flag >0.1 weight jumps between rows."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    values = np.linspace(lo, hi, steps)
    weights = np.zeros((steps, problem.n))
    rets = np.zeros(steps)
    vols = np.zeros(steps)
    for i, v in enumerate(values):
        p = _set_param(problem, param_path, float(v))
        alloc = f(p)
        x = np.asarray(getattr(alloc, "x", alloc), dtype=np.float64)
        weights[i] = x
        rets[i] = float(p.returns @ x)
        sigma = covariance(p.vols, p.corr)
        vols[i] = float(np.sqrt(max(x @ sigma @ x, 0.0)))
    jumps = np.zeros(steps, dtype=bool)
    jumps[1:] = np.abs(np.diff(weights, axis=0)).max(axis=1) > 0.1
    return SweepTable(
        param=param_path, values=values, weights=weights, returns=rets, vols=vols, jumps=jumps
    )
