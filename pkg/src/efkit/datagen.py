"""Domain sampling, exact labeling, and dataset serialization.

Instances are drawn over the published training domain, labeled with the
exact solver, and written as newline-delimited JSON with a sidecar manifest.
A dataset is fully determined by (domain, count, seed, shard size): each
shard owns an independent generator seeded by [seed, shard_index], so shards
can be produced in parallel and concatenated in order without changing a
byte of the output.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .problems import EfProblem, make_problem, NO_CLASS
from .solver import solve_ef, OPTIMAL, INFEASIBLE

FORMAT_VERSION = "efkit-dataset-1"

# published asymmetric asset-count weighting, percent per asset count;
# larger problems are deliberately over-represented
ASSET_COUNT_PCT = {
    2: 2.517,
    3: 2.551,
    4: 2.559,
    5: 2.603,
    6: 6.834,
    7: 6.879,
    8: 10.346,
    9: 10.377,
    10: 13.826,
    11: 13.850,
    12: 27.658,
}

RET_RANGE = (-1.0, 2.0)
VOL_RANGE = (0.0, 2.0)


@dataclass(frozen=True)
class DomainSpec:
    """Sampling ranges for every problem field.

    Defaults reproduce the training-domain table: correlation entries land in
    [-1, 1] by construction of the factor sampler, alpha_max is pinned to 1,
    and asset counts follow the published proportions restricted to n_range.
    """

    v_target: tuple = (0.05, 0.15)
    vols: tuple = VOL_RANGE
    returns: tuple = RET_RANGE
    zeta_max: tuple = (0.2, 1.0)
    x_max: tuple = (0.01, 1.0)
    alpha_min: tuple = (0.6, 1.0)
    alpha_max: float = 1.0
    n_range: tuple = (2, 12)
    class_counts: tuple = (0, 1, 2)
    full_alloc_prob: float = 0.5
    sample_x_min: bool = False  # reference behavior fixes the floors at 0

    def __post_init__(self):
        for name in ("v_target", "vols", "returns", "zeta_max", "x_max", "alpha_min"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"degenerate range for {name}: [{lo}, {hi}]")
        lo, hi = self.n_range
        if not (2 <= lo <= hi <= 12):
            raise ValueError(f"n_range must sit inside [2, 12], got {self.n_range}")

    def asset_count_weights(self):
        lo, hi = self.n_range
        counts = [n for n in ASSET_COUNT_PCT if lo <= n <= hi]
        w = np.array([ASSET_COUNT_PCT[n] for n in counts], dtype=np.float64)
        return np.array(counts), w / w.sum()


@dataclass(frozen=True)
class DatasetRecord:
    """One labeled sample: the instance plus the exact solver's answer."""

    problem: EfProblem
    allocation: np.ndarray  # weights in the problem's original asset order
    branch: str
    kkt_residual: float


def sample_correlation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Factor-model correlation matrix: guaranteed PSD, entries in [-1, 1]."""
    k = int(rng.integers(1, n + 1))
    loadings = rng.normal(size=(n, k))
    idio = rng.uniform(0.05, 1.0, n)  # keep strictly PD
    cov = loadings @ loadings.T + np.diag(idio)
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    return corr


def _max_attainable(x_max, classes, zeta_max) -> float:
    total = float(np.sum(x_max[classes == NO_CLASS]))
    for j in range(len(zeta_max)):
        total += min(float(zeta_max[j]), float(np.sum(x_max[classes == j])))
    return total


def sample_problem(rng: np.random.Generator, spec: DomainSpec = DomainSpec()) -> EfProblem:
    """Draw one feasible instance from the domain.

    The asset count is drawn first and kept; the constraint block (classes,
    caps, budget band) is redrawn until the caps can reach alpha_min, so the
    count distribution is not skewed by feasibility rejection.
    """
    counts, weights = spec.asset_count_weights()
    n = int(rng.choice(counts, p=weights))

    for _ in range(1000):
        m = int(rng.choice(spec.class_counts))
        if m:
            classes = rng.integers(0, m, n)
            zeta = rng.uniform(*spec.zeta_max, m)
        else:
            classes = np.full(n, NO_CLASS)
            zeta = np.zeros(0)
        x_max = rng.uniform(*spec.x_max, n)
        if rng.uniform() < spec.full_alloc_prob:
            alpha_min = alpha_max = 1.0
        else:
            alpha_min = float(rng.uniform(*spec.alpha_min))
            alpha_max = spec.alpha_max
        if _max_attainable(x_max, classes, zeta) >= alpha_min:
            break

    return make_problem(
        returns=rng.uniform(*spec.returns, n),
        vols=rng.uniform(*spec.vols, n),
        corr=sample_correlation(rng, n),
        x_max=x_max,
        x_min=rng.uniform(0.0, np.min(x_max)) if spec.sample_x_min else 0.0,
        classes=classes,
        zeta_max=zeta,
        alpha_min=alpha_min,
        alpha_max=alpha_max,
        v_target=float(rng.uniform(*spec.v_target)),
    )


def target_discontinuities(
    problem: EfProblem,
    rng: np.random.Generator,
    eps: float = 1e-3,
    prob: float = 0.84,
) -> EfProblem:
    """With probability prob, push two assets' returns (or vols) within eps.

    Near-ties are where the exact map jumps between allocations, so the
    training stream is biased toward them on purpose.
    """
    if problem.n < 2 or rng.uniform() >= prob:
        return problem
    i, j = rng.choice(problem.n, size=2, replace=False)
    delta = float(rng.uniform(-eps, eps))
    if rng.uniform() < 0.5:
        lo, hi = RET_RANGE
        returns = np.array(problem.returns)
        returns[j] = min(max(returns[i] + delta, lo), hi)
        return problem.with_fields(returns=returns)
    lo, hi = VOL_RANGE
    vols = np.array(problem.vols)
    vols[j] = min(max(vols[i] + delta, lo), hi)
    return problem.with_fields(vols=vols)


def _constraint_gap(problem: EfProblem, x: np.ndarray) -> float:
    """Largest violation of the polytope in the original asset order."""
    gap = float(np.max(x - problem.x_max, initial=0.0))
    gap = max(gap, float(np.max(problem.x_min - x, initial=0.0)))
    total = float(np.sum(x))
    gap = max(gap, problem.alpha_min - total, total - problem.alpha_max)
    for j in range(problem.n_classes):
        gap = max(gap, float(np.sum(x[problem.classes == j])) - float(problem.zeta_max[j]))
    return gap


def record_to_obj(rec: DatasetRecord) -> dict:
    p = rec.problem
    return {
        "n": p.n,
        "returns": p.returns.tolist(),
        "vols": p.vols.tolist(),
        "corr": p.corr.tolist(),
        "x_min": p.x_min.tolist(),
        "x_max": p.x_max.tolist(),
        "classes": p.classes.tolist(),
        "zeta_max": p.zeta_max.tolist(),
        "alpha_min": p.alpha_min,
        "alpha_max": p.alpha_max,
        "v_target": p.v_target,
        "allocation": rec.allocation.tolist(),
        "branch": rec.branch,
        "kkt_residual": rec.kkt_residual,
    }


def problem_from_obj(obj: dict) -> EfProblem:
    """Parse the problem fields of a record; label fields may be absent."""
    return EfProblem(
        returns=obj["returns"],
        vols=obj["vols"],
        corr=obj["corr"],
        x_min=obj["x_min"],
        x_max=obj["x_max"],
        classes=obj["classes"],
        zeta_max=obj["zeta_max"],
        alpha_min=obj["alpha_min"],
        alpha_max=obj["alpha_max"],
        v_target=obj["v_target"],
    )


def record_from_obj(obj: dict) -> DatasetRecord:
    return DatasetRecord(
        problem=problem_from_obj(obj),
        allocation=np.asarray(obj["allocation"], dtype=np.float64),
        branch=obj["branch"],
        kkt_residual=float(obj["kkt_residual"]),
    )


def _generate_shard(args):
    spec, seed, shard_index, want, disc_eps, disc_prob = args
    rng = np.random.default_rng([seed, shard_index])
    lines = []
    drops = {"infeasible": 0, "numerical_failure": 0, "constraint_violation": 0}
    while len(lines) < want:
        problem = sample_problem(rng, spec)
        problem = target_discontinuities(problem, rng, eps=disc_eps, prob=disc_prob)
        res = solve_ef(problem)
        if res.status != OPTIMAL:
            key = "infeasible" if res.status == INFEASIBLE else "numerical_failure"
            drops[key] += 1
            continue
        x = res.allocation.x
        if _constraint_gap(problem, x) > 1e-8:
            drops["constraint_violation"] += 1
            continue
        rec = DatasetRecord(
            problem=problem, allocation=x, branch=res.branch, kkt_residual=res.kkt_residual
        )
        lines.append(json.dumps(record_to_obj(rec), separators=(",", ":")))
    return shard_index, lines, drops


def manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


def generate(
    spec: DomainSpec,
    count: int,
    seed: int,
    out,
    shard_size: int = 2048,
    disc_eps: float = 1e-3,
    disc_prob: float = 0.84,
    workers: int = 1,
) -> dict:
    """Write count labeled records to out (JSONL) plus a manifest; returns the manifest.

    Output bytes depend only on the arguments, never on worker count or wall
    clock: the manifest carries no timestamps.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    out = Path(out)
    n_shards = (count + shard_size - 1) // shard_size
    sizes = [min(shard_size, count - i * shard_size) for i in range(n_shards)]
    tasks = [(spec, seed, i, sizes[i], disc_eps, disc_prob) for i in range(n_shards)]

    if workers > 1 and n_shards > 1:
        with multiprocessing.Pool(workers) as pool:
            parts = pool.map(_generate_shard, tasks)
    else:
        parts = [_generate_shard(t) for t in tasks]
    parts.sort(key=lambda item: item[0])

    drops = {"infeasible": 0, "numerical_failure": 0, "constraint_violation": 0}
    with open(out, "w", encoding="utf-8") as fh:
        for _, lines, shard_drops in parts:
            for line in lines:
                fh.write(line + "\n")
            for key in drops:
                drops[key] += shard_drops[key]

    dropped = sum(drops.values())
    manifest = {
        "format": FORMAT_VERSION,
        "seed": seed,
        "count": count,
        "shard_size": shard_size,
        "n_shards": n_shards,
        "disc_eps": disc_eps,
        "disc_prob": disc_prob,
        "drop_stats": drops,
        "drop_rate": dropped / (dropped + count),
        "spec": asdict(spec),
    }
    with open(manifest_path(out), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def read_dataset(path):
    """Yield DatasetRecord objects from a JSONL dataset file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield record_from_obj(json.loads(line))


def read_manifest(path) -> dict:
    with open(manifest_path(path), "r", encoding="utf-8") as fh:
        return json.load(fh)
