"""Monte Carlo estimation over solver outputs and a throughput harness.

The estimator is plain i.i.d. averaging with the textbook standard error,
so its convergence follows 1/sqrt(N) by construction and the harness can be
checked against that slope. The benchmark measures steady-state evaluations
per second for three engines (single exact, pooled exact, batched
surrogate) on one shared seeded problem stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .solver import solve_ef, solve_batch

ENGINE_EXACT_SINGLE = "exact-single"
ENGINE_EXACT_BATCH = "exact-batch-parallel"
ENGINE_SURROGATE = "surrogate"

# Rough per-sample activation budget for the surrogate engine; used to cap
# the batch size under the configured memory budget.
_BYTES_PER_UNIT = 8


@dataclass(frozen=True)
class McResult:
    estimate: float
    stderr: float
    n: int
    elapsed: float

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n": self.n,
            "elapsed": self.elapsed,
        }


def mc_table(results) -> str:
    """Delimiter-separated table for a sequence of McResult."""
    lines = ["n,estimate,stderr,elapsed"]
    for r in results:
        lines.append(f"{r.n},{r.estimate!r},{r.stderr!r},{r.elapsed:.3f}")
    return "\n".join(lines) + "\n"


def estimate_expectation(sampler, g, n: int, seed: int) -> McResult:
    """Mean and standard error of g(sampler(rng)) over n independent draws."""
    if n < 2:
        raise ValueError("need at least 2 draws for a standard error")
    rng = np.random.default_rng(seed)
    values = np.empty(n)
    t0 = time.perf_counter()
    for i in range(n):
        values[i] = float(g(sampler(rng)))
    elapsed = time.perf_counter() - t0
    est = float(values.mean())
    stderr = float(values.std(ddof=1) / np.sqrt(n))
    return McResult(estimate=est, stderr=stderr, n=n, elapsed=elapsed)


@dataclass(frozen=True)
class BenchRow:
    engine: str
    batch_size: int
    workers: int
    evals_per_sec: float
    wall_time: float
    evaluations: int
    note: str = ""


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["engine,batch_size,workers,evals_per_sec,wall_time,evaluations,note"]
        for r in self.rows:
            lines.append(
                f"{r.engine},{r.batch_size},{r.workers},{r.evals_per_sec:.3f},"
                f"{r.wall_time:.3f},{r.evaluations},{r.note}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        """Structured form: per-row dicts plus speedup ratios vs the single
        exact baseline when both were measured."""
        rows = [
            {
                "engine": r.engine,
                "batch_size": r.batch_size,
                "workers": r.workers,
                "evals_per_sec": r.evals_per_sec,
                "wall_time": r.wall_time,
                "evaluations": r.evaluations,
                "note": r.note,
            }
            for r in self.rows
        ]
        out = {"rows": rows}
        base = [r for r in self.rows if r.engine == ENGINE_EXACT_SINGLE]
        if base:
            floor = base[0].evals_per_sec
            if floor > 0:
                out["speedup_vs_exact_single"] = {
                    f"{r.engine}/b{r.batch_size}/w{r.workers}": r.evals_per_sec / floor
                    for r in self.rows
                    if r.engine != ENGINE_EXACT_SINGLE
                }
        return out


def surrogate_batch_cap(cfg, layout, memory_budget_bytes: int) -> int:
    """Largest batch the encoder pass fits in the configured budget."""
    t = layout.n_max
    per_sample = t * layout.feature_width
    per_sample += cfg.depth * t * (4 * cfg.token_dim + 2 * cfg.ff_dim + cfg.heads * t)
    per_sample += 2 * t * cfg.token_dim
    per_sample *= _BYTES_PER_UNIT
    return max(1, memory_budget_bytes // per_sample)


def _run_cell(eval_batch, problems, batch_size, duration, warmup):
    """One steady-state measurement; returns (evals, wall)."""
    stream_pos = 0

    def next_batch():
        nonlocal stream_pos
        batch = [problems[(stream_pos + i) % len(problems)] for i in range(batch_size)]
        stream_pos += batch_size
        return batch

    t_end = time.perf_counter() + warmup
    while time.perf_counter() < t_end:
        eval_batch(next_batch())
    done = 0
    t0 = time.perf_counter()
    t_end = t0 + duration
    while time.perf_counter() < t_end:
        eval_batch(next_batch())
        done += batch_size
    wall = time.perf_counter() - t0
    return done, wall


def bench(
    problems,
    engines=(ENGINE_EXACT_SINGLE,),
    batch_sizes=(64,),
    worker_counts=(1,),
    duration: float = 10.0,
    warmup: float = 2.0,
    repeats: int = 3,
    surrogate_weights=None,
    surrogate_cfg=None,
    surrogate_layout=None,
    memory_budget_bytes: int = 1 << 30,
) -> BenchResult:
    """Measure evaluations/second per (engine, batch size, workers) cell.

    Every engine consumes the same problem list in the same order. Each cell
    runs `repeats` times and reports the median throughput; warm-up work is
    excluded from the clock.
    """
    if not problems:
        raise ValueError("empty problem stream")
    result = BenchResult()
    for engine in engines:
        for workers in worker_counts:
            for batch_size in batch_sizes:
                note = ""
                if engine == ENGINE_EXACT_SINGLE:
                    if workers != 1:
                        continue

                    def eval_batch(batch):
                        for p in batch:
                            solve_ef(p)

                elif engine == ENGINE_EXACT_BATCH:

                    def eval_batch(batch, _w=workers):
                        solve_batch(batch, workers=_w)

                elif engine == ENGINE_SURROGATE:
                    if surrogate_weights is None:
                        raise ValueError("surrogate engine needs weights, cfg, layout")
                    from .surrogate import predict_batch

                    cap = surrogate_batch_cap(surrogate_cfg, surrogate_layout, memory_budget_bytes)
                    if batch_size > cap:
                        note = f"batch capped {batch_size}->{cap} by memory budget"
                        batch_size = cap

                    def eval_batch(batch):
                        predict_batch(batch, surrogate_weights, surrogate_cfg, surrogate_layout)

                else:
                    raise ValueError(f"unknown engine {engine!r}")

                runs = []
                for _ in range(repeats):
                    done, wall = _run_cell(eval_batch, problems, batch_size, duration, warmup)
                    runs.append((done / wall, wall, done))
                runs.sort()
                mid = runs[len(runs) // 2]
                result.rows.append(
                    BenchRow(
                        engine=engine,
                        batch_size=batch_size,
                        workers=workers,
                        evals_per_sec=mid[0],
                        wall_time=mid[1],
                        evaluations=mid[2],
                        note=note,
                    )
                )
    return result
