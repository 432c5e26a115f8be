"""Command-line entry point.

Subcommands cover the full workflow: solve one instance, generate a labeled
dataset, train the surrogate, evaluate an engine against a dataset, sweep a
parameter, benchmark throughput, and run Monte Carlo estimates. Every run
writes a manifest echoing its fully resolved configuration so results can be
reproduced from the manifest alone.

Exit codes: 0 success, 2 usage error, 3 infeasible instance,
4 numerical failure, 5 unparseable input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen
from .canonical import canonicalize, restore_order
from .datagen import DomainSpec
from .dgar import DgarConstraints, dgar
from .problems import DEFAULT_SCALE, EfProblem, make_problem
from .solver import (
    INFEASIBLE,
    NUMERICAL_FAILURE,
    InfeasibleError,
    NumericalFailureError,
    solve_ef,
)
from . import simkit
from . import evalkit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4
EXIT_PARSE = 5

_TUPLE_FIELDS_INT = {"n_range", "class_counts"}


class ParseError(ValueError):
    pass


def _add_domain_flags(parser):
    for f in dataclasses.fields(DomainSpec):
        flag = "--domain-" + f.name.replace("_", "-")
        parser.add_argument(flag, dest="domain_" + f.name, default=None, metavar="V[,V]")


def _domain_from_args(args) -> DomainSpec:
    kwargs = {}
    for f in dataclasses.fields(DomainSpec):
        raw = getattr(args, "domain_" + f.name, None)
        if raw is None:
            continue
        parts = [p for p in str(raw).split(",") if p != ""]
        try:
            if f.name in _TUPLE_FIELDS_INT:
                kwargs[f.name] = tuple(int(p) for p in parts)
            elif f.name == "sample_x_min":
                kwargs[f.name] = bool(int(parts[0]))
            elif f.name in ("alpha_max", "full_alloc_prob"):
                kwargs[f.name] = float(parts[0])
            else:
                kwargs[f.name] = tuple(float(p) for p in parts)
        except ValueError as e:
            raise ParseError(f"bad value for --domain-{f.name.replace('_', '-')}: {raw} ({e})")
    return DomainSpec(**kwargs)


def _resolved_config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = v if not isinstance(v, Path) else str(v)
    return out


def _write_manifest(args, extra=None):
    doc = {"subcommand": args.subcommand, "config": _resolved_config(args)}
    if extra:
        doc.update(extra)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    out = getattr(args, "out", None)
    if out:
        Path(str(out) + ".run.json").write_text(text)
    else:
        sys.stdout.write(text)


def _load_problem_file(path) -> EfProblem:
    """One record in the dataset format; label fields optional."""
    try:
        raw = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}")
    line_no = 0
    for i, line in enumerate(raw.splitlines(), start=1):
        if line.strip():
            line_no = i
            break
    if line_no == 0:
        raise ParseError(f"{path}: empty file")
    try:
        obj = json.loads(raw.splitlines()[line_no - 1])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{line_no}: invalid JSON at column {e.colno}: {e.msg}")
    try:
        return datagen.problem_from_obj(obj)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}:{line_no}: bad problem record: {e!r}")


def _floats(s):
    return [float(p) for p in str(s).split(",") if p != ""]


def _problem_from_flags(args) -> EfProblem:
    if args.problem is not None:
        return _load_problem_file(args.problem)
    if args.returns is None or args.vols is None or args.corr is None:
        raise ParseError("give --problem FILE or all of --returns --vols --corr")
    try:
        r = _floats(args.returns)
        n = len(r)
        corr = np.asarray(_floats(args.corr), dtype=np.float64)
        if corr.size != n * n:
            raise ParseError(f"--corr needs {n * n} entries (row-major), got {corr.size}")
        return make_problem(
            returns=r,
            vols=_floats(args.vols),
            corr=corr.reshape(n, n),
            x_min=_floats(args.x_min) if args.x_min else 0.0,
            x_max=_floats(args.x_max) if args.x_max else np.ones(n),
            classes=[int(c) for c in _floats(args.classes)] if args.classes else None,
            zeta_max=_floats(args.zeta_max) if args.zeta_max else (),
            alpha_min=args.alpha_min,
            alpha_max=args.alpha_max,
            v_target=args.v_target,
        )
    except ParseError:
        raise
    except (ValueError, TypeError) as e:
        raise ParseError(f"bad inline problem: {e}")


def _uniform_baseline(problem: EfProblem):
    """Equal raw weights pushed through the feasibility repair."""
    canon = canonicalize(problem)
    c = DgarConstraints.from_problem(canon.problem)
    x = dgar(np.full(problem.n, 1.0 / problem.n), c)
    return restore_order(x, canon.perm)


def _solved_weights(problem, tol, scale):
    res = solve_ef(problem, tol=tol, scale=scale)
    if res.status == INFEASIBLE:
        raise InfeasibleError("instance has no feasible allocation")
    if res.status == NUMERICAL_FAILURE:
        raise NumericalFailureError(f"solver did not converge (kkt={res.kkt_residual:g})")
    return res


def _engine_fn(name: str, tol: float, scale: float):
    """engine selector -> (callable problem -> weights, pretty name)."""
    if name == "exact":
        return (lambda p: _solved_weights(p, tol, scale).allocation.x), "exact"
    if name == "uniform-baseline":
        return _uniform_baseline, "uniform-baseline"
    if name.startswith("surrogate:"):
        from .surrogate import load_weights, predict

        path = name.split(":", 1)[1]
        weights, cfg, layout = load_weights(path)

        def fn(p):
            return predict(p, weights, cfg, layout).x

        return fn, "surrogate"
    raise ParseError(f"unknown engine {name!r}")


def cmd_solve(args) -> int:
    problem = _problem_from_flags(args)
    res = _solved_weights(problem, args.tol, args.scale)
    lines = [
        f"status\t{res.status}",
        f"branch\t{res.branch}",
        f"kkt_residual\t{res.kkt_residual!r}",
        f"qp_iterations\t{res.qp_iterations}",
        f"socp_iterations\t{res.socp_iterations}",
    ]
    x = res.allocation.x
    for i, w in enumerate(x):
        lines.append(f"x[{i}]\t{float(w)!r}")
    lines.append(f"total\t{float(x.sum())!r}")
    lines.append(f"expected_return\t{float(problem.returns @ x)!r}")
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    _write_manifest(args)
    return EXIT_OK


def cmd_gen(args) -> int:
    spec = _domain_from_args(args)
    manifest = datagen.generate(
        spec,
        count=args.count,
        seed=args.seed,
        out=args.out,
        shard_size=args.shard_size,
        disc_eps=args.disc_eps,
        disc_prob=args.disc_prob,
        workers=args.threads,
    )
    _write_manifest(args, extra={"dataset_manifest": manifest})
    return EXIT_OK


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise ParseError(f"cannot read {what} {path}: {e}")
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}: invalid JSON in {what}: {e.msg}")


def cmd_train(args) -> int:
    from .surrogate import EncoderConfig, TokenLayout, TrainConfig, save_weights, train
    from .surrogate.tokens import TokenLayout as _TL

    conf = _read_json(args.config, "config") if args.config else {}
    try:
        cfg = EncoderConfig(**conf.get("encoder", {}))
        layout = _TL(**conf.get("layout", {}))
        tkw = dict(conf.get("train", {}))
        if args.seed is not None:
            tkw["seed"] = args.seed
        tcfg = TrainConfig(**tkw)
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad config: {e}")
    records = list(datagen.read_dataset(args.data))
    weights, history = train(records, cfg, layout, tcfg)
    save_weights(args.out, weights, cfg, layout)
    hist_lines = ["step,loss"]
    for i, loss in enumerate(history["loss"]):
        hist_lines.append(f"{i},{loss!r}")
    hist_lines.append("val_step,val_mae")
    for s, m in zip(history["val_steps"], history["val_mae"]):
        hist_lines.append(f"{s},{m!r}")
    Path(str(args.out) + ".history.csv").write_text("\n".join(hist_lines) + "\n")
    _write_manifest(
        args,
        extra={
            "final_loss": history["loss"][-1] if history["loss"] else None,
            "initial_val_mae": history["initial_val_mae"],
            "final_val_mae": history["val_mae"][-1] if history["val_mae"] else None,
        },
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    fn, label = _engine_fn(args.engine, args.tol, args.scale)
    records = list(datagen.read_dataset(args.data))
    report = evalkit.evaluate(records, fn, ranking_tol=args.ranking_tol, scale=args.scale)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    _write_manifest(args, extra={"engine": label})
    return EXIT_OK


def cmd_sweep(args) -> int:
    problem = _problem_from_flags(args)
    names = [e for e in args.engines.split(",") if e]
    if not names:
        raise ParseError("--engines is empty")
    outputs = {}
    for name in names:
        fn, label = _engine_fn(name, args.tol, args.scale)
        table = evalkit.sweep(problem, args.param, args.lo, args.hi, args.steps, fn)
        csv = table.to_csv()
        if args.out:
            path = f"{args.out}.{label}.csv"
            Path(path).write_text(csv)
            outputs[label] = path
        else:
            sys.stdout.write(f"# engine {label}\n" + csv)
    _write_manifest(args, extra={"tables": outputs})
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = _domain_from_args(args)
    rng = np.random.default_rng(args.seed)
    problems = [datagen.sample_problem(rng, spec) for _ in range(args.count)]
    engines = [e for e in args.engines.split(",") if e]
    kw = {}
    if simkit.ENGINE_SURROGATE in engines:
        if not args.weights:
            raise ParseError("surrogate engine needs --weights")
        from .surrogate import load_weights

        w, cfg, layout = load_weights(args.weights)
        kw = {"surrogate_weights": w, "surrogate_cfg": cfg, "surrogate_layout": layout}
    res = simkit.bench(
        problems,
        engines=engines,
        batch_sizes=[int(b) for b in args.batch_sizes.split(",")],
        worker_counts=[int(wc) for wc in args.workers.split(",")],
        duration=args.duration,
        warmup=args.warmup,
        repeats=args.repeats,
        memory_budget_bytes=args.memory_budget,
        **kw,
    )
    csv = res.to_csv()
    if args.out:
        Path(args.out).write_text(csv)
        Path(str(args.out) + ".summary.json").write_text(
            json.dumps(res.summary(), indent=2, sort_keys=True) + "\n"
        )
    else:
        sys.stdout.write(csv)
    _write_manifest(args)
    return EXIT_OK


_MC_GS = ("return", "vol")


def cmd_mc(args) -> int:
    spec = _domain_from_args(args)
    name = args.g
    if name == "return":

        def g(p):
            res = _solved_weights(p, args.tol, args.scale)
            return float(p.returns @ res.allocation.x)

    elif name == "vol":

        def g(p):
            x = _solved_weights(p, args.tol, args.scale).allocation.x
            from .problems import covariance

            return float(np.sqrt(x @ covariance(p.vols, p.corr) @ x))

    elif name.startswith("weight_"):
        try:
            idx = int(name.split("_", 1)[1])
        except ValueError:
            raise ParseError(f"bad --g {name!r}")

        def g(p):
            x = _solved_weights(p, args.tol, args.scale).allocation.x
            return float(x[idx]) if idx < len(x) else 0.0

    else:
        raise ParseError(f"--g must be one of {_MC_GS} or weight_<i>, got {name!r}")

    t0 = time.perf_counter()
    res = simkit.estimate_expectation(
        lambda r: datagen.sample_problem(r, spec), g, args.n, seed=args.seed
    )
    elapsed = time.perf_counter() - t0
    # wall clock stays out of the primary table so reruns are byte-identical
    body = f"n,estimate,stderr\n{res.n},{res.estimate!r},{res.stderr!r}\n"
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    _write_manifest(args, extra={"elapsed_seconds": elapsed})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="efkit",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--tol", type=float, default=1e-9)
        p.add_argument("--scale", type=float, default=DEFAULT_SCALE)
        p.add_argument("--out", default=None)

    p = sub.add_parser("solve", help="solve one instance exactly")
    common(p)
    p.add_argument("--problem", default=None, help="JSON record file")
    p.add_argument("--returns", default=None)
    p.add_argument("--vols", default=None)
    p.add_argument("--corr", default=None, help="row-major, n*n comma-separated")
    p.add_argument("--x-max", default=None)
    p.add_argument("--x-min", default=None)
    p.add_argument("--classes", default=None)
    p.add_argument("--zeta-max", default=None)
    p.add_argument("--alpha-min", type=float, default=0.0)
    p.add_argument("--alpha-max", type=float, default=1.0)
    p.add_argument("--v-target", type=float, default=0.1)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen", help="generate a labeled dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--shard-size", type=int, default=2048)
    p.add_argument("--disc-eps", type=float, default=1e-3)
    p.add_argument("--disc-prob", type=float, default=0.84)
    _add_domain_flags(p)
    p.set_defaults(func=cmd_gen)
    p.set_defaults(out_required=True)

    p = sub.add_parser("train", help="train the surrogate on a dataset")
    common(p, seed_default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON: encoder/layout/train sections")
    p.set_defaults(func=cmd_train)
    p.set_defaults(out_required=True)

    p = sub.add_parser("eval", help="evaluate an engine against a labeled dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--engine",
        default="exact",
        help="exact | surrogate:WEIGHTS_PATH | uniform-baseline",
    )
    p.add_argument("--ranking-tol", type=float, default=evalkit.RANKING_TOL)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one parameter of one instance")
    common(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--param", required=True, help="e.g. v_target or returns[2]")
    p.add_argument("--lo", type=float, required=True)
    p.add_argument("--hi", type=float, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--engines", default="exact")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="throughput benchmark")
    common(p)
    p.add_argument("--engines", default=simkit.ENGINE_EXACT_SINGLE)
    p.add_argument("--batch-sizes", default="64")
    p.add_argument("--workers", default="1")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--warmup", type=float, default=2.0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--count", type=int, default=256, help="problem stream length")
    p.add_argument("--weights", default=None)
    p.add_argument("--memory-budget", type=int, default=1 << 30)
    _add_domain_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mc", help="Monte Carlo estimate over solver outputs")
    common(p)
    p.add_argument("--g", default="return", help="return | vol | weight_<i>")
    p.add_argument("--n", type=int, required=True)
    _add_domain_flags(p)
    p.set_defaults(func=cmd_mc)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        ap.error(f"{args.subcommand} requires --out")
    try:
        return args.func(args)
    except ParseError as e:
        print(f"efkit: parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleError as e:
        print(f"efkit: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalFailureError as e:
        print(f"efkit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
