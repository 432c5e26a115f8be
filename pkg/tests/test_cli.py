import json

import numpy as np
import pytest

from efkit.cli import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_PARSE,
    main,
)
from efkit.datagen import DatasetRecord, DomainSpec, record_to_obj, sample_problem
from efkit.solver import solve_ef


def run(*argv):
    return main(list(argv))


def write_problem(path, n=2, seed=0, v_target=None):
    rng = np.random.default_rng(seed)
    p = sample_problem(rng, DomainSpec(n_range=(n, n)))
    if v_target is not None:
        p = p.with_fields(v_target=v_target)
    res = solve_ef(p)
    rec = DatasetRecord(p, res.allocation.x, res.branch, res.kkt_residual)
    path.write_text(json.dumps(record_to_obj(rec)) + "\n")
    return p


def test_solve_inline_optimal(capsys):
    code = run(
        "solve",
        "--returns", "0.1,0.05",
        "--vols", "0.2,0.1",
        "--corr", "1,0.3,0.3,1",
        "--v-target", "0.08",
    )
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "status\toptimal" in out
    assert "x[0]" in out and "expected_return" in out
    # run manifest echoes the resolved config
    assert '"subcommand": "solve"' in out


def test_solve_problem_file(tmp_path, capsys):
    f = tmp_path / "p.json"
    write_problem(f, seed=3)
    assert run("solve", "--problem", str(f)) == EXIT_OK
    assert "branch" in capsys.readouterr().out


def test_solve_infeasible_exit_code(capsys):
    code = run(
        "solve",
        "--returns", "0.1,0.05",
        "--vols", "0.2,0.1",
        "--corr", "1,0,0,1",
        "--x-max", "0.3,0.3",
        "--alpha-min", "0.9",
    )
    assert code == EXIT_INFEASIBLE


def test_solve_malformed_file_exit_code(tmp_path, capsys):
    f = tmp_path / "bad.json"
    f.write_text('{"returns": [0.1,\n')
    assert run("solve", "--problem", str(f)) == EXIT_PARSE
    err = capsys.readouterr().err
    assert "bad.json:1" in err  # line diagnostics


def test_solve_missing_fields_exit_code(tmp_path):
    f = tmp_path / "short.json"
    f.write_text('{"returns": [0.1, 0.2]}\n')
    assert run("solve", "--problem", str(f)) == EXIT_PARSE


def test_unknown_flag_usage_error():
    with pytest.raises(SystemExit) as e:
        run("solve", "--does-not-exist", "1")
    assert e.value.code == 2


def test_gen_deterministic_with_manifest(tmp_path):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    args = ["gen", "--count", "24", "--seed", "5", "--domain-n-range", "2,3"]
    assert run(*args, "--out", str(a)) == EXIT_OK
    assert run(*args, "--out", str(b)) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    run_doc = json.loads((tmp_path / "a.jsonl.run.json").read_text())
    assert run_doc["subcommand"] == "gen"
    assert run_doc["config"]["count"] == 24
    assert run_doc["dataset_manifest"]["count"] == 24


def test_gen_requires_out():
    with pytest.raises(SystemExit) as e:
        run("gen", "--count", "4")
    assert e.value.code == 2


def test_eval_exact_engine(tmp_path, capsys):
    ds = tmp_path / "d.jsonl"
    run("gen", "--count", "12", "--seed", "2", "--domain-n-range", "2,2", "--out", str(ds))
    rep = tmp_path / "rep.txt"
    assert run("eval", "--data", str(ds), "--engine", "exact", "--out", str(rep)) == EXIT_OK
    text = rep.read_text()
    assert text.splitlines()[0].startswith("bucket")
    all_line = [l for l in text.splitlines() if l.startswith("all")][0]
    assert "\t0.000e+00" in all_line


def test_eval_uniform_baseline(tmp_path):
    ds = tmp_path / "d.jsonl"
    run("gen", "--count", "8", "--seed", "2", "--domain-n-range", "2,2", "--out", str(ds))
    rep = tmp_path / "rep.txt"
    assert run("eval", "--data", str(ds), "--engine", "uniform-baseline", "--out", str(rep)) == EXIT_OK


def test_train_then_surrogate_eval_and_bench(tmp_path):
    ds = tmp_path / "d.jsonl"
    run("gen", "--count", "48", "--seed", "4", "--domain-n-range", "2,3", "--out", str(ds))
    cfgf = tmp_path / "cfg.json"
    cfgf.write_text(
        json.dumps(
            {
                "encoder": {"token_dim": 16, "depth": 1, "heads": 2, "head_dim": 8, "ff_dim": 32},
                "layout": {"n_max": 3, "class_slots": 3},
                "train": {"steps": 20, "batch_size": 16},
            }
        )
    )
    w = tmp_path / "w.bin"
    assert run("train", "--data", str(ds), "--config", str(cfgf), "--seed", "1", "--out", str(w)) == EXIT_OK
    assert w.exists()
    history = (tmp_path / "w.bin.history.csv").read_text()
    assert history.startswith("step,loss")
    assert "val_step,val_mae" in history

    rep = tmp_path / "rep.txt"
    assert run("eval", "--data", str(ds), "--engine", f"surrogate:{w}", "--out", str(rep)) == EXIT_OK

    bout = tmp_path / "bench.csv"
    code = run(
        "bench",
        "--engines", "exact-single,surrogate",
        "--batch-sizes", "8",
        "--duration", "0.1",
        "--warmup", "0.02",
        "--repeats", "1",
        "--count", "8",
        "--weights", str(w),
        "--domain-n-range", "2,3",
        "--out", str(bout),
    )
    assert code == EXIT_OK
    assert bout.read_text().splitlines()[0].startswith("engine,")
    summary = json.loads((tmp_path / "bench.csv.summary.json").read_text())
    assert "speedup_vs_exact_single" in summary


def test_sweep_writes_table_per_engine(tmp_path):
    f = tmp_path / "p.json"
    write_problem(f, seed=6, v_target=0.5)
    out = tmp_path / "sw"
    code = run(
        "sweep",
        "--problem", str(f),
        "--param", "v_target",
        "--lo", "0.02",
        "--hi", "0.2",
        "--steps", "5",
        "--engines", "exact,uniform-baseline",
        "--out", str(out),
    )
    assert code == EXIT_OK
    exact = (tmp_path / "sw.exact.csv").read_text()
    base = (tmp_path / "sw.uniform-baseline.csv").read_text()
    assert exact.splitlines()[0].startswith("value,")
    # shared grid across engines
    assert [l.split(",")[0] for l in exact.splitlines()[1:]] == [
        l.split(",")[0] for l in base.splitlines()[1:]
    ]


def test_mc_deterministic_output(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    args = ["mc", "--g", "return", "--n", "16", "--seed", "9", "--domain-n-range", "2,2"]
    assert run(*args, "--out", str(a)) == EXIT_OK
    assert run(*args, "--out", str(b)) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "n,estimate,stderr"
    # wall clock lives in the run manifest, not the table
    man = json.loads((tmp_path / "a.csv.run.json").read_text())
    assert "elapsed_seconds" in man


def test_mc_rejects_unknown_g():
    assert run("mc", "--g", "sharpe", "--n", "8") == EXIT_PARSE
