import json

import numpy as np
import pytest

from efkit.datagen import (
    ASSET_COUNT_PCT,
    DomainSpec,
    DatasetRecord,
    generate,
    manifest_path,
    problem_from_obj,
    read_dataset,
    read_manifest,
    record_from_obj,
    record_to_obj,
    sample_correlation,
    sample_problem,
    target_discontinuities,
)
from efkit.problems import make_problem


def test_asset_count_table_sums_to_100():
    assert sum(ASSET_COUNT_PCT.values()) == pytest.approx(100.0, abs=1e-12)
    assert set(ASSET_COUNT_PCT) == set(range(2, 13))


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(n_range=(5, 2))
    with pytest.raises(ValueError):
        DomainSpec(v_target=(0.2, 0.1))


def test_weights_renormalize_over_restricted_range():
    spec = DomainSpec(n_range=(2, 3))
    counts, weights = spec.asset_count_weights()
    assert list(counts) == [2, 3]
    assert weights.sum() == pytest.approx(1.0)
    want = ASSET_COUNT_PCT[2] / (ASSET_COUNT_PCT[2] + ASSET_COUNT_PCT[3])
    assert weights[0] == pytest.approx(want)


def test_sample_correlation_is_psd_unit_diagonal():
    rng = np.random.default_rng(0)
    for n in (1, 2, 5, 12):
        c = sample_correlation(rng, n)
        assert c.shape == (n, n)
        assert np.allclose(np.diag(c), 1.0)
        assert np.abs(c).max() <= 1.0 + 1e-12
        assert np.linalg.eigvalsh(c).min() > -1e-10


def test_sampled_problems_live_in_domain():
    rng = np.random.default_rng(1)
    spec = DomainSpec()
    for _ in range(200):
        p = sample_problem(rng, spec)
        assert spec.n_range[0] <= p.n <= spec.n_range[1]
        assert (p.returns >= spec.returns[0]).all() and (p.returns <= spec.returns[1]).all()
        assert (p.vols >= spec.vols[0]).all() and (p.vols <= spec.vols[1]).all()
        assert spec.v_target[0] <= p.v_target <= spec.v_target[1]
        assert (p.x_max >= spec.x_max[0]).all() and (p.x_max <= spec.x_max[1]).all()
        assert p.alpha_max == 1.0
        assert p.n_classes in (0, 1, 2)
        if p.alpha_min != 1.0:
            assert spec.alpha_min[0] <= p.alpha_min <= spec.alpha_min[1]
        if p.n_classes:
            assert (p.zeta_max >= spec.zeta_max[0]).all()
            assert (p.zeta_max <= spec.zeta_max[1]).all()


def test_discontinuity_targeting_moves_a_pair_close():
    rng = np.random.default_rng(2)
    spec = DomainSpec(n_range=(3, 3))
    hits = 0
    total = 400
    for _ in range(total):
        p = sample_problem(rng, spec)
        q = target_discontinuities(p, rng, eps=1e-3, prob=1.0)
        dr = np.abs(q.returns[:, None] - q.returns[None, :]) + np.eye(3)
        dv = np.abs(q.vols[:, None] - q.vols[None, :]) + np.eye(3)
        if min(dr.min(), dv.min()) <= 1e-3:
            hits += 1
    assert hits == total  # prob=1 always plants one near-tie


def test_record_roundtrip_preserves_everything():
    p = make_problem(
        [0.03, 0.01],
        [0.4, 0.2],
        np.array([[1.0, 0.25], [0.25, 1.0]]),
        x_max=[0.9, 0.8],
        classes=[0, 0],
        zeta_max=[0.95],
        alpha_min=0.7,
        v_target=0.12,
    )
    rec = DatasetRecord(p, np.array([0.55, 0.25]), "max_return", 3e-9)
    obj = json.loads(json.dumps(record_to_obj(rec)))
    back = record_from_obj(obj)
    assert np.array_equal(back.problem.returns, p.returns)
    assert np.array_equal(back.problem.corr, p.corr)
    assert np.array_equal(back.allocation, rec.allocation)
    assert back.branch == "max_return"
    assert back.kkt_residual == 3e-9


def test_problem_from_obj_ignores_missing_labels():
    p = make_problem([0.03, 0.01], [0.4, 0.2], np.eye(2), x_max=[0.9, 0.8])
    obj = record_to_obj(DatasetRecord(p, np.zeros(2), "max_return", 0.0))
    del obj["allocation"], obj["branch"], obj["kkt_residual"]
    q = problem_from_obj(obj)
    assert np.array_equal(q.returns, p.returns)


def test_generate_is_deterministic_and_labels_verify(tmp_path):
    spec = DomainSpec(n_range=(2, 3))
    out1 = tmp_path / "a.jsonl"
    out2 = tmp_path / "b.jsonl"
    m1 = generate(spec, 64, seed=5, out=out1)
    m2 = generate(spec, 64, seed=5, out=out2)
    assert out1.read_bytes() == out2.read_bytes()
    assert manifest_path(out1).read_bytes() == manifest_path(out2).read_bytes()
    assert m1 == m2
    assert m1["count"] == 64

    from efkit.solver import solve_ef

    recs = list(read_dataset(out1))
    assert len(recs) == 64
    for rec in recs[:8]:
        res = solve_ef(rec.problem)
        assert res.ok
        assert np.allclose(res.allocation.x, rec.allocation, atol=1e-7)
        assert res.branch == rec.branch


def test_manifest_readable_and_timestamp_free(tmp_path):
    out = tmp_path / "d.jsonl"
    generate(DomainSpec(n_range=(2, 2)), 16, seed=9, out=out)
    man = read_manifest(out)
    assert man["format"] == "efkit-dataset-1"
    assert man["seed"] == 9
    blob = manifest_path(out).read_text().lower()
    assert "time" not in blob and "date" not in blob


def test_shard_seeding_makes_prefix_stable(tmp_path):
    # same seed, larger count: the first records coincide shard by shard
    spec = DomainSpec(n_range=(2, 2))
    small = tmp_path / "s.jsonl"
    big = tmp_path / "g.jsonl"
    generate(spec, 32, seed=3, out=small, shard_size=16)
    generate(spec, 64, seed=3, out=big, shard_size=16)
    with open(small) as f:
        head_small = [next(f) for _ in range(32)]
    with open(big) as f:
        head_big = [next(f) for _ in range(32)]
    assert head_small == head_big
