import numpy as np

from efkit.canonical import (
    canonicalize,
    clamp_asset_caps,
    normalize_classes,
    restore_order,
    sort_by_returns,
)
from efkit.problems import NO_CLASS, make_problem


def test_clamp_caps_by_class_cap():
    p = make_problem(
        [0.04, 0.03, 0.02],
        [0.1, 0.1, 0.1],
        np.eye(3),
        x_max=[0.9, 0.9, 0.9],
        classes=[0, 0, -1],
        zeta_max=[0.5],
        alpha_max=0.8,
    )
    q = clamp_asset_caps(p)
    # class members capped by zeta; unclassed assets untouched
    assert np.allclose(q.x_max, [0.5, 0.5, 0.9])


def test_clamp_keeps_box_nonempty():
    p = make_problem(
        [0.04, 0.03],
        [0.1, 0.1],
        np.eye(2),
        x_min=[0.6, 0.0],
        x_max=[0.9, 0.9],
        classes=[0, -1],
        zeta_max=[0.4],
    )
    q = clamp_asset_caps(p)
    assert np.allclose(q.x_max, [0.4, 0.9])
    assert np.allclose(q.x_min, [0.4, 0.0])  # floor pulled down to the new cap


def test_normalize_classes_tightens_degenerate_caps():
    p = make_problem(
        [0.04, 0.03, 0.02],
        [0.1, 0.1, 0.1],
        np.eye(3),
        x_max=[0.6, 1.0, 1.0],
        classes=[0, 1, 1],
        zeta_max=[0.9, 0.7],
    )
    q = normalize_classes(p)
    # singleton class cap collapses onto its member's x_max; membership stays
    assert np.array_equal(q.classes, [0, 1, 1])
    assert np.allclose(q.zeta_max, [0.6, 0.7])


def test_normalize_classes_zeroes_empty_class():
    p = make_problem(
        [0.04, 0.03],
        [0.1, 0.1],
        np.eye(2),
        x_max=[1.0, 1.0],
        classes=[NO_CLASS, 1],
        zeta_max=[0.9, 0.7],
    )
    q = normalize_classes(p)
    assert q.zeta_max[0] == 0.0
    # class 1 is a singleton: cap meets the member's box
    assert q.zeta_max[1] == min(0.7, 1.0)


def test_sort_by_returns_descending_stable():
    p = make_problem(
        [0.01, 0.05, 0.05, 0.02],
        [0.1, 0.2, 0.3, 0.4],
        np.eye(4),
        x_max=[0.1, 0.2, 0.3, 0.4],
    )
    c = sort_by_returns(p)
    assert np.array_equal(c.problem.returns, [0.05, 0.05, 0.02, 0.01])
    # tie keeps original relative order
    assert np.array_equal(c.perm, [1, 2, 3, 0])
    assert np.array_equal(c.problem.vols, [0.2, 0.3, 0.4, 0.1])


def test_restore_order_roundtrip():
    rng = np.random.default_rng(3)
    p = make_problem(
        rng.normal(size=5),
        rng.uniform(0.1, 0.2, 5),
        np.eye(5),
        x_max=np.full(5, 0.9),
    )
    c = canonicalize(p)
    x_c = rng.uniform(size=5)
    x = restore_order(x_c, c.perm)
    # weight assigned to canonical slot j belongs to original asset perm[j]
    for j in range(5):
        assert x[c.perm[j]] == x_c[j]


def test_correlation_rows_permuted_consistently():
    rng = np.random.default_rng(4)
    load = rng.normal(size=(4, 2))
    cov = load @ load.T + np.eye(4)
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    p = make_problem([0.01, 0.04, 0.02, 0.03], [0.1, 0.2, 0.3, 0.4], corr, x_max=np.ones(4))
    c = canonicalize(p)
    perm = c.perm
    assert np.allclose(c.problem.corr, corr[np.ix_(perm, perm)])


def test_canonicalize_idempotent():
    p = make_problem(
        [0.01, 0.05, 0.03],
        [0.1, 0.2, 0.3],
        np.eye(3),
        x_max=[0.9, 0.8, 0.7],
        classes=[0, 0, 1],
        zeta_max=[0.6, 0.9],
        alpha_max=0.95,
    )
    c1 = canonicalize(p)
    c2 = canonicalize(c1.problem)
    assert np.array_equal(c2.perm, np.arange(3))
    for f in ("returns", "vols", "x_max", "x_min", "classes", "zeta_max"):
        assert np.array_equal(getattr(c2.problem, f), getattr(c1.problem, f))
