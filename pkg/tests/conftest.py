import numpy as np
import pytest

from efkit.problems import make_problem


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_feasible_problem(rng, n=None, full=True):
    """Small random instance; caps drawn wide enough to stay feasible."""
    if n is None:
        n = int(rng.integers(2, 5))
    vols = rng.uniform(0.005, 0.05, n)
    load = rng.normal(size=(n, 2))
    cov = load @ load.T + np.diag(rng.uniform(0.5, 2.0, n))
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    m = int(rng.integers(0, 3))
    classes = np.full(n, -1)
    zeta = []
    if m:
        classes = rng.integers(-1, m, n)
        for j in range(m):
            if not (classes == j).any():
                classes[int(rng.integers(0, n))] = j
        zeta = rng.uniform(0.5, 1.0, m)
    if full:
        amin = amax = 1.0
        x_max = rng.uniform(0.6, 1.0, n)
    else:
        amin = float(rng.uniform(0.4, 0.8))
        amax = 1.0
        x_max = rng.uniform(0.4, 1.0, n)
    return make_problem(
        rng.uniform(-0.02, 0.06, n),
        vols,
        corr,
        x_max=x_max,
        classes=classes,
        zeta_max=zeta,
        alpha_min=amin,
        alpha_max=amax,
        v_target=float(rng.uniform(0.005, 0.06)),
    )
