"""Solve a single allocation problem and inspect both optimizer branches.

The solver picks its branch from the volatility target: a tight target
pins the portfolio at the attainable variance floor (min_variance), a
loose one frees it to chase expected return until the budget binds
(max_return).
"""

import numpy as np

from efkit import make_problem, solve_ef

corr = np.array(
    [
        [1.00, 0.35, 0.10],
        [0.35, 1.00, -0.20],
        [0.10, -0.20, 1.00],
    ]
)

for v_target in (0.02, 0.25):
    p = make_problem(
        returns=[0.08, 0.05, 0.03],
        vols=[0.30, 0.22, 0.15],
        corr=corr,
        x_max=[0.6, 0.6, 0.6],
        alpha_min=1.0,  # fully invested
        alpha_max=1.0,
        v_target=v_target,
    )
    res = solve_ef(p)
    a = res.allocation
    print(f"v_target {v_target:.2f} -> branch {res.branch}")
    print(f"  weights        {np.round(a.x, 4)}")
    print(f"  exp. return    {a.achieved_return:.4f}")
    print(f"  volatility     {a.achieved_vol:.4f}")
    print(f"  kkt residual   {res.kkt_residual:.2e}")
