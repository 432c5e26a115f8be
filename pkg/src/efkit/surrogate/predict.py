"""End-to-end inference: canonicalize, tokenize, encode, project, un-permute."""

from __future__ import annotations

import numpy as np

from ..canonical import canonicalize, restore_order
from ..dgar import DgarConstraints, dgar
from ..problems import Allocation, EfProblem
from .encoder import EncoderConfig, forward, stack_tokens
from .tokens import TokenLayout, tokenize


def predict(
    problem: EfProblem,
    weights: dict,
    cfg: EncoderConfig,
    layout: TokenLayout = TokenLayout(),
    use_dgar: bool = True,
) -> Allocation:
    return predict_batch([problem], weights, cfg, layout, use_dgar=use_dgar)[0]


def predict_batch(
    problems,
    weights: dict,
    cfg: EncoderConfig,
    layout: TokenLayout = TokenLayout(),
    use_dgar: bool = True,
):
    """Vectorized encoder pass over many problems; projection runs per sample.

    use_dgar=False skips the feasibility projection (ablation mode); raw
    sigmoid outputs then satisfy no constraint beyond (0, 1).
    """
    canonicals = [canonicalize(p) for p in problems]
    pairs = [tokenize(c, layout) for c in canonicals]
    tokens, mask = stack_tokens(pairs, layout)
    out, _ = forward(tokens, mask, weights, cfg)

    allocations = []
    for row, canonical, problem in zip(out, canonicals, problems):
        y = row[: canonical.n]
        if use_dgar:
            cp = canonical.problem
            y = dgar(y, DgarConstraints.from_problem(cp))
        x = restore_order(y, canonical.perm)
        allocations.append(Allocation.from_weights(problem, x))
    return allocations
