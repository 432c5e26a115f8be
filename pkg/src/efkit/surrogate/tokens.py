"""Feature assembly: one fixed-width token per asset.

Every token carries the asset's own scalars, its class membership, the
instance-wide budget fields, and the asset's correlation row padded to the
layout width. Padding rows are all-zero and flagged off in the mask, so a
single projection matrix serves every problem size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..canonical import CanonicalProblem
from ..problems import NO_CLASS


@dataclass(frozen=True)
class TokenLayout:
    n_max: int = 12
    class_slots: int = 3

    @property
    def feature_width(self) -> int:
        # id, return, vol, cap, floor, class one-hot, class cap,
        # alpha_min, alpha_max, v_target, correlation row
        return 9 + self.class_slots + self.n_max

    def to_dict(self) -> dict:
        return {"n_max": self.n_max, "class_slots": self.class_slots}

    @classmethod
    def from_dict(cls, obj: dict) -> "TokenLayout":
        return cls(n_max=int(obj["n_max"]), class_slots=int(obj["class_slots"]))


def tokenize(canonical: CanonicalProblem, layout: TokenLayout = TokenLayout()):
    """Return (tokens: n x feature_width, mask: n_max).

    Expects a canonicalized instance; equivalent problems then map to
    identical matrices because the ambiguous fields were already rewritten.
    """
    p = canonical.problem
    n = p.n
    if n > layout.n_max:
        raise ValueError(f"{n} assets exceed the layout maximum {layout.n_max}")
    if p.n_classes > layout.class_slots:
        raise ValueError(
            f"{p.n_classes} classes exceed the {layout.class_slots} one-hot slots"
        )

    tokens = np.zeros((n, layout.feature_width))
    # rank feature: n evenly spaced values in [0, 1]
    tokens[:, 0] = np.linspace(0.0, 1.0, n) if n > 1 else 0.0
    tokens[:, 1] = p.returns
    tokens[:, 2] = p.vols
    tokens[:, 3] = p.x_max
    tokens[:, 4] = p.x_min
    for i in range(n):
        c = int(p.classes[i])
        if c != NO_CLASS:
            tokens[i, 5 + c] = 1.0
            tokens[i, 5 + layout.class_slots] = p.zeta_max[c]
    g = 6 + layout.class_slots
    tokens[:, g] = p.alpha_min
    tokens[:, g + 1] = p.alpha_max
    tokens[:, g + 2] = p.v_target
    tokens[:, g + 3 : g + 3 + n] = p.corr

    mask = np.zeros(layout.n_max)
    mask[:n] = 1.0
    return tokens, mask
