"""Gradient training of the encoder on exact-solver labels.

The loss is mean squared error between the model's canonical-order output
(after the feasibility projection, when enabled) and the exact allocation,
averaged over real token positions. Optimization is decoupled-weight-decay
Adam with a linearly annealed learning rate. Everything is driven by one
seeded generator, so a fixed (data, config, seed) triple reproduces the loss
trajectory bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..canonical import canonicalize
from ..dgar import DgarConstraints, dgar, dgar_with_vjp
from .encoder import EncoderConfig, backward, forward, init_weights
from .tokens import TokenLayout, tokenize


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr_start: float = 5.5e-5  # published schedule endpoints
    lr_end: float = 1.0e-6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_dgar: bool = True
    val_fraction: float = 0.1


class _Prepared:
    """Dataset tensors in canonical order, ready for batching."""

    def __init__(self, records, layout: TokenLayout):
        if not records:
            raise ValueError("empty dataset")
        n = len(records)
        self.tokens = np.zeros((n, layout.n_max, layout.feature_width))
        self.mask = np.zeros((n, layout.n_max))
        self.target = np.zeros((n, layout.n_max))
        self.bounds = []
        for idx, rec in enumerate(records):
            canonical = canonicalize(rec.problem)
            tok, msk = tokenize(canonical, layout)
            k = canonical.n
            self.tokens[idx, :k] = tok
            self.mask[idx] = msk
            # allocation is stored in original order; perm maps it here
            self.target[idx, :k] = np.asarray(rec.allocation)[canonical.perm]
            self.bounds.append(DgarConstraints.from_problem(canonical.problem))

    def __len__(self):
        return self.tokens.shape[0]


def _project_batch(raw, mask, bounds_list, idx, want_grad):
    """Apply the projection row by row; returns (projected, pullbacks)."""
    proj = np.array(raw)
    pulls = [None] * raw.shape[0]
    for row, sample in enumerate(idx):
        k = int(mask[row].sum())
        c = bounds_list[sample]
        if want_grad:
            y, pull = dgar_with_vjp(raw[row, :k], c)
            pulls[row] = pull
        else:
            y = dgar(raw[row, :k], c)
        proj[row, :k] = y
    return proj, pulls


def evaluate_mae(records, weights, cfg, layout, use_dgar=True, batch_size=256):
    """Mean absolute error against stored labels, canonical order."""
    data = records if hasattr(records, "tokens") else _Prepared(records, layout)
    total = 0.0
    count = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        tok = data.tokens[idx]
        msk = data.mask[idx]
        out, _ = forward(tok, msk, weights, cfg)
        if use_dgar:
            out, _ = _project_batch(out, msk, data.bounds, idx, want_grad=False)
        diff = np.abs(out - data.target[idx]) * msk
        total += float(diff.sum())
        count += float(msk.sum())
    return total / count


def violation_rate(records, weights, cfg, layout, use_dgar=True, tol=1e-9):
    """Fraction of records whose prediction breaks box or total-band bounds."""
    data = records if hasattr(records, "tokens") else _Prepared(records, layout)
    bad = 0
    for start in range(0, len(data), 256):
        idx = np.arange(start, min(start + 256, len(data)))
        out, _ = forward(data.tokens[idx], data.mask[idx], weights, cfg)
        if use_dgar:
            out, _ = _project_batch(out, data.mask[idx], data.bounds, idx, want_grad=False)
        for row, sample in enumerate(idx):
            k = int(data.mask[sample].sum())
            y = out[row, :k]
            c = data.bounds[sample]
            total = float(np.sum(y))
            box_ok = bool(np.all(y >= c.x_min - tol) and np.all(y <= c.x_max + tol))
            band_ok = (total >= c.alpha_min - tol) and (total <= c.alpha_max + tol)
            if not (box_ok and band_ok):
                bad += 1
    return bad / len(data)


def train(records, cfg: EncoderConfig, layout: TokenLayout, tcfg: TrainConfig):
    """Returns (weights, history) where history tracks loss and held-out MAE.

    history = {"loss": per-step training loss,
               "val_steps": steps at which the held-out MAE was measured,
               "val_mae": those measurements,
               "initial_val_mae": the untrained baseline}
    """
    rng = np.random.default_rng(tcfg.seed)
    data = _Prepared(records, layout)
    n = len(data)
    order = rng.permutation(n)
    n_val = int(round(n * tcfg.val_fraction))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if train_idx.size == 0:
        raise ValueError("no training samples after the validation split")

    weights = init_weights(cfg, layout, rng)
    m_state = {k: np.zeros_like(v) for k, v in weights.items()}
    v_state = {k: np.zeros_like(v) for k, v in weights.items()}

    val = _Slice(data, val_idx) if n_val else None
    history = {"loss": [], "val_steps": [], "val_mae": [], "initial_val_mae": None}
    if val is not None:
        history["initial_val_mae"] = evaluate_mae(val, weights, cfg, layout, tcfg.use_dgar)

    cursor = 0
    epoch_perm = rng.permutation(train_idx)
    span = max(tcfg.steps - 1, 1)
    for step in range(tcfg.steps):
        take = min(tcfg.batch_size, train_idx.size)
        if cursor + take > epoch_perm.size:
            epoch_perm = rng.permutation(train_idx)
            cursor = 0
            if val is not None:
                history["val_steps"].append(step)
                history["val_mae"].append(evaluate_mae(val, weights, cfg, layout, tcfg.use_dgar))
        idx = epoch_perm[cursor : cursor + take]
        cursor += take

        tok = data.tokens[idx]
        msk = data.mask[idx]
        tgt = data.target[idx]
        out, cache = forward(tok, msk, weights, cfg, want_cache=True)
        if tcfg.use_dgar:
            proj, pulls = _project_batch(out, msk, data.bounds, idx, want_grad=True)
        else:
            proj, pulls = out, None

        count = float(msk.sum())
        diff = (proj - tgt) * msk
        loss = float((diff * diff).sum()) / count
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at step {step}: check learning rate and data scaling"
            )
        history["loss"].append(loss)

        d_proj = 2.0 * diff / count
        if tcfg.use_dgar:
            d_out = np.zeros_like(out)
            for row in range(len(idx)):
                k = int(msk[row].sum())
                d_out[row, :k] = pulls[row](d_proj[row, :k])
        else:
            d_out = d_proj
        grads = backward(d_out, weights, cfg, cache)

        frac = step / span
        lr = tcfg.lr_start + (tcfg.lr_end - tcfg.lr_start) * frac
        bc1 = 1.0 - tcfg.beta1 ** (step + 1)
        bc2 = 1.0 - tcfg.beta2 ** (step + 1)
        for key, w in weights.items():
            g = grads[key]
            m_state[key] = tcfg.beta1 * m_state[key] + (1.0 - tcfg.beta1) * g
            v_state[key] = tcfg.beta2 * v_state[key] + (1.0 - tcfg.beta2) * (g * g)
            m_hat = m_state[key] / bc1
            v_hat = v_state[key] / bc2
            w -= lr * (m_hat / (np.sqrt(v_hat) + tcfg.eps) + tcfg.weight_decay * w)

    if val is not None:
        history["val_steps"].append(tcfg.steps)
        history["val_mae"].append(evaluate_mae(val, weights, cfg, layout, tcfg.use_dgar))
    return weights, history


class _Slice:
    """View of a _Prepared dataset restricted to an index subset."""

    def __init__(self, data: _Prepared, idx):
        self.tokens = data.tokens[idx]
        self.mask = data.mask[idx]
        self.target = data.target[idx]
        self.bounds = [data.bounds[i] for i in idx]

    def __len__(self):
        return self.tokens.shape[0]
