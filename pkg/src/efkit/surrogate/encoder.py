"""Bidirectional transformer encoder in plain numpy, with hand-written
gradients.

Architecture, in order: linear projection of the token features, learned
absolute positional embedding, a stack of pre-norm residual blocks (masked
multi-head self-attention, then a swish feed-forward), a final layer norm,
and a per-token linear head squashed through a sigmoid. All math runs in
float64; the container format downcasts to float32 only at save time.

The backward pass mirrors the forward exactly and returns one gradient array
per parameter tensor, keyed by the same names. Padded positions are masked
out of the attention softmax and carry no loss, so nothing flows through
them in either direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokens import TokenLayout

_LN_EPS = 1e-5
_MASK_PENALTY = 1e9


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 320
    depth: int = 8
    heads: int = 8
    head_dim: int = 32
    ff_dim: int = 1024

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        for name in ("token_dim", "heads", "head_dim", "ff_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "token_dim": self.token_dim,
            "depth": self.depth,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "ff_dim": self.ff_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(**{k: int(v) for k, v in obj.items()})


def toy_config() -> EncoderConfig:
    """Desk-scale default used by the training checks."""
    return EncoderConfig(token_dim=32, depth=2, heads=2, head_dim=16, ff_dim=64)


def init_weights(cfg: EncoderConfig, layout: TokenLayout, rng: np.random.Generator) -> dict:
    """Fresh float64 parameter dict; fan-in scaled normals, unit layer norms."""
    d = cfg.token_dim
    inner = cfg.inner_dim
    f = layout.feature_width

    def dense(fan_in, shape):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)

    w = {
        "proj_w": dense(f, (f, d)),
        "proj_b": np.zeros(d),
        "pos": 0.02 * rng.normal(size=(layout.n_max, d)),
        "ln_f_g": np.ones(d),
        "ln_f_b": np.zeros(d),
        "head_w": dense(d, (d, 1)),
        "head_b": np.zeros(1),
    }
    for i in range(cfg.depth):
        w[f"l{i}_ln1_g"] = np.ones(d)
        w[f"l{i}_ln1_b"] = np.zeros(d)
        w[f"l{i}_wq"] = dense(d, (d, inner))
        w[f"l{i}_bq"] = np.zeros(inner)
        # no key bias: softmax is invariant to a uniform key shift, so the
        # tensor would be inert and its gradient identically zero
        w[f"l{i}_wk"] = dense(d, (d, inner))
        w[f"l{i}_wv"] = dense(d, (d, inner))
        w[f"l{i}_bv"] = np.zeros(inner)
        w[f"l{i}_wo"] = dense(inner, (inner, d))
        w[f"l{i}_bo"] = np.zeros(d)
        w[f"l{i}_ln2_g"] = np.ones(d)
        w[f"l{i}_ln2_b"] = np.zeros(d)
        w[f"l{i}_ff1_w"] = dense(d, (d, cfg.ff_dim))
        w[f"l{i}_ff1_b"] = np.zeros(cfg.ff_dim)
        w[f"l{i}_ff2_w"] = dense(cfg.ff_dim, (cfg.ff_dim, d))
        w[f"l{i}_ff2_b"] = np.zeros(d)
    return w


def stack_tokens(pairs, layout: TokenLayout):
    """Pad a list of (tokens, mask) to a (B, n_max, F) batch plus (B, n_max) mask."""
    b = len(pairs)
    tok = np.zeros((b, layout.n_max, layout.feature_width))
    mask = np.zeros((b, layout.n_max))
    for idx, (t, m) in enumerate(pairs):
        tok[idx, : t.shape[0]] = t
        mask[idx] = m
    return tok, mask


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = np.einsum("btd,btd->d", dy, xhat)
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _swish(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def forward(tokens, mask, weights: dict, cfg: EncoderConfig, want_cache: bool = False):
    """Batched encoder pass.

    tokens: (B, n_max, F); mask: (B, n_max) with 1 on real positions.
    Returns (out, cache) where out is (B, n_max) sigmoid activations; entries
    at padded positions are meaningless and must be dropped by the caller.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if tokens.ndim != 3 or mask.shape != tokens.shape[:2]:
        raise ValueError("tokens must be (B, T, F) with a matching (B, T) mask")
    bsz, t, _ = tokens.shape
    d = cfg.token_dim
    h, hd = cfg.heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    # additive key bias: 0 on real positions, -1e9 on padding
    key_bias = (mask[:, None, None, :] - 1.0) * _MASK_PENALTY

    x = tokens @ weights["proj_w"] + weights["proj_b"]
    x = x + weights["pos"][None, :t]
    layers = []
    for i in range(cfg.depth):
        ln1, ln1_cache = _layer_norm(x, weights[f"l{i}_ln1_g"], weights[f"l{i}_ln1_b"])
        q = ln1 @ weights[f"l{i}_wq"] + weights[f"l{i}_bq"]
        k = ln1 @ weights[f"l{i}_wk"]
        v = ln1 @ weights[f"l{i}_wv"] + weights[f"l{i}_bv"]
        qh = q.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        kh = k.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        vh = v.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + key_bias
        scores -= scores.max(-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(-1, keepdims=True)
        ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(bsz, t, h * hd)
        ao = ctx @ weights[f"l{i}_wo"] + weights[f"l{i}_bo"]
        x_att = x + ao

        ln2, ln2_cache = _layer_norm(x_att, weights[f"l{i}_ln2_g"], weights[f"l{i}_ln2_b"])
        f1 = ln2 @ weights[f"l{i}_ff1_w"] + weights[f"l{i}_ff1_b"]
        act, sig = _swish(f1)
        f2 = act @ weights[f"l{i}_ff2_w"] + weights[f"l{i}_ff2_b"]
        x_new = x_att + f2
        if want_cache:
            layers.append((ln1, ln1_cache, qh, kh, vh, att, ctx, x, ln2, ln2_cache, f1, sig, act, x_att))
        x = x_new

    lnf, lnf_cache = _layer_norm(x, weights["ln_f_g"], weights["ln_f_b"])
    logits = (lnf @ weights["head_w"] + weights["head_b"])[..., 0]
    out = 1.0 / (1.0 + np.exp(-logits))
    cache = (tokens, mask, layers, lnf, lnf_cache, out) if want_cache else None
    return out, cache


def backward(d_out, weights: dict, cfg: EncoderConfig, cache) -> dict:
    """Gradients of a scalar loss wrt every parameter, given dLoss/d_out.

    The caller is expected to have zeroed d_out at padded positions.
    """
    tokens, mask, layers, lnf, lnf_cache, out = cache
    bsz, t, _ = tokens.shape
    h, hd = cfg.heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    grads = {}

    dlogits = d_out * out * (1.0 - out)
    grads["head_w"] = np.einsum("btd,bt->d", lnf, dlogits)[:, None]
    grads["head_b"] = np.array([dlogits.sum()])
    dlnf = dlogits[..., None] * weights["head_w"][:, 0]
    dx, grads["ln_f_g"], grads["ln_f_b"] = _layer_norm_back(dlnf, weights["ln_f_g"], lnf_cache)

    for i in reversed(range(cfg.depth)):
        (ln1, ln1_cache, qh, kh, vh, att, ctx, x_in, ln2, ln2_cache, f1, sig, act, x_att) = layers[i]

        # feed-forward branch
        df2 = dx
        grads[f"l{i}_ff2_w"] = np.einsum("btf,btd->fd", act, df2)
        grads[f"l{i}_ff2_b"] = df2.sum(axis=(0, 1))
        dact = df2 @ weights[f"l{i}_ff2_w"].T
        df1 = dact * sig * (1.0 + f1 * (1.0 - sig))
        grads[f"l{i}_ff1_w"] = np.einsum("btd,btf->df", ln2, df1)
        grads[f"l{i}_ff1_b"] = df1.sum(axis=(0, 1))
        dln2 = df1 @ weights[f"l{i}_ff1_w"].T
        dx_att, grads[f"l{i}_ln2_g"], grads[f"l{i}_ln2_b"] = _layer_norm_back(
            dln2, weights[f"l{i}_ln2_g"], ln2_cache
        )
        dx_att = dx_att + dx  # residual

        # attention branch
        dao = dx_att
        grads[f"l{i}_wo"] = np.einsum("bti,btd->id", ctx, dao)
        grads[f"l{i}_bo"] = dao.sum(axis=(0, 1))
        dctx = (dao @ weights[f"l{i}_wo"].T).reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        datt = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(-1, keepdims=True))
        dqh = dscores @ kh * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ qh * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(bsz, t, h * hd)
        dk = dkh.transpose(0, 2, 1, 3).reshape(bsz, t, h * hd)
        dv = dvh.transpose(0, 2, 1, 3).reshape(bsz, t, h * hd)
        grads[f"l{i}_wq"] = np.einsum("btd,bti->di", ln1, dq)
        grads[f"l{i}_bq"] = dq.sum(axis=(0, 1))
        grads[f"l{i}_wk"] = np.einsum("btd,bti->di", ln1, dk)
        grads[f"l{i}_wv"] = np.einsum("btd,bti->di", ln1, dv)
        grads[f"l{i}_bv"] = dv.sum(axis=(0, 1))
        dln1 = dq @ weights[f"l{i}_wq"].T + dk @ weights[f"l{i}_wk"].T + dv @ weights[f"l{i}_wv"].T
        dx_in, grads[f"l{i}_ln1_g"], grads[f"l{i}_ln1_b"] = _layer_norm_back(
            dln1, weights[f"l{i}_ln1_g"], ln1_cache
        )
        dx = dx_in + dx_att  # residual

    grads["pos"] = np.zeros_like(weights["pos"])
    grads["pos"][:t] = dx.sum(axis=0)
    grads["proj_w"] = np.einsum("btf,btd->fd", tokens, dx)
    grads["proj_b"] = dx.sum(axis=(0, 1))
    return grads


def masked_mse(out, target, mask):
    """Mean squared error over real positions; returns (loss, d_out)."""
    count = float(mask.sum())
    if count == 0.0:
        raise ValueError("mask selects no positions")
    diff = (out - target) * mask
    loss = float((diff * diff).sum()) / count
    return loss, 2.0 * diff / count


def gradient_check(
    cfg: EncoderConfig,
    layout: TokenLayout,
    seed: int = 0,
    step: float = 1e-6,
) -> dict:
    """Central-difference check of every parameter tensor.

    Returns {tensor name: max relative error}. Uses a 2-sample batch with one
    padded row so the mask path is exercised.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, layout, rng)
    t = layout.n_max
    tokens = rng.normal(size=(2, t, layout.feature_width))
    mask = np.ones((2, t))
    mask[1, -1] = 0.0
    tokens[1, -1] = 0.0
    target = rng.uniform(size=(2, t))

    def loss_fn():
        out, _ = forward(tokens, mask, weights, cfg)
        return masked_mse(out, target, mask)[0]

    out, cache = forward(tokens, mask, weights, cfg, want_cache=True)
    _, d_out = masked_mse(out, target, mask)
    grads = backward(d_out, weights, cfg, cache)

    errors = {}
    for name, w in weights.items():
        g = grads[name]
        num = np.zeros_like(w)
        flat_w = w.ravel()
        flat_n = num.ravel()
        for j in range(flat_w.size):
            keep = flat_w[j]
            flat_w[j] = keep + step
            hi = loss_fn()
            flat_w[j] = keep - step
            lo = loss_fn()
            flat_w[j] = keep
            flat_n[j] = (hi - lo) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        errors[name] = float(np.max(np.abs(g - num) / denom))
    return errors
