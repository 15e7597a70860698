"""Finite-difference checks for every differentiable op and for the full model loss."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, gradient_check, gradient_errors
from .model import Batch, ModelConfig, QaModel, qa_loss


def _rand_shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=5):
    return tuple(int(n) for n in rng.integers(lo, hi, size=rng.integers(ndim_lo, ndim_hi + 1)))


def _param(rng, shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # random weights make every output element matter differently
    w = rng.standard_normal(out.shape)
    return ag.sum(out * w)


def _relu_safe(rng, shape):
    # keep inputs away from the kink so central differences are valid
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
    return Tensor(x, requires_grad=True)


def _case(op: str, rng):
    """Returns (f, params) for one random instance of ``op``."""
    if op == "matmul":
        lead = _rand_shape(rng, 0, 2)
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        a = _param(rng, lead + (m, k))
        b = _param(rng, (k, n)) if rng.random() < 0.5 else _param(rng, lead + (k, n))
        w = rng.standard_normal(np.broadcast_shapes(lead + (m, n), lead + (m, n)))
        return (lambda: ag.sum(ag.matmul(a, b) * w)), [a, b]
    if op == "add":
        shape = _rand_shape(rng, 1, 3)
        a = _param(rng, shape)
        b = _param(rng, shape[-1:])  # broadcast over leading dims
        return (lambda: _weighted_sum(a + b, np.random.default_rng(1))), [a, b]
    if op == "relu":
        a = _relu_safe(rng, _rand_shape(rng))
        return (lambda: _weighted_sum(ag.relu(a), np.random.default_rng(2))), [a]
    if op == "gelu":
        a = _param(rng, _rand_shape(rng))
        return (lambda: _weighted_sum(ag.gelu(a), np.random.default_rng(3))), [a]
    if op == "softmax":
        shape = _rand_shape(rng, 1, 3, lo=2)
        axis = int(rng.integers(0, len(shape)))
        a = _param(rng, shape)
        return (lambda: _weighted_sum(ag.softmax(a, axis=axis), np.random.default_rng(4))), [a]
    if op == "layer_norm":
        # width 2 normalizes to +-1 whatever the input, so its input gradient is identically zero
        shape = _rand_shape(rng, 1, 3, lo=3)
        a = _param(rng, shape)
        g = _param(rng, shape[-1:])
        b = _param(rng, shape[-1:])
        return (lambda: _weighted_sum(ag.layer_norm(a, g, b), np.random.default_rng(5))), [a, g, b]
    if op == "embedding":
        v, d = (int(x) for x in rng.integers(2, 6, size=2))
        table = _param(rng, (v, d))
        ids = rng.integers(0, v, size=_rand_shape(rng, 1, 2))
        return (lambda: _weighted_sum(ag.embedding(table, ids), np.random.default_rng(6))), [table]
    if op == "concat":
        lead = _rand_shape(rng, 0, 2)
        a = _param(rng, lead + (int(rng.integers(1, 4)),))
        b = _param(rng, lead + (int(rng.integers(1, 4)),))
        return (lambda: _weighted_sum(ag.concat([a, b], axis=-1), np.random.default_rng(7))), [a, b]
    if op == "dropout":
        a = _param(rng, _rand_shape(rng))
        seed = int(rng.integers(0, 2**31))
        # a fresh RNG per call keeps the mask fixed across perturbations
        return (lambda: _weighted_sum(ag.dropout(a, 0.3, True, ag.DropoutRNG(seed)),
                                      np.random.default_rng(8))), [a]
    if op == "cross_entropy":
        n, c = (int(x) for x in rng.integers(1, 6, size=2))
        a = _param(rng, (n, c))
        t = rng.integers(0, c, size=n)
        return (lambda: ag.sum(ag.cross_entropy(a, t))), [a]
    raise ValueError(op)


OPS = ("matmul", "add", "relu", "gelu", "softmax", "layer_norm", "embedding", "concat", "dropout",
       "cross_entropy")


def op_suite(n_shapes: int = 20, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op over ``n_shapes`` random instances (float64)."""
    rng = np.random.default_rng(seed)
    out = {}
    for op in OPS:
        worst = 0.0
        for _ in range(n_shapes):
            f, params = _case(op, rng)
            worst = max(worst, gradient_check(f, params, step))
        out[op] = worst
    return out


TINY = dict(d_model=8, n_layers=1, n_heads=2, d_ff=32, d_feat=8, max_seq_len=16, dropout=0.0, precision=64)


def tiny_model_case(seed: int = 0, batch: int = 2, vocab_size: int = 20, init_std: float = 0.2,
                    feature_encoding: str = "onehot"):
    """A tiny model plus a random batch with some padding and a no-answer row.

    The default init scale is larger than training init so gradients sit far
    above the ~1e-11 roundoff floor of central differences.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab_size, init_std=init_std, feature_encoding=feature_encoding, **TINY)
    model = QaModel(cfg, seed=seed)
    # non-trivial LN affines and biases so their gradients are exercised generically
    for name, p in model.params.items():
        if name.endswith("bias") or name.endswith("ln.weight"):
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    L = cfg.max_seq_len
    mask = np.zeros((batch, L), dtype=np.int64)
    lens = rng.integers(L // 2, L + 1, size=batch)
    for i, n in enumerate(lens):
        mask[i, :n] = 1
    ids = rng.integers(0, vocab_size, size=(batch, L))
    seg = (np.arange(L)[None, :] >= (lens[:, None] // 2)).astype(np.int64)
    feats = np.stack([
        rng.integers(0, cfg.ner_size, size=(batch, L)),
        rng.integers(0, cfg.pos_size, size=(batch, L)),
        rng.integers(0, cfg.dep_size, size=(batch, L)),
        rng.integers(0, 2, size=(batch, L)),
    ], axis=-1)
    starts = np.array([int(rng.integers(1, n)) for n in lens])
    ends = np.array([int(rng.integers(s, n)) for s, n in zip(starts, lens)])
    starts[-1] = ends[-1] = 0  # no-answer target
    return model, Batch(ids, seg, mask, feats, starts, ends)


def model_check(seed: int = 0, step: float = 1e-5, **kw) -> dict[str, float]:
    """Per-parameter worst relative error of d(qa_loss)/d(param)."""
    model, batch = tiny_model_case(seed, **kw)

    def f():
        s, e = model.forward(batch)
        return qa_loss(s, e, batch.start_positions, batch.end_positions, batch.mask)

    return gradient_errors(f, model.params, step)
