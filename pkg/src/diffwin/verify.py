"""Gradient-check units for the ``gradcheck`` command and the test suite.

Each unit builds a small random problem, wraps it in a scalar function of its
parameters and reports the worst finite-difference relative error.  Units
look primitives up through their modules at call time so a broken rule
patched in by a test is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import model as Mdl
from . import tensor as T
from . import windowmask as W
from .gradcheck import grad_check_detailed

OPS_TOL = 1e-6
MODEL_TOL = 1e-5


@dataclass
class UnitResult:
    name: str
    scope: str
    max_error: float
    threshold: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold

    def as_dict(self) -> dict:
        return {"unit": self.name, "scope": self.scope, "max_rel_error": self.max_error,
                "threshold": self.threshold, "coordinates": self.checked, "pass": self.passed}


def _p(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return T.Tensor(x, requires_grad=True)


# ---------------------------------------------------------------------------
# primitive units: each returns (f, params)


def _unit(builder: Callable[[np.random.Generator], tuple]):
    """Adapt ``builder(rng) -> (forward, params)`` where the read-out is frozen up front."""

    def make(rng):
        fwd, params = builder(rng)
        probe = fwd()
        frozen = T.Tensor(rng.normal(size=probe.shape))
        return (lambda: T.sum_all(T.mul(fwd(), frozen))), params

    return make


@_unit
def u_matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    return (lambda: T.matmul(a, b)), [a, b]


@_unit
def u_matmul_batched(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)
    return (lambda: T.matmul(a, b)), [a, b]


@_unit
def u_matmul_shared(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return (lambda: T.matmul(a, b)), [a, b]


@_unit
def u_add(rng):
    a, b, r = _p(rng, 5), _p(rng, 2, 3, 4), _p(rng, 4)
    c = _p(rng, 2, 3, 4)
    return (lambda: T.concat([T.reshape(T.add(a, a), (5, 1)), T.reshape(T.add(b, r), (24, 1)),
                              T.reshape(T.add(b, c), (24, 1))], axis=0)), [a, b, r, c]


@_unit
def u_mul(rng):
    a, b, r, s = _p(rng, 3), _p(rng, 2, 3, 4), _p(rng, 1, 4), _p(rng, 1)
    c = _p(rng, 3)
    return (lambda: T.concat([T.mul(a, c), T.reshape(T.mul(b, r), (24,)), T.reshape(T.mul(b, s), (24,))])), \
        [a, b, r, s, c]


@_unit
def u_scale(rng):
    a = _p(rng, 2, 3, 2)
    return (lambda: T.scale(a, 0.5)), [a]


@_unit
def u_softmax_rows(rng):
    a, b, c = _p(rng, 6, lo=-3, hi=3), _p(rng, 2, 5, lo=-3, hi=3), _p(rng, 2, 3, 4, lo=-3, hi=3)
    return (lambda: T.concat([T.softmax_rows(a), T.reshape(T.softmax_rows(b), (10,)),
                              T.reshape(T.softmax_rows(c), (24,))])), [a, b, c]


@_unit
def u_relu(rng):
    a = _away_from_zero(rng, 2, 3, 4)
    return (lambda: T.relu(a)), [a]


@_unit
def u_layer_norm(rng):
    a, g, b = _p(rng, 2, 3, 5), _p(rng, 5), _p(rng, 5)
    return (lambda: T.layer_norm(a, g, b)), [a, g, b]


@_unit
def u_embedding_lookup(rng):
    table = _p(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    return (lambda: T.embedding_lookup(table, ids)), [table]


@_unit
def u_cross_entropy(rng):
    z = _p(rng, 2, 4, 5, lo=-2, hi=2)
    t = np.array([[1, 0, 4, 2], [3, 3, 0, 1]])
    return (lambda: T.reshape(T.cross_entropy(z, t, ignore_index=0), (1,))), [z]


@_unit
def u_concat_slice(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    return (lambda: T.slice_axis(T.concat([a, b], axis=0), 1, 5, axis=0)), [a, b]


@_unit
def u_reshape_transpose(rng):
    a = _p(rng, 2, 3, 4)
    return (lambda: T.swap_last(T.transpose(T.reshape(a, (3, 2, 4)), (1, 0, 2)))), [a]


@_unit
def u_cumsum(rng):
    a = _p(rng, 2, 3, 5)
    return (lambda: T.concat([T.cumsum(a), T.cumsum(a, reverse=True)], axis=-1)), [a]


@_unit
def u_gather_last(rng):
    a = _p(rng, 3, 5)
    return (lambda: T.gather_last(a, np.array([1, 1, 4, 0, 4, 4]))), [a]


@_unit
def u_masked_mean(rng):
    a = _p(rng, 2, 4, 3)
    keep = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    return (lambda: T.masked_mean(a, keep)), [a]


def _boundary(rng, m=4, n=6):
    left = _p(rng, m, n, lo=-2, hi=2)
    right = _p(rng, m, n, lo=-2, hi=2)
    return left, right, (lambda: W.BoundaryScores(T.softmax_rows(left), T.softmax_rows(right)))


@_unit
def u_soft_mask(rng):
    left, right, bs = _boundary(rng)
    return (lambda: W.soft_mask(bs()).values), [left, right]


@_unit
def u_segment_soft_mask(rng):
    left, right, bs = _boundary(rng, 3, 7)
    S = W.build_structure(7, 3)
    return (lambda: W.segment_soft_mask(bs(), S).values), [left, right]


# ---------------------------------------------------------------------------
# attention units


def _attn_setup(rng, variant, m=4, n=5, d=6, heads=1):
    params = A.AttentionParams.init(d, heads, variant, rng)
    Q, K, V = _p(rng, m, d), _p(rng, n, d), _p(rng, n, d)
    return params, Q, K, V


@_unit
def u_boundary_scores(rng):
    params, Q, K, _ = _attn_setup(rng, "multiplicative_window")
    ws = [params[k] for k in ("wl_q", "wl_k", "wr_q", "wr_k")]

    def f():
        bs = W.boundary_scores(Q, K, *ws)
        return T.concat([bs.phi_left, bs.phi_right], axis=-1)

    return f, [Q, K, *ws]


@_unit
def u_global_attention(rng):
    params, Q, K, V = _attn_setup(rng, "global")
    return (lambda: A.global_attention(Q, K, V, params)), [Q, K, V, params["wq"], params["wk"], params["wv"]]


@_unit
def u_global_attention_causal(rng):
    params, Q, K, V = _attn_setup(rng, "global", m=5, n=5)
    return (lambda: A.global_attention(Q, K, V, params, causal=True)), [Q, K, V, params["wq"], params["wk"]]


def _windowed(rng, variant, masking="token", causal=False, m=4, n=5):
    params, Q, K, V = _attn_setup(rng, variant, m=m, n=n)

    def f():
        M = A.window_mask(Q, K, params, masking=masking, segment_size=2, causal=causal)
        fn = A.multiplicative_window_attention if variant == "multiplicative_window" else A.additive_window_attention
        return fn(Q, K, V, params, M, causal=causal)

    return f, [Q, K, V] + [params[k] for k in params.weights if k != "wo"]


@_unit
def u_mw_attention(rng):
    return _windowed(rng, "multiplicative_window")


@_unit
def u_mw_attention_causal(rng):
    return _windowed(rng, "multiplicative_window", causal=True, m=5, n=5)


@_unit
def u_aw_attention(rng):
    return _windowed(rng, "additive_window")


@_unit
def u_aw_attention_segment(rng):
    return _windowed(rng, "additive_window", masking="segment")


def _mh(rng, variant, masking="token", causal=False):
    d, heads = 8, 2
    params = A.AttentionParams.init(d, heads, variant, rng)
    x = _p(rng, 2, 5, d)
    mem = _p(rng, 2, 6, d)
    keep = np.array([[1, 1, 1, 1, 1, 1], [1, 1, 1, 1, 0, 0]], dtype=bool)
    spec = A.AttentionSiteSpec(site="decoder_self" if causal else "cross", variant=variant, masking=masking,
                               segment_size=2)
    if causal:
        return (lambda: A.multi_head(x, x, params, spec, causal=True)), [x] + list(params.weights.values())
    return (lambda: A.multi_head(x, mem, params, spec, key_mask=keep)), [x, mem] + list(params.weights.values())


@_unit
def u_multi_head_global(rng):
    return _mh(rng, "global")


@_unit
def u_multi_head_mw_causal(rng):
    return _mh(rng, "multiplicative_window", causal=True)


@_unit
def u_multi_head_aw_segment(rng):
    return _mh(rng, "additive_window", masking="segment")


OPS_UNITS = {
    "matmul": u_matmul,
    "matmul_batched": u_matmul_batched,
    "matmul_shared": u_matmul_shared,
    "add": u_add,
    "mul": u_mul,
    "scale": u_scale,
    "softmax_rows": u_softmax_rows,
    "relu": u_relu,
    "layer_norm": u_layer_norm,
    "embedding_lookup": u_embedding_lookup,
    "cross_entropy": u_cross_entropy,
    "concat_slice": u_concat_slice,
    "reshape_transpose": u_reshape_transpose,
    "cumsum": u_cumsum,
    "gather_last": u_gather_last,
    "masked_mean": u_masked_mean,
    "soft_mask": u_soft_mask,
    "segment_soft_mask": u_segment_soft_mask,
}

ATTENTION_UNITS = {
    "boundary_scores": u_boundary_scores,
    "soft_mask": u_soft_mask,
    "segment_soft_mask": u_segment_soft_mask,
    "global_attention": u_global_attention,
    "global_attention_causal": u_global_attention_causal,
    "mw_attention": u_mw_attention,
    "mw_attention_causal": u_mw_attention_causal,
    "aw_attention": u_aw_attention,
    "aw_attention_segment": u_aw_attention_segment,
    "multi_head_global": u_multi_head_global,
    "multi_head_mw_causal": u_multi_head_mw_causal,
    "multi_head_aw_segment": u_multi_head_aw_segment,
}


# ---------------------------------------------------------------------------
# whole-model units (sampled coordinates)


def model_unit(kind: str, fraction: float = 0.01, seed: int = 0, tiny: bool = True):
    """Loss of a tiny model on a fixed small batch, checked on ``fraction`` of every parameter."""
    rng = np.random.default_rng(seed)
    if kind == "seq2seq":
        cfg = Mdl.tiny_seq2seq(12, "Enc(AW)-Cr(AW,Seg)-Dec(MW)", segment_size=2, max_positions=16)
        src = np.array([[3, 4, 5, 6], [8, 9, 10, 0]])
        tgt_in = np.array([[1, 3, 4, 5, 6], [1, 8, 9, 10, 0]])
        tgt_out = np.array([[3, 4, 5, 6, 2], [8, 9, 10, 2, 0]])
        fwd = lambda m: T.cross_entropy(Mdl.forward_seq2seq(m, src, tgt_in), tgt_out, ignore_index=0)
    elif kind == "classifier":
        cfg = Mdl.tiny_classifier(20, sites="Enc(AW)", max_positions=16)
        ids = np.array([[3, 9, 14, 5, 17], [4, 12, 7, 0, 0]])
        fwd = lambda m: T.cross_entropy(Mdl.forward_classify(m, ids), np.array([1, 0]))
    elif kind == "lm":
        cfg = Mdl.tiny_lm(15, "Dec(MW)", max_positions=16)
        ids = np.array([[3, 4, 5, 6, 7, 8], [9, 10, 11, 12, 13, 14]])
        fwd = lambda m: T.cross_entropy(Mdl.forward_lm(m, ids[:, :-1]), ids[:, 1:])
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    model = Mdl.build(cfg, seed=seed)
    # move weights off their tiny init so every branch carries signal
    for p in model.parameters():
        p.data += rng.normal(scale=0.05, size=p.shape)
    return (lambda: fwd(model)), model.parameters(), fraction, rng


def run_unit(name: str, scope: str, make, seed: int = 0) -> UnitResult:
    rng = np.random.default_rng(seed)
    f, params = make(rng)
    res = grad_check_detailed(f, params)
    return UnitResult(name, scope, res.max_error, OPS_TOL, res.checked)


def run_model_unit(kind: str, fraction: float = 0.01, seed: int = 0) -> UnitResult:
    f, params, fraction, rng = model_unit(kind, fraction, seed)
    res = grad_check_detailed(f, params, fraction=fraction, rng=rng)
    return UnitResult(f"model_{kind}", "model", res.max_error, MODEL_TOL, res.checked)


def run_scope(scope: str, seed: int = 0, fraction: float = 0.01) -> list[UnitResult]:
    if scope == "ops":
        return [run_unit(n, scope, u, seed) for n, u in OPS_UNITS.items()]
    if scope == "attention":
        return [run_unit(n, scope, u, seed) for n, u in ATTENTION_UNITS.items()]
    if scope == "model":
        return [run_model_unit(k, fraction, seed) for k in ("classifier", "lm", "seq2seq")]
    raise ValueError(f"unknown gradcheck scope {scope!r}")
