"""Global, multiplicative-window (MW) and additive-window (AW) attention.

The single-head functions take already-shaped ``(..., m, d)`` inputs and stop
at ``weights @ (V W^V)``; :func:`multi_head` splits every projection into
heads, builds per-head boundary scores and masks for windowed variants,
concatenates the heads and applies the output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_constant,
    dropout,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    swap_last,
    transpose,
)
from .windowmask import (
    BoundaryScores,
    MaskMatrix,
    boundary_scores,
    build_structure,
    segment_soft_mask,
    soft_mask,
)

NEG_BIG = -1e9

SITES = ("encoder_self", "decoder_self", "cross")
VARIANTS = ("global", "multiplicative_window", "additive_window")
MASKINGS = ("token", "segment")

_VARIANT_WEIGHTS = {
    "global": ("wq", "wk", "wv"),
    "multiplicative_window": ("wq", "wk", "wv", "wl_q", "wl_k", "wr_q", "wr_k"),
    "additive_window": ("wq_glb", "wk_glb", "wq_loc", "wk_loc", "wv", "wl_q", "wl_k", "wr_q", "wr_k"),
}


class InvalidSiteSpec(ValueError):
    pass


@dataclass(frozen=True)
class AttentionSiteSpec:
    site: str
    variant: str = "global"
    masking: str = "token"
    segment_size: int = 5
    applies_to_layers: frozenset = field(default_factory=lambda: frozenset({1, 2, 3}))

    def __post_init__(self):
        if self.site not in SITES:
            raise InvalidSiteSpec(f"unknown site {self.site!r}; expected one of {SITES}")
        if self.variant not in VARIANTS:
            raise InvalidSiteSpec(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.masking not in MASKINGS:
            raise InvalidSiteSpec(f"unknown masking {self.masking!r}")
        if self.masking == "segment" and self.site == "decoder_self":
            raise InvalidSiteSpec("decoder self-attention cannot use segment masking: "
                                  "an autoregressive decoder cannot point to unfinished segments")
        if self.segment_size < 1:
            raise InvalidSiteSpec(f"segment size must be >= 1, got {self.segment_size}")
        if any(int(i) < 1 for i in self.applies_to_layers):
            raise InvalidSiteSpec("layer indices are 1-based")

    @property
    def windowed(self) -> bool:
        return self.variant != "global"


class AttentionParams:
    """Projection weights for one attention site of one layer."""

    def __init__(self, weights: dict[str, Tensor], variant: str, heads: int):
        missing = [k for k in _VARIANT_WEIGHTS[variant] if k not in weights]
        if missing:
            raise KeyError(f"{variant} attention is missing weights {missing}")
        d = weights["wv"].shape[0]
        if d % heads:
            raise ShapeError(f"model width {d} is not divisible by {heads} heads")
        self.weights = weights
        self.variant = variant
        self.heads = heads
        self.d = d

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]

    def __contains__(self, key: str) -> bool:
        return key in self.weights

    @classmethod
    def init(cls, d: int, heads: int, variant: str, rng: np.random.Generator,
             output: bool = True) -> "AttentionParams":
        names = list(_VARIANT_WEIGHTS[variant]) + (["wo"] if output else [])
        bound = 1.0 / math.sqrt(d)
        w = {k: Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True, name=k) for k in names}
        return cls(w, variant, heads)


def attention_bias(m: int, n: int, causal: bool = False, key_mask: np.ndarray | None = None) -> np.ndarray | None:
    """Additive logit bias: ``NEG_BIG`` on future keys (causal) and padded keys.

    ``key_mask`` is ``(batch, n)`` with True on real tokens.  The result
    broadcasts against ``(batch, heads, m, n)`` scores.
    """
    if not causal and key_mask is None:
        return None
    bias = np.zeros((m, n))
    if causal:
        if m != n:
            raise ShapeError(f"causal attention needs aligned positions, got {m} queries and {n} keys")
        bias[np.triu_indices(n, k=1)] = NEG_BIG
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = bias[None, None, :, :] + np.where(km, 0.0, NEG_BIG)[:, None, None, :]
    return bias


def _scores(q: Tensor, k: Tensor, c: float, bias) -> Tensor:
    s = scale(matmul(q, swap_last(k)), c)
    return add_constant(s, bias) if bias is not None else s


def global_attention(Q: Tensor, K: Tensor, V: Tensor, params: AttentionParams, causal: bool = False,
                     bias=None, trace: dict | None = None) -> Tensor:
    """``softmax((Q Wq)(K Wk)ᵀ / sqrt(d)) (V Wv)`` for one head of width ``d``."""
    _check_inputs(Q, K, V)
    bias = _combine_bias(Q, K, causal, bias)
    q, k, v = matmul(Q, params["wq"]), matmul(K, params["wk"]), matmul(V, params["wv"])
    w = softmax_rows(_scores(q, k, 1.0 / math.sqrt(q.shape[-1]), bias))
    if trace is not None:
        trace.update(attention=w.data, weights=w.data)
    return matmul(w, v)


def multiplicative_window_attention(Q: Tensor, K: Tensor, V: Tensor, params: AttentionParams, M: MaskMatrix,
                                    causal: bool = False, bias=None, trace: dict | None = None) -> Tensor:
    """``(softmax(score) ⊙ M) (V Wv)``; the masked weights are not renormalised."""
    _check_inputs(Q, K, V)
    _check_mask(M, Q, K)
    bias = _combine_bias(Q, K, causal, bias)
    q, k, v = matmul(Q, params["wq"]), matmul(K, params["wk"]), matmul(V, params["wv"])
    s = softmax_rows(_scores(q, k, 1.0 / math.sqrt(q.shape[-1]), bias))
    w = mul(s, M.values)
    if trace is not None:
        trace.update(attention=s.data, mask=M.values.data, weights=w.data)
    return matmul(w, v)


def additive_window_attention(Q: Tensor, K: Tensor, V: Tensor, params: AttentionParams, M: MaskMatrix,
                              causal: bool = False, bias=None, trace: dict | None = None) -> Tensor:
    """``softmax((s_glb + s_loc ⊙ M) / sqrt(d)) (V Wv)``.

    Keys enter the second factor of both score terms so the same code serves
    cross-attention.
    """
    _check_inputs(Q, K, V)
    _check_mask(M, Q, K)
    bias = _combine_bias(Q, K, causal, bias)
    c = 1.0 / math.sqrt(params["wq_glb"].shape[-1])
    s_glb = matmul(matmul(Q, params["wq_glb"]), swap_last(matmul(K, params["wk_glb"])))
    s_loc = mul(matmul(matmul(Q, params["wq_loc"]), swap_last(matmul(K, params["wk_loc"]))), M.values)
    score = scale(add(s_glb, s_loc), c)
    if bias is not None:
        score = add_constant(score, bias)
    w = softmax_rows(score)
    if trace is not None:
        g = scale(s_glb, c) if bias is None else add_constant(scale(s_glb, c), bias)
        trace.update(attention=softmax_rows(g).data, mask=M.values.data, weights=w.data)
    return matmul(w, matmul(V, params["wv"]))


def window_mask(Q: Tensor, K: Tensor, params: AttentionParams, masking: str = "token", segment_size: int = 1,
                causal: bool = False, bias=None) -> MaskMatrix:
    """Boundary scores and soft mask for one head from the layer inputs."""
    bias = _combine_bias(Q, K, causal, bias)
    bs = boundary_scores(Q, K, params["wl_q"], params["wl_k"], params["wr_q"], params["wr_k"], bias=bias)
    if masking == "segment":
        return segment_soft_mask(bs, build_structure(K.shape[-2], segment_size))
    return soft_mask(bs)


def _check_inputs(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"keys ({K.shape}) and values ({V.shape}) differ in length")
    if not (Q.shape[-1] == K.shape[-1] == V.shape[-1]):
        raise ShapeError(f"inconsistent widths {Q.shape}, {K.shape}, {V.shape}")


def _check_mask(M: MaskMatrix, Q: Tensor, K: Tensor) -> None:
    if M.shape[-2:] != (Q.shape[-2], K.shape[-2]):
        raise ShapeError(f"mask {M.shape} does not match {Q.shape[-2]} queries x {K.shape[-2]} keys")


def _combine_bias(Q: Tensor, K: Tensor, causal: bool, bias):
    if causal:
        c = attention_bias(Q.shape[-2], K.shape[-2], causal=True)
        bias = c if bias is None else bias + c
    return bias


# ---------------------------------------------------------------------------
# multi-head


def _split(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = reshape(x, (*lead, t, heads, d // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return transpose(x, axes)


def _merge(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = transpose(x, axes)
    *lead, t, h, dh = x.shape
    return reshape(x, (*lead, t, h * dh))


def multi_head(xq: Tensor, xkv: Tensor, params: AttentionParams, spec: AttentionSiteSpec | None = None,
               causal: bool = False, key_mask: np.ndarray | None = None, trace: dict | None = None,
               dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head attention over ``(batch, length, d)`` inputs.

    Every head gets its own slice of the boundary projections, hence its own
    boundary scores and mask.  ``trace`` (if given) receives per-head numpy
    arrays ``attention``, ``weights`` and, for windowed variants, ``mask``.
    """
    variant = params.variant
    masking = spec.masking if spec is not None else "token"
    seg = spec.segment_size if spec is not None else 1
    if spec is not None and spec.variant != variant:
        raise ValueError(f"site spec asks for {spec.variant} but params are {variant}")
    squeeze = xq.ndim == 2
    if squeeze:
        xq, xkv = reshape(xq, (1, *xq.shape)), reshape(xkv, (1, *xkv.shape))
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    h = params.heads
    m, n = xq.shape[-2], xkv.shape[-2]
    bias = attention_bias(m, n, causal=causal, key_mask=key_mask)
    c = 1.0 / math.sqrt(params.head_dim)
    proj = lambda x, name: _split(matmul(x, params[name]), h)

    M = None
    if variant != "global":
        bs = BoundaryScores(
            _pointer(proj(xq, "wl_q"), proj(xkv, "wl_k"), c, bias),
            _pointer(proj(xq, "wr_q"), proj(xkv, "wr_k"), c, bias),
        )
        M = segment_soft_mask(bs, build_structure(n, seg)) if masking == "segment" else soft_mask(bs)

    if variant == "additive_window":
        s_glb = matmul(proj(xq, "wq_glb"), swap_last(proj(xkv, "wk_glb")))
        s_loc = mul(matmul(proj(xq, "wq_loc"), swap_last(proj(xkv, "wk_loc"))), M.values)
        score = scale(add(s_glb, s_loc), c)
        w = softmax_rows(add_constant(score, bias) if bias is not None else score)
        if trace is not None:
            g = scale(s_glb, c)
            g = add_constant(g, bias) if bias is not None else g
            trace.update(attention=softmax_rows(g).data, mask=M.values.data, weights=w.data)
    else:
        s = softmax_rows(_scores(proj(xq, "wq"), proj(xkv, "wk"), c, bias))
        w = mul(s, M.values) if M is not None else s
        if trace is not None:
            trace.update(attention=s.data, weights=w.data)
            if M is not None:
                trace["mask"] = M.values.data
    w = dropout(w, dropout_p, rng)
    out = matmul(_merge(matmul(w, proj(xkv, "wv"))), params["wo"])
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def _pointer(q: Tensor, k: Tensor, c: float, bias) -> Tensor:
    return softmax_rows(_scores(q, k, c, bias))
