"""Window masks over key positions: discrete, trainable soft, and segment-based.

Positions are 1-based in the public helpers that take explicit boundaries
(``discrete_mask``); tensors are indexed 0-based as usual.  All soft-mask
functions accept arbitrary leading batch axes, the last axis running over
key positions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_constant,
    cumsum,
    gather_last,
    matmul,
    mul,
    scale,
    softmax_rows,
    swap_last,
)

MODES = ("discrete", "soft_token", "soft_segment")


@dataclass(frozen=True)
class StructureMatrices:
    """Upper-triangular ``L`` and segment block matrix ``J`` for one length."""

    n: int
    b: int
    L: np.ndarray
    J: np.ndarray
    segment_end: np.ndarray  # 0-based last position of the segment holding each position
    segment_start: np.ndarray  # 0-based first position of that segment


@lru_cache(maxsize=256)
def build_structure(n: int, b: int = 1) -> StructureMatrices:
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if b < 1:
        raise ValueError(f"segment size must be >= 1, got {b}")
    b = min(b, n)
    i = np.arange(1, n + 1)[:, None]
    j = np.arange(1, n + 1)[None, :]
    L = (i <= j).astype(np.float64)
    seg_right = b * np.ceil(j / b)
    J = (i <= seg_right).astype(np.float64)
    pos = np.arange(1, n + 1)
    blocks = np.ceil(pos / b).astype(np.intp)
    end = np.minimum(b * blocks, n) - 1
    start = b * (blocks - 1)
    for arr in (L, J, end, start):
        arr.setflags(write=False)
    return StructureMatrices(n=n, b=b, L=L, J=J, segment_end=end, segment_start=start)


@dataclass
class BoundaryScores:
    """Left/right boundary distributions, one row per query over key positions."""

    phi_left: Tensor
    phi_right: Tensor

    def __post_init__(self):
        if self.phi_left.shape != self.phi_right.shape:
            raise ShapeError(f"left {self.phi_left.shape} and right {self.phi_right.shape} scores differ")

    @classmethod
    def from_arrays(cls, left, right, requires_grad: bool = False) -> "BoundaryScores":
        return cls(Tensor(left, requires_grad=requires_grad), Tensor(right, requires_grad=requires_grad))

    def validate(self, atol: float = 1e-9) -> None:
        for name, t in (("phi_left", self.phi_left), ("phi_right", self.phi_right)):
            if (t.data < 0).any() or not np.allclose(t.data.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
                raise ValueError(f"{name} rows are not probability distributions")

    @property
    def n(self) -> int:
        return self.phi_left.shape[-1]


@dataclass
class MaskMatrix:
    values: Tensor
    mode: str
    segment_size: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")

    @property
    def shape(self):
        return self.values.shape


def discrete_mask(l: int, r: int, n: int) -> np.ndarray:
    """Hard window row for 1-based boundaries ``l``, ``r``.

    Evaluated as the product of the rightward vector (one-hot at ``l`` times
    ``L``) and the leftward vector (one-hot at ``r`` times ``L``ᵀ), so
    ``l > r`` gives an all-zero row.
    """
    if not (1 <= l <= n and 1 <= r <= n):
        raise IndexError(f"boundaries ({l}, {r}) outside 1..{n}")
    S = build_structure(n)
    phi_l = np.zeros(n)
    phi_l[l - 1] = 1.0
    phi_r = np.zeros(n)
    phi_r[r - 1] = 1.0
    return (phi_l @ S.L) * (phi_r @ S.L.T)


def boundary_scores(Q: Tensor, K: Tensor, w_left_q: Tensor, w_left_k: Tensor, w_right_q: Tensor,
                    w_right_k: Tensor, bias: np.ndarray | None = None) -> BoundaryScores:
    """Pointer-style left/right boundary distributions for every query.

    ``bias`` is an optional additive constant on the logits (causal or padding
    masks) broadcasting to ``(..., m, n)``.  The scale uses the projected
    width, so shapes depend on the model width only, never on ``n``.
    """
    for w in (w_left_q, w_left_k, w_right_q, w_right_k):
        if w.shape[0] != Q.shape[-1] or w.shape != w_left_q.shape:
            raise ShapeError(f"boundary weight {w.shape} does not fit inputs of width {Q.shape[-1]}")
    if K.shape[-1] != Q.shape[-1]:
        raise ShapeError(f"query width {Q.shape[-1]} differs from key width {K.shape[-1]}")
    c = 1.0 / math.sqrt(w_left_q.shape[-1])

    def pointer(wq, wk):
        logits = scale(matmul(matmul(Q, wq), swap_last(matmul(K, wk))), c)
        if bias is not None:
            logits = add_constant(logits, bias)
        return softmax_rows(logits)

    return BoundaryScores(pointer(w_left_q, w_left_k), pointer(w_right_q, w_right_k))


def _two_term(fl: Tensor, gl: Tensor, fr: Tensor, gr: Tensor) -> Tensor:
    return add(mul(fl, gr), mul(fr, gl))


def soft_mask(bs: BoundaryScores, S: StructureMatrices | None = None) -> MaskMatrix:
    """Expected discrete mask under independent left/right boundary draws.

    ``phiᵀL`` is a prefix sum and ``phiᵀLᵀ`` a suffix sum, so both are taken
    as scans rather than matrix products.
    """
    if S is not None and S.n != bs.n:
        raise ShapeError(f"structure for n={S.n} used with {bs.n} key positions")
    pl, pr = bs.phi_left, bs.phi_right
    m = _two_term(cumsum(pl), cumsum(pl, reverse=True), cumsum(pr), cumsum(pr, reverse=True))
    return MaskMatrix(m, "soft_token")


def segment_soft_mask(bs: BoundaryScores, S: StructureMatrices | int) -> MaskMatrix:
    """Soft mask whose value is shared by all positions of a length-``b`` segment."""
    if isinstance(S, int):
        S = build_structure(bs.n, S)
    if S.n != bs.n:
        raise ShapeError(f"structure for n={S.n} used with {bs.n} key positions")
    pl, pr = bs.phi_left, bs.phi_right
    if S.b == 1:
        return MaskMatrix(soft_mask(bs).values, "soft_segment", 1)
    fl = gather_last(cumsum(pl), S.segment_end)
    gl = gather_last(cumsum(pl, reverse=True), S.segment_start)
    fr = gather_last(cumsum(pr), S.segment_end)
    gr = gather_last(cumsum(pr, reverse=True), S.segment_start)
    return MaskMatrix(_two_term(fl, gl, fr, gr), "soft_segment", S.b)


def soft_mask_matrix_form(bs: BoundaryScores, S: StructureMatrices, segment: bool = False) -> Tensor:
    """The same masks evaluated with explicit products against ``L`` or ``J``."""
    M = Tensor(S.J if segment else S.L)
    Mt = Tensor(np.ascontiguousarray((S.J if segment else S.L).T))
    pl, pr = bs.phi_left, bs.phi_right
    return _two_term(matmul(pl, M), matmul(pl, Mt), matmul(pr, M), matmul(pr, Mt))


def expectation_oracle(bs: BoundaryScores) -> np.ndarray:
    """Brute-force expectation of the window indicator over all boundary pairs.

    Sums ``P(l=a) P(r=b) (1[a<=i<=b] + 1[b<=i<=a])`` directly; O(n^3) per
    query and independent of the scan/matrix code paths.
    """
    left = np.asarray(bs.phi_left.data)
    right = np.asarray(bs.phi_right.data)
    lead = left.shape[:-1]
    n = left.shape[-1]
    L2 = left.reshape(-1, n)
    R2 = right.reshape(-1, n)
    out = np.zeros_like(L2)
    for q in range(L2.shape[0]):
        for i in range(n):
            total = 0.0
            for a in range(n):
                for b in range(n):
                    hits = (a <= i <= b) + (b <= i <= a)
                    if hits:
                        total += L2[q, a] * R2[q, b] * hits
            out[q, i] = total
    return out.reshape(lead + (n,))


def write_matrix_csv(path, values: np.ndarray) -> None:
    """One row per query: ``query_index,pos_1..pos_n`` with 17 significant digits."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.ndim != 2:
        raise ShapeError(f"CSV dump needs a matrix, got shape {values.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_index"] + [f"pos_{j}" for j in range(1, values.shape[1] + 1)])
        for q, row in enumerate(values, start=1):
            w.writerow([q] + [format(v, ".17g") for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])
