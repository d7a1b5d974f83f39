"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable primitive below builds its output eagerly and records a
node holding its operands and a backward rule.  ``backward`` collects the
nodes reachable from a scalar loss, orders them by recording sequence and
walks them once in reverse.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "add_constant",
    "backward",
    "concat",
    "cross_entropy",
    "cumsum",
    "dropout",
    "elementwise",
    "embedding_lookup",
    "gather_last",
    "layer_norm",
    "masked_mean",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "scale",
    "slice_axis",
    "softmax_rows",
    "sum_all",
    "swap_last",
    "transpose",
]

LAYER_NORM_EPS = 1e-6

_sequence = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A tensor would hold NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a finite sum implies finite entries; only a non-finite sum needs the full scan
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class _Node:
    __slots__ = ("seq", "parents", "rule", "op")

    def __init__(self, parents: tuple["Tensor", ...], rule: Callable, op: str):
        self.seq = next(_sequence)
        self.parents = parents
        self.rule = rule
        self.op = op


class Tensor:
    """Row-major float64 array, optionally tracked for gradients.

    Leaf tensors created with ``requires_grad=True`` carry a ``grad`` array of
    the same shape, accumulated by :func:`backward`.  Outputs of primitives
    are tracked through their recorded node instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], rule: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._node = _Node(parents, rule, op) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded primitive applications reachable from one output.

    Entries are kept in recording order, so operands always precede the
    entries that consumed them.  Iterating yields them in reverse, which is
    the order backward propagation needs.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.parents)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tensor]:
        return reversed(self.entries)

    def ops(self) -> list[str]:
        return [t._node.op for t in self.entries]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad += 1.0
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in Tape.from_output(loss):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for parent, pg in zip(node.parents, node.rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad += pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# core algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared across the leading batch axes of ``a``,
    or carry the same batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if shared:
        # one large GEMM instead of a loop over the batch axes
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))
    else:
        out = np.matmul(A, B)

    def rule(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ B.T).reshape(A.shape)
            if b.requires_grad:
                gb = A.reshape(-1, A.shape[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(B, -1, -2))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return Tensor._result(out, (a, b), rule, "matmul")


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1:
        return "scalar"
    if b.ndim <= 2 and b.shape[-1] == a.shape[-1] and b.data.size == a.shape[-1]:
        return "row"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.reshape(-1, g.shape[-1]).sum(axis=0).reshape(shape)


def _operand(b: Tensor, kind: str) -> np.ndarray:
    return b.data.reshape(-1) if kind == "row" else (b.data.reshape(()) if kind == "scalar" else b.data)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = a.data + _operand(b, kind)

    def rule(g):
        return g, (_reduce_to(g, kind, b.shape) if b.requires_grad else None)

    return Tensor._result(out, (a, b), rule, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    A, Bv = a.data, _operand(b, kind)
    out = A * Bv

    def rule(g):
        ga = g * Bv if a.requires_grad else None
        gb = _reduce_to(g * A, kind, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), rule, "mul")


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Pointwise ``add`` or ``mul``; ``b`` may be a scalar or a single row."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError(f"scale factor {c}")
    out = a.data * c
    return Tensor._result(out, (a,), lambda g: (g * c,), "scale")


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """Add an untracked array that broadcasts against ``a`` (masks, encodings)."""
    const = np.asarray(const, dtype=np.float64)
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"constant of shape {const.shape} would broadcast {a.shape} to {out.shape}")
    return Tensor._result(out, (a,), lambda g: (g,), "add_constant")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with the row maximum subtracted first."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._result(p, (a,), rule, "softmax")


def cumsum(a: Tensor, reverse: bool = False) -> Tensor:
    """Inclusive running sum along the last axis (suffix sums if ``reverse``)."""
    if reverse:
        out = np.flip(np.cumsum(np.flip(a.data, -1), axis=-1), -1)

        def rule(g):
            return (np.cumsum(g, axis=-1),)
    else:
        out = np.cumsum(a.data, axis=-1)

        def rule(g):
            return (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),)

    return Tensor._result(np.ascontiguousarray(out), (a,), rule, "cumsum")


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Select positions ``index`` along the last axis; repeats are allowed."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[-1]
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= n)):
        raise ShapeError(f"gather index out of range for last axis of size {n}")
    out = a.data[..., index]

    def rule(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, (..., index), g)
        return (ga,)

    return Tensor._result(out, (a,), rule, "gather")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis`` (``concat_rows`` for matrices with axis 0)."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, parts, rule, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis`` (``slice_rows`` for axis 0)."""
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}, {stop}) outside axis of size {a.shape[axis]}")
    key = (slice(None),) * axis + (slice(start, stop),)
    out = np.ascontiguousarray(a.data[key])

    def rule(g):
        ga = np.zeros(a.shape)
        ga[key] = g
        return (ga,)

    return Tensor._result(out, (a,), rule, "slice")


# ---------------------------------------------------------------------------
# network building blocks


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id outside vocabulary of size {vocab}")
    out = table.data[ids]

    def rule(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._result(out, (table,), rule, "embedding")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = a.shape[-1]
    if gain.data.size != d or bias.data.size != d:
        raise ShapeError(f"layer_norm parameters must have {d} entries")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data.reshape(-1)
    out = xhat * G + bias.data.reshape(-1)

    def rule(g):
        gx = None
        if a.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0).reshape(gain.shape) if gain.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0).reshape(bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._result(out, (a, gain, bias), rule, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.intp)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy over zero non-padding positions")
    if t[keep].size and (t[keep].min() < 0 or t[keep].max() >= V):
        raise IndexError(f"target id outside {V} classes")
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def rule(g):
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1.0
        grad[~keep] = 0.0
        return ((grad * (float(g) / count)).reshape(logits.shape),)

    return Tensor._result(np.asarray(loss), (logits,), rule, "cross_entropy")


def masked_mean(a: Tensor, keep: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``a`` (batch, length, width) restricted to ``keep`` rows."""
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != a.shape[:-1]:
        raise ShapeError(f"keep mask {keep.shape} does not match {a.shape}")
    count = keep.sum(axis=-1, keepdims=True)
    if (count == 0).any():
        raise ValueError("masked_mean over an empty sequence")
    w = keep / count
    out = np.einsum("...t,...td->...d", w, a.data)
    return Tensor._result(out, (a,), lambda g: (w[..., None] * g[..., None, :],), "masked_mean")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return Tensor._result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
