"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a ``Tensor`` wraps a numpy array and
remembers which operation produced it; ``backward()`` walks the graph in
reverse topological order accumulating adjoints. Only the operations needed
by the encoders and the alignment losses are provided (affine layers, ReLU,
row-wise L2 normalisation, scaled dot-product similarity, row softmax,
masked log-sum-exp, and a handful of pointwise/reduction helpers).

Broadcasting is intentionally restricted: the bias add inside ``affine`` and
multiplication by a python scalar are the only shape-bending operations.
Everything else demands exact shape matches and raises ``ShapeError``
naming both shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "constant",
    "parameter",
    "ensure_finite",
    "affine",
    "relu",
    "l2_normalize",
    "l2_normalize_rows",
    "scaled_dot",
    "softmax_rows",
    "logsumexp_rows",
    "log",
    "clip_min",
    "concat_rows",
    "take_rows",
    "slice1d",
    "reshape",
    "pack_arrays",
    "unpack_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or consumed non-finite values."""


def ensure_finite(arr: np.ndarray, context: str) -> None:
    """Raise NumericError naming the first offending flat index."""
    if not np.all(np.isfinite(arr)):
        flat = np.ravel(arr)
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise NumericError(f"{context}: non-finite value at flat index {bad}")


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    ``requires_grad`` is inherited from parents, so any node downstream of a
    parameter participates in backward; pure-constant subgraphs are skipped.
    Adjoints (``grad``) are (re-)zeroed at the start of every backward pass.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order  # parents precede children

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Zeroes every adjoint in the reachable graph, seeds the root with 1,
        and visits nodes in exact reverse topological order.
        """
        if self.value.shape != ():
            raise ShapeError(f"backward() needs a scalar root, got shape {self.value.shape}")
        order = self._topo_order()
        for node in order:
            if node.requires_grad:
                node.grad = np.zeros_like(node.value)
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.requires_grad and node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# -- primitives --------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out = x @ w + b with b broadcast over rows. x: [B,din], w: [din,dout], b: [dout]."""
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1 \
            or xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {xv.shape} @ {wv.shape} + {bv.shape}")
    out = xv @ wv + bv

    def bwd(g):
        _accum(x, g @ wv.T)
        _accum(w, xv.T @ g)
        _accum(b, g.sum(axis=0))

    return Tensor(out, parents=(x, w, b), backward=bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    mask = x.value > 0.0

    def bwd(g):
        _accum(x, g * mask)

    return Tensor(np.where(mask, x.value, 0.0), parents=(x,), backward=bwd)


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """v / max(||v||, eps). Plain-array helper; the eps guard maps 0 to 0."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    arr = np.asarray(v, dtype=np.float64)
    return arr / max(float(np.linalg.norm(arr)), eps)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalisation with the same max(norm, eps) guard."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.value
    if xv.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-d input, got {xv.shape}")
    norms = np.linalg.norm(xv, axis=1)
    denom = np.maximum(norms, eps)
    out = xv / denom[:, None]

    def bwd(g):
        # rows above eps: project out the radial component; rows below: plain 1/eps scaling
        dot = (out * g).sum(axis=1, keepdims=True)
        guarded = (norms >= eps)[:, None]
        gx = np.where(guarded, (g - out * dot) / denom[:, None], g / eps)
        _accum(x, gx)

    return Tensor(out, parents=(x,), backward=bwd)


def scaled_dot(a: Tensor, b: Tensor, scale: float = 1.0) -> Tensor:
    """scale * (a @ b.T): pairwise similarities between rows of a and rows of b."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"scaled_dot: incompatible shapes {av.shape} vs {bv.shape}")
    out = scale * (av @ bv.T)

    def bwd(g):
        _accum(a, scale * (g @ bv))
        _accum(b, scale * (g.T @ av))

    return Tensor(out, parents=(a, b), backward=bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last row axis of a [B,K] tensor."""
    xv = x.value
    if xv.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-d input, got {xv.shape}")
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        _accum(x, p * (g - inner))

    return Tensor(p, parents=(x,), backward=bwd)


def logsumexp_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Per-row log(sum(exp(x))) over the columns selected by a constant mask.

    Every row must select at least one column. The mask does not participate
    in differentiation.
    """
    xv = x.value
    if xv.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected 2-d input, got {xv.shape}")
    if mask is None:
        m = np.ones(xv.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != xv.shape:
            raise ShapeError(f"logsumexp_rows: mask shape {m.shape} != input shape {xv.shape}")
    if not m.any(axis=1).all():
        raise ValueError("logsumexp_rows: some row selects no columns")
    neg_inf = np.where(m, xv, -np.inf)
    rowmax = neg_inf.max(axis=1, keepdims=True)
    sums = np.where(m, np.exp(xv - rowmax), 0.0).sum(axis=1)
    out = rowmax[:, 0] + np.log(sums)

    def bwd(g):
        w = np.where(m, np.exp(xv - out[:, None]), 0.0)
        _accum(x, g[:, None] * w)

    return Tensor(out, parents=(x,), backward=bwd)


def log(x: Tensor) -> Tensor:
    xv = x.value

    def bwd(g):
        _accum(x, g / xv)

    return Tensor(np.log(xv), parents=(x,), backward=bwd)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = x.value > floor

    def bwd(g):
        _accum(x, g * mask)

    return Tensor(np.maximum(x.value, floor), parents=(x,), backward=bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor(a.value + b.value, parents=(a, b), backward=bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: shape mismatch {a.value.shape} vs {b.value.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor(a.value - b.value, parents=(a, b), backward=bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
        av, bv = a.value, b.value

        def bwd(g):
            _accum(a, g * bv)
            _accum(b, g * av)

        return Tensor(av * bv, parents=(a, b), backward=bwd)

    s = float(b)

    def bwd_scalar(g):
        _accum(a, g * s)

    return Tensor(a.value * s, parents=(a,), backward=bwd_scalar)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    xv = x.value
    if axis is not None and xv.ndim != 2:
        raise ShapeError(f"sum over axis needs a 2-d input, got {xv.shape}")
    out = xv.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accum(x, np.full_like(xv, 1.0) * g)
        elif axis == 0:
            _accum(x, np.broadcast_to(g[None, :], xv.shape).copy())
        else:
            _accum(x, np.broadcast_to(g[:, None], xv.shape).copy())

    return Tensor(out, parents=(x,), backward=bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical stack of 2-d tensors with equal column counts."""
    if not parts:
        raise ValueError("concat_rows: empty input")
    cols = {p.value.shape[1] for p in parts}
    if any(p.value.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[p.value.shape for p in parts]}")
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return Tensor(np.concatenate([p.value for p in parts], axis=0),
                  parents=tuple(parts), backward=bwd)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by index; backward scatter-adds (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.value.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d input, got {x.value.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.value.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.value.shape[0]} rows")

    def bwd(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return Tensor(x.value[idx], parents=(x,), backward=bwd)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    if x.value.ndim != 1:
        raise ShapeError(f"slice1d: expected 1-d input, got {x.value.shape}")

    def bwd(g):
        if x.requires_grad:
            x.grad[start:stop] += g

    return Tensor(x.value[start:stop], parents=(x,), backward=bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        _accum(x, g.reshape(x.value.shape))

    return Tensor(x.value.reshape(shape), parents=(x,), backward=bwd)


def pack_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten and concatenate arrays into one parameter vector."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unpack_tensor(leaf: Tensor, manifest: Sequence[tuple[str, tuple[int, ...]]]) -> dict[str, Tensor]:
    """Split a flat leaf tensor back into named, shaped tensors (views on the tape)."""
    out: dict[str, Tensor] = {}
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        out[name] = reshape(slice1d(leaf, offset, offset + n), tuple(shape))
        offset += n
    if offset != leaf.value.size:
        raise ShapeError(f"unpack_tensor: manifest covers {offset} of {leaf.value.size} entries")
    return out
