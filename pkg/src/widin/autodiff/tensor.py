"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array.  Row vectors are ``(1, n)`` and scalars ``(1, 1)``.
The only broadcast allowed is a ``(1, n)`` row against an ``(m, n)`` matrix.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from widin.errors import DegenerateInput, NumericalError, ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
    return arr


class Tensor:
    """A matrix node in the computation graph.

    Leaves created by the user carry ``requires_grad``; op outputs inherit it
    from their inputs.  Nodes that do not require gradients record no parents,
    so constant computations never build a graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Interior nodes are visited in exact reverse topological order; a node
        reached through several branches sums the incoming gradients before
        propagating further.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return "row_a"
    if b.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return "row_b"
    if a.shape == (1, 1) or b.shape == (1, 1):
        return "scalar_a" if a.shape == (1, 1) else "scalar_b"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[g.sum()]])
    return g.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _result(a.data * s, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return _result(a.data.T.copy(), (a,), backward, "transpose")


# ---------------------------------------------------------------------------
# structural


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows needs equal column counts")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward, "concat_rows")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices scatter-add on the way back."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for {a.shape}")
    rows = a.shape[0]

    def backward(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward, "take_rows")


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]

    def backward(g):
        return (np.repeat(g / n, n, axis=0),)

    return _result(a.data.mean(axis=0, keepdims=True), (a,), backward, "mean_rows")


def sum_cols(a: Tensor) -> Tensor:
    """Row-wise sum, ``(m, n) -> (m, 1)``."""
    n = a.shape[1]

    def backward(g):
        return (np.repeat(g, n, axis=1),)

    return _result(a.data.sum(axis=1, keepdims=True), (a,), backward, "sum_cols")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.full(shape, g[0, 0]),)

    return _result(np.array([[a.data.sum()]]), (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), backward, "tanh")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(u)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result(0.5 * x * (1.0 + t), (a,), backward, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ShapeError("layer_norm gain/bias must be (1, n)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def l2_normalize(a: Tensor) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms < np.finfo(np.float64).tiny):
        raise DegenerateInput("l2_normalize of a zero-norm row")
    u = a.data / norms

    def backward(g):
        return ((g - u * (u * g).sum(axis=1, keepdims=True)) / norms,)

    return _result(u, (a,), backward, "l2_normalize")


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilised by subtracting the row max."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, seq_len: int, n_heads: int) -> Tensor:
    """Scaled dot-product self-attention inside blocks of ``seq_len`` rows.

    ``q``, ``k`` and ``v`` stack ``n`` sequences of ``seq_len`` rows each; the
    columns are split evenly into ``n_heads`` heads.  Rows never attend across
    sequence boundaries.
    """
    rows, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError("attention q/k/v shapes differ")
    if rows % seq_len or d % n_heads:
        raise ShapeError(f"cannot split {q.shape} into len {seq_len} x {n_heads} heads")
    n, dh = rows // seq_len, d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    def split(x):
        return x.reshape(n, seq_len, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(rows, d)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    S = (Q @ K.transpose(0, 1, 3, 2)) * inv_sqrt
    S = S - S.max(axis=-1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=-1, keepdims=True)
    O = P @ V

    def backward(g):
        dO = split(g)
        dV = P.transpose(0, 1, 3, 2) @ dO
        dP = dO @ V.transpose(0, 1, 3, 2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * inv_sqrt
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        return merge(dQ), merge(dK), merge(dV)

    return _result(merge(O), (q, k, v), backward, "attention")


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is treated as a constant."""
    t = target.data if isinstance(target, Tensor) else _as_matrix(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss shapes {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size

    def backward(g):
        return (g[0, 0] * 2.0 * diff / n,)

    return _result(np.array([[(diff * diff).sum() / n]]), (pred,), backward, "mse_loss")


def cross_entropy(logits: Tensor, targets, tau: float = 1.0) -> Tensor:
    """Mean over rows of ``-log softmax(logits / tau)[row, target]``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, c = logits.shape
    if targets.shape[0] != m:
        raise ShapeError(f"{m} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target index out of range for {c} classes")
    onehot = np.zeros((m, c))
    onehot[np.arange(m), targets] = 1.0
    lsm = log_softmax(scale(logits, 1.0 / tau))
    return scale(sum_all(mul(lsm, Tensor(onehot))), -1.0 / m)


def softmax_xent_temp(logits: Tensor, target_index: int, tau: float) -> Tensor:
    if logits.shape[0] != 1:
        raise ShapeError("softmax_xent_temp expects a single row of logits")
    if not 0 <= target_index < logits.shape[1]:
        raise IndexError(f"target {target_index} out of range for {logits.shape[1]} logits")
    return cross_entropy(logits, [target_index], tau)
