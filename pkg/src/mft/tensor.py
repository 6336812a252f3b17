"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a local gradient rule on the output
node; ``backward`` walks the recorded graph once in reverse topological
order. Graphs are rebuilt on every forward pass (define-by-run), so tensors
holding data are plain immutable values and only leaf parameters accumulate
gradients across calls.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Mapping

import numpy as np

LOG_CLAMP = 1e-12
LAYER_NORM_EPS = 1e-5

_U64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class ContractError(ValueError):
    """An operation was invoked outside its stated contract."""


class Tensor:
    """A dense n-dimensional float64 array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, all delegating to the module-level ops
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def parameter(data) -> Tensor:
    """A learnable leaf tensor."""
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise ContractError(f"non-finite values in {what}")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


class Tape:
    """Reverse-topological record of one forward computation.

    Built by post-order traversal from the output node, so every node's
    inputs precede it; the backward pass visits each node exactly once in
    reverse order.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def from_output(root: Tensor) -> "Tape":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return Tape(nodes)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate node gradients are
    reset so the same graph can be walked more than once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    for node in tape.nodes:
        if node._backward is not None:
            node.grad = None
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _node(data, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got shape {x.shape}")
    data = x.data.swapaxes(-1, -2)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g.swapaxes(-1, -2))

    return _node(data, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    return _node(data, (x,), bw)


def concat(xs: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    if not ts:
        raise ContractError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _node(data, tuple(ts), bw)


def concat_last_axis(xs: Iterable[Tensor]) -> Tensor:
    return concat(xs, axis=-1)


def tsum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar."""
    x = as_tensor(x)
    data = x.data.sum()

    def bw(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(data, (x,), bw)


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return mul(tsum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    data = np.maximum(x.data, 0.0)  # unlike where(), maximum propagates NaN

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _node(data, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * (1.0 - data * data))

    return _node(data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    with np.errstate(over="ignore"):
        data = np.where(
            x.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(x.data))),
            np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
        )

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * data * (1.0 - data))

    return _node(data, (x,), bw)


def log(x: Tensor) -> Tensor:
    """Natural log with inputs clamped below at ``LOG_CLAMP`` (never NaN)."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, LOG_CLAMP)
    data = np.log(clamped)
    live = x.data > LOG_CLAMP

    def bw(g):
        if x.requires_grad:
            _accumulate(x, np.where(live, g / clamped, 0.0))

    return _node(data, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            _accumulate(x, data * (g - inner))

    return _node(data, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] < 2:
        raise ContractError(f"layer_norm needs a last axis of >= 2, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (dxhat - m1 - xhat * m2) * inv_std)

    return _node(data, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: "Rng | None", train: bool) -> Tensor:
    """Zero entries with probability ``rate`` and rescale survivors in train mode."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an Rng")
    mask = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    data = x.data * mask

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _node(data, (x,), bw)


# ---------------------------------------------------------------------------
# structured ops used by the token models


def per_row_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply a distinct affine map to each row: out[.., t, :] = x[.., t, :] @ w[t] + b[t].

    ``x`` is [..., T, K], ``w`` is [T, K, D], ``b`` is [T, D].
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    t, k, d = w.shape
    if x.shape[-2:] != (t, k):
        raise ShapeError(f"per_row_affine: input {x.shape} does not match weights {w.shape}")
    lead = x.shape[:-2]
    xb = x.data.reshape(-1, t, k)
    data = (np.einsum("btk,tkd->btd", xb, w.data) + b.data).reshape(*lead, t, d)

    def bw(g):
        gb = g.reshape(-1, t, d)
        if x.requires_grad:
            _accumulate(x, np.einsum("btd,tkd->btk", gb, w.data).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, np.einsum("btk,btd->tkd", xb, gb))
        if b.requires_grad:
            _accumulate(b, gb.sum(axis=0))

    return _node(data, (x, w, b), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Strided valid 2D convolution. x: [B,C,H,W], w: [O,C,kh,kw], b: [O]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} x {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    patches = windows[:, :, ::stride, ::stride, :, :]
    data = np.einsum("bchwij,ocij->bohw", patches, w.data) + b.data[None, :, None, None]
    h_out, w_out = data.shape[2], data.shape[3]

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("bchwij,bohw->ocij", patches, g))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            contrib = np.einsum("bohw,ocij->bchwij", g, w.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += contrib[:, :, :, :, i, j]
            _accumulate(x, dx)

    return _node(data, (x, w, b), bw)


# ---------------------------------------------------------------------------
# deterministic randomness


def _key_entropy(key) -> int:
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded, splittable random stream (PCG64 under a seed-derived entropy path).

    Identical seeds yield identical streams on every platform. ``child``
    derives an independent stream from a string key, so draw order in one
    component never perturbs another.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & _U64
        self._path = _path
        seq = np.random.SeedSequence([self.seed, *_path])
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, key) -> "Rng":
        return Rng(self.seed, (*self._path, _key_entropy(key)))

    def normal(self, shape=None, std: float = 1.0, loc: float = 0.0) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=std, size=shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def bernoulli(self, p: float, shape=None) -> np.ndarray:
        return (self._gen.random(size=shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)


# ---------------------------------------------------------------------------
# finite-difference oracle


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def gradcheck(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per parameter between tape gradients and central differences.

    ``f`` must be a deterministic scalar-valued forward of ``params`` (dropout
    off); parameters are perturbed in place and restored.
    """
    items = list(params.items())
    for _, t in items:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in items
    }
    report: dict[str, float] = {}
    for name, t in items:
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = float(f().data)
            flat[i] = saved - h
            down = float(f().data)
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, rel_err(ga[i], numeric))
        report[name] = worst
    return report
