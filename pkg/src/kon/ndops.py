"""Dense float64 tensors with a reverse-mode tape and a finite-difference oracle.

Every differentiable quantity in the package is a :class:`Tensor`. Results of
primitive operations remember their parents and a backward rule; calling
``backward()`` on a scalar replays the tape once, in reverse topological
order, accumulating gradients into ``.grad`` (summing when a tensor feeds
several consumers). Storage is row-major float64 throughout; 32-bit floats
appear only inside checkpoint files.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

# Floor applied to any probability before it is passed to log.
PROB_FLOOR = 1e-12

_GRAD_ENABLED = True
_DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    """Toggle per-op NaN/Inf detection (off by default; cheap but not free)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array, optionally attached to the computation tape.

    Tensors are treated as immutable after construction; the only sanctioned
    in-place mutation of ``.data`` is the optimizer's parameter update (and
    the transient perturbations of :func:`grad_check`).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Replay the tape in reverse topological order, once per node.

        Gradients accumulate (sum) into ``.grad`` of every tensor with
        ``requires_grad``, so repeated backward calls add up, which is what
        gradient accumulation over micro-batches relies on.
        """
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        # Iterative post-order DFS: parents land before children, so the
        # reversed list is a reverse topological order over the tape.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        flowing: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                flowing[key] = pg if key not in flowing else flowing[key] + pg


def constant(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a tensor operation")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise primitives -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant (non-tensor) exponent."""
    a = _as_tensor(a)
    exponent = float(exponent)
    data = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)
    return _result(data, (a,), lambda g: (g / a.data,))


def maximum_scalar(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient flows only where a >= floor."""
    a = _as_tensor(a)
    floor = float(floor)
    data = np.maximum(a.data, floor)
    mask = a.data >= floor
    return _result(data, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),))


def silu(a) -> Tensor:
    """x * sigmoid(x), the activation used by every MLP in the package."""
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def backward(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _result(data, (a,), backward)


# -- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0 else np.full(a.shape, g),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _result(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)

    def backward(g):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)

    return _result(data, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul batch shapes incompatible: {a.shape} x {b.shape}") from err

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


# -- normalizers and distribution ops ----------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; each output slice sums to 1."""
    a = _as_tensor(a)
    if a.shape == () or a.shape[axis] < 1:
        raise ShapeError(f"softmax needs a non-empty axis, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _result(data, (a,), backward)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm gain width {gain.shape} does not match input {x.shape}")
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    return mul(mul(x, inv), gain)


def kl_divergence(p, q, floor: float = PROB_FLOOR) -> Tensor:
    """sum_i p_i (log p_i - log q_i) for two probability vectors.

    Both operands are floored at ``floor`` before the log, which realizes
    the 0*log 0 := 0 convention and keeps the result finite for one-hot p.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.ndim != 1 or q.ndim != 1:
        raise ShapeError(f"kl_divergence expects vectors, got {p.shape} and {q.shape}")
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence length mismatch: {p.shape} vs {q.shape}")
    for name, vec in (("p", p), ("q", q)):
        total = float(vec.data.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"kl_divergence: {name} sums to {total:.9f}, not a probability vector")
    logs = sub(log(maximum_scalar(p, floor)), log(maximum_scalar(q, floor)))
    return sum_(mul(p, logs))


# -- indexing primitives -------------------------------------------------------


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding): out[...] = table[ids[...]]; scatter-add backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("take_rows ids must be integers")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(data, (table,), backward)


def gather_time(x, idx: np.ndarray) -> Tensor:
    """Pick per-batch time positions from x[B, T, ...].

    idx of shape (B,) yields x[b, idx[b]]; shape (B, K) yields x[b, idx[b, k]].
    """
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if x.ndim < 2:
        raise ShapeError(f"gather_time needs a batched input, got shape {x.shape}")
    batch = np.arange(x.shape[0])
    if idx.ndim == 1:
        index = (batch, idx)
    elif idx.ndim == 2:
        index = (batch[:, None], idx)
    else:
        raise ShapeError(f"gather_time idx must be 1-D or 2-D, got {idx.shape}")
    data = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(data, (x,), backward)


def take_last(x, idx: np.ndarray) -> Tensor:
    """Pick one element along the last axis per leading position."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"take_last idx shape {idx.shape} must match leading dims of {x.shape}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        # One target slot per leading position, so a plain put is exact.
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _result(data, (x,), backward)


def gather_steps(p, table: np.ndarray) -> Tensor:
    """Extract per-entity step probabilities from a stacked distribution matrix.

    p is (K, V) or (B, K, V); table is (E, K) of token ids, or (B, E, K) when
    each batch row scores its own candidate list. Output element [..., e, k]
    equals p[..., k, table[..., e, k]].
    """
    p = _as_tensor(p)
    table = np.asarray(table)
    if p.ndim == 2:
        k, v = p.shape
    elif p.ndim == 3:
        _, k, v = p.shape
    else:
        raise ShapeError(f"gather_steps expects (K,V) or (B,K,V), got {p.shape}")
    if table.shape[-1] != k:
        raise ShapeError(f"gather_steps table width {table.shape} does not match K={k}")
    if table.size and (table.min() < 0 or table.max() >= v):
        raise IndexError(f"gather_steps token id out of range [0, {v}) in table")

    k_ix = np.arange(k)
    if p.ndim == 2:
        if table.ndim != 2:
            raise ShapeError(f"gather_steps: unbatched p needs a 2-D table, got {table.shape}")
        index = (k_ix[None, :], table)
    else:
        batch = np.arange(p.shape[0])
        if table.ndim == 2:
            index = (batch[:, None, None], k_ix[None, None, :], table[None, :, :])
        elif table.ndim == 3:
            if table.shape[0] != p.shape[0]:
                raise ShapeError(f"gather_steps batch mismatch: {p.shape} vs {table.shape}")
            index = (batch[:, None, None], k_ix[None, None, :], table)
        else:
            raise ShapeError(f"gather_steps table must be 2-D or 3-D, got {table.shape}")
    data = p.data[index]

    def backward(g):
        gp = np.zeros_like(p.data)
        np.add.at(gp, index, g)
        return (gp,)

    return _result(data, (p,), backward)


# -- verification oracle -------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of f() against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    tensor. Tensors with more than ``max_coords`` elements are probed at a
    seeded random coordinate sample; smaller ones exhaustively. Returns the
    worst relative error over all probed coordinates.
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    zero_grads(params)
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: objective is non-finite at the base point")
    out.backward()
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    worst = 0.0
    for pi, p in enumerate(params):
        n = p.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            c = int(c)
            original = flat[c]
            flat[c] = original + step
            f_plus = float(f().data)
            flat[c] = original - step
            f_minus = float(f().data)
            flat[c] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"grad_check: non-finite objective at param {pi}, coord {c}")
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(analytic[pi].reshape(-1)[c])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
