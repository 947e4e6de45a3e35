"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation stores its operand tensors and a
backward closure on its output. `Tensor.backward()` linearizes the recorded
graph by depth-first topological sort and replays it exactly once in reverse,
accumulating gradients additively into each reachable leaf. Outputs whose
operands all have `requires_grad=False` record nothing, so frozen subgraphs
cost no memory and can never receive gradients.

Conventions:
  * all values are float64 numpy arrays; integer data (token ids, indices)
    stays in plain numpy arrays outside the graph
  * `grad` is None until `zero_grad()` or backward() touches the tensor
  * broadcasting follows numpy; backward sums gradients back down to each
    operand's shape
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InputError, ShapeError

__all__ = [
    "Tensor",
    "matmul",
    "relu",
    "silu",
    "exp",
    "log",
    "clamp_min",
    "softmax_last_dim",
    "rms_norm",
    "l2_normalize_last",
    "dropout",
    "embedding",
    "slice_last",
    "finite_difference_check",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        # signature: (grad_of_output, pending-gradient table) -> None
        self._backward_fn: Callable[[np.ndarray, dict], None] | None = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(g, self.data.shape)

    def backward(self) -> None:
        """Reverse sweep from a scalar output.

        Visits each recorded operation exactly once, in reverse topological
        order, so gradients from every path through the graph accumulate
        additively.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward_fn is not None:
                node._backward_fn(g, grads)  # type: ignore[call-arg]

    # -- operators -----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, _wrap(other))

    def __radd__(self, other) -> "Tensor":
        return add(_wrap(other), self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, _wrap(other))

    def __rsub__(self, other) -> "Tensor":
        return sub(_wrap(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, _wrap(other))

    def __rmul__(self, other) -> "Tensor":
        return mul(_wrap(other), self)

    def __neg__(self) -> "Tensor":
        return mul(self, Tensor(-1.0))

    def __pow__(self, p) -> "Tensor":
        return power(self, float(p))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order over recorded parents."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Record an op output; prune the graph below frozen operands."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward
    return out


def _send(grads: dict[int, np.ndarray], node: Tensor, g: np.ndarray) -> None:
    """Route a gradient contribution toward `node` during the reverse sweep."""
    if not node.requires_grad:
        return
    prev = grads.get(id(node))
    if prev is None:
        grads[id(node)] = _unbroadcast(np.asarray(g, dtype=np.float64), node.data.shape).copy()
    else:
        prev += _unbroadcast(np.asarray(g, dtype=np.float64), node.data.shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, grads):
        _send(grads, a, g)
        _send(grads, b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, grads):
        _send(grads, a, g)
        _send(grads, b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, grads):
        _send(grads, a, g * b.data)
        _send(grads, b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def power(x: Tensor, p: float) -> Tensor:
    """x ** p with constant exponent. Caller guarantees the base domain."""
    out_data = x.data**p

    def backward(g, grads):
        _send(grads, x, g * p * x.data ** (p - 1.0))

    return _make(out_data, (x,), backward)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul shapes {a.shape} and {b.shape}: inner dimensions differ"
        )

    def backward(g, grads):
        _send(grads, a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _send(grads, b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# -- nonlinearities -------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g, grads):
        _send(grads, x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g, grads):
        _send(grads, x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(x.data * sig, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g, grads):
        _send(grads, x, g * out_data)

    return _make(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ContractError("log requires strictly positive input")

    def backward(g, grads):
        _send(grads, x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor). Clamped entries get zero gradient."""
    mask = x.data > floor

    def backward(g, grads):
        _send(grads, x, g * mask)

    return _make(np.where(mask, x.data, floor), (x,), backward)


# -- reductions and views ---------------------------------------------------


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis_t = _norm_axis(axis, x.ndim)

    def backward(g, grads):
        if axis_t is None:
            _send(grads, x, np.broadcast_to(g, x.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis_t)
        _send(grads, x, np.broadcast_to(gg, x.shape))

    return _make(x.data.sum(axis=axis_t, keepdims=keepdims), (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis_t = _norm_axis(axis, x.ndim)
    if axis_t is None:
        count = x.data.size
    else:
        count = int(np.prod([x.shape[a] for a in axis_t]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def _norm_axis(axis, ndim: int) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g, grads):
        _send(grads, x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g, grads):
        _send(grads, x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the trailing axis."""

    def backward(g, grads):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _send(grads, x, full)

    return _make(x.data[..., start:stop].copy(), (x,), backward)


# -- composite normalizers -------------------------------------------------


def softmax_last_dim(x: Tensor) -> Tensor:
    """Numerically stable softmax along the trailing axis.

    The row max is subtracted as a constant; that shift leaves both value and
    gradient of the exact softmax unchanged.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g, grads):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _send(grads, x, s * (g - inner))

    return _make(s, (x,), backward)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps), composed from recorded primitives."""
    ms = tensor_mean(mul(x, x), axis=-1, keepdims=True)
    return mul(x, power(add(ms, Tensor(eps)), -0.5))


def l2_normalize_last(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Rows scaled to unit L2 norm; the norm is floored at eps.

    For rows with norm > eps this is exact normalization, so the result is
    invariant to positive rescaling of the input. Smaller rows divide by the
    constant floor, which keeps the backward pass bounded near zero.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = x.data / denom
    live = norm > eps

    def backward(g, grads):
        proj = (g * out_data).sum(axis=-1, keepdims=True)
        gx = np.where(live, (g - out_data * proj) / denom, g / denom)
        _send(grads, x, gx)

    return _make(out_data, (x,), backward)


# -- stochastic and lookup ops ----------------------------------------------


def dropout(x: Tensor, rate: float, seed: int) -> Tensor:
    """Inverted dropout with a mask drawn from a counter-based stream.

    The mask depends only on `seed` and the input shape, never on global RNG
    state, so a step can be replayed exactly. rate 0 is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    from .seeding import generator

    keep = generator(seed).random(x.shape) >= rate
    mask = keep.astype(np.float64) / (1.0 - rate)

    def backward(g, grads):
        _send(grads, x, g * mask)

    return _make(x.data * mask, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]. Backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )

    def backward(g, grads):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _send(grads, table, full)

    return _make(table.data[ids], (table,), backward)


# -- gradient verification ---------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Max relative error between backward gradients and central differences.

    `f` must rebuild its graph from scratch on every call (same data, same
    seeds) and return a scalar. Every coordinate of every parameter with
    `requires_grad=True` is perturbed in place by +/-eps.

    The error denominator is floored: central differences carry roundoff of
    about machine_eps * |f| / (2 * eps), around 1e-11 here, so a coordinate
    whose true gradient sits below `floor` is compared against the floor
    (an absolute check) instead of drowning in noise-over-noise ratios.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f().item()
            flat[i] = keep - eps
            lo = f().item()
            flat[i] = keep
            fd = (hi - lo) / (2.0 * eps)
            a = ref.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, rel)
    return worst
