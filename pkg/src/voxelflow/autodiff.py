"""Reverse-mode automatic differentiation on a per-step tape, plus Adam.

Nodes wrap float64 numpy arrays. Creating a node appends it to its tape, so
the recorded order is already topological; ``Tape.backward`` walks that list
once in reverse, accumulating vector-Jacobian products into each parent.
Named leaf nodes registered via ``Tape.param`` receive gradients (zeros when
the loss does not reach them).

The convolution kernels from :mod:`voxelflow.convs` are registered here as
primitives with hand-written backward rules; everything else is composed from
elementwise and reduction primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import convs
from .errors import (
    EmptyBatchError,
    LengthMismatchError,
    NonScalarLossError,
    ShapeMismatchError,
)
from .sparse import Rulebook


class Node:
    """One tape entry: a value, its parents, and a vector-Jacobian product."""

    __slots__ = ("tape", "value", "_parents", "_vjp")

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        self.tape = tape
        self.value = value
        self._parents = parents
        self._vjp = vjp
        tape._nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, -_lift(self.tape, other))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), -self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Single-writer record of one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def const(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64))

    def param(self, name: str, value: np.ndarray) -> Node:
        """Register a named leaf; repeated names return the same node."""
        if name in self._params:
            return self._params[name]
        node = Node(self, np.asarray(value, dtype=np.float64))
        self._params[name] = node
        return node

    def params_from(self, values: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {name: self.param(name, val) for name, val in values.items()}

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss for every registered parameter."""
        if loss.value.shape != ():
            raise NonScalarLossError(f"loss has shape {loss.value.shape}, expected scalar")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for node in reversed(self._nodes):
            grad = grads.get(id(node))
            if grad is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(grad)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return {
            name: grads.get(id(node), np.zeros_like(node.value))
            for name, node in self._params.items()
        }


def _lift(tape: Tape, value) -> Node:
    return value if isinstance(value, Node) else tape.const(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Node, b) -> Node:
    b = _lift(a.tape, b)
    value = a.value + b.value
    return Node(
        a.tape,
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def mul(a: Node, b) -> Node:
    b = _lift(a.tape, b)
    value = a.value * b.value
    return Node(
        a.tape,
        value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale(a: Node, c: float) -> Node:
    return Node(a.tape, a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    value = a.value @ b.value
    return Node(a.tape, value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node(a.tape, s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return Node(a.tape, t, (a,), lambda g: (g * (1.0 - t * t),))


def silu(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node(a.tape, a.value * s, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def softplus(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node(a.tape, np.logaddexp(0.0, a.value), (a,), lambda g: (g * s,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node(a.tape, a.value * mask, (a,), lambda g: (g * mask,))


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "silu": silu,
    "tanh": tanh,
    "softplus": softplus,
    "relu": relu,
}


def activation(name: str, a: Node) -> Node:
    try:
        return ACTIVATIONS[name](a)
    except KeyError:
        raise ShapeMismatchError(f"unknown activation {name!r}") from None


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return Node(a.tape, e, (a,), lambda g: (g * e,))


def log(a: Node) -> Node:
    return Node(a.tape, np.log(a.value), (a,), lambda g: (g / a.value,))


def powc(a: Node, p: float) -> Node:
    value = a.value**p
    return Node(a.tape, value, (a,), lambda g: (g * p * a.value ** (p - 1.0),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    clipped = np.clip(a.value, lo, hi)
    mask = (a.value >= lo) & (a.value <= hi)
    return Node(a.tape, clipped, (a,), lambda g: (g * mask,))


def smooth_l1(a: Node) -> Node:
    """Elementwise Huber: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    x = a.value
    value = np.where(np.abs(x) < 1.0, 0.5 * x * x, np.abs(x) - 0.5)
    return Node(a.tape, value, (a,), lambda g: (g * np.clip(x, -1.0, 1.0),))


def sum_all(a: Node) -> Node:
    return Node(a.tape, np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def mean_all(a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise EmptyBatchError("mean over zero elements")
    return Node(
        a.tape,
        np.mean(a.value),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.value.shape).copy(),),
    )


def mean_cols(a: Node) -> Node:
    """Row-wise mean over columns, keepdims: (N, C) -> (N, 1)."""
    c = a.value.shape[1]
    value = a.value.mean(axis=1, keepdims=True)
    return Node(a.tape, value, (a,), lambda g: (np.broadcast_to(g / c, a.value.shape).copy(),))


def max_cols(a: Node) -> Node:
    """Row-wise max over columns, keepdims; ties route to the lowest index."""
    idx = np.argmax(a.value, axis=1)  # first occurrence = lowest channel
    value = np.take_along_axis(a.value, idx[:, None], axis=1)

    def vjp(g: np.ndarray):
        grad = np.zeros_like(a.value)
        np.put_along_axis(grad, idx[:, None], g, axis=1)
        return (grad,)

    return Node(a.tape, value, (a,), vjp)


def concat_cols(parts: list[Node]) -> Node:
    if not parts:
        raise EmptyBatchError("concat of zero tensors")
    tape = parts[0].tape
    widths = [p.value.shape[1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    bounds = np.cumsum([0] + widths)

    def vjp(g: np.ndarray):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Node(tape, value, tuple(parts), vjp)


def col_slice(a: Node, start: int, stop: int) -> Node:
    value = a.value[:, start:stop]

    def vjp(g: np.ndarray):
        grad = np.zeros_like(a.value)
        grad[:, start:stop] = g
        return (grad,)

    return Node(a.tape, value, (a,), vjp)


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    value = a.value.reshape(shape)
    return Node(a.tape, value, (a,), lambda g: (g.reshape(a.value.shape),))


def take_rows(a: Node, rows: np.ndarray) -> Node:
    rows = np.asarray(rows, dtype=np.int64)
    value = a.value[rows]

    def vjp(g: np.ndarray):
        grad = np.zeros_like(a.value)
        np.add.at(grad, rows, g)
        return (grad,)

    return Node(a.tape, value, (a,), vjp)


# ---------------------------------------------------------------------------
# Engine primitives.


def sparse_conv(x: Node, w: Node, b: Node | None, rulebook: Rulebook) -> Node:
    """Sparse 3D convolution as a tape primitive."""
    bias = b.value if b is not None else None
    value = convs.sparse_conv_forward(x.value, rulebook, w.value, bias)
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g: np.ndarray):
        grad_in, grad_w, grad_b = convs.sparse_conv_backward(
            g, x.value, rulebook, w.value, has_bias=b is not None
        )
        return (grad_in, grad_w) if b is None else (grad_in, grad_w, grad_b)

    return Node(x.tape, value, parents, vjp)


def conv2d_at(x: Node, w: Node, b: Node | None, cells: np.ndarray) -> Node:
    """Dense 2D conv evaluated at an explicit cell list, as a tape primitive."""
    bias = b.value if b is not None else None
    value = convs.conv2d_at_forward(x.value, cells, w.value, bias)
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g: np.ndarray):
        grad_bev, grad_w, grad_b = convs.conv2d_at_backward(
            g, x.value, cells, w.value, has_bias=b is not None
        )
        return (grad_bev, grad_w) if b is None else (grad_bev, grad_w, grad_b)

    return Node(x.tape, value, parents, vjp)


def scatter_cells(vals: Node, cells: np.ndarray, shape: tuple[int, int]) -> Node:
    """Place (M, C) rows at unique (M, 2) cells of a zero (H, W, C) map."""
    c = vals.value.shape[1]
    value = np.zeros((shape[0], shape[1], c), dtype=np.float64)
    value[cells[:, 0], cells[:, 1]] = vals.value

    def vjp(g: np.ndarray):
        return (g[cells[:, 0], cells[:, 1]],)

    return Node(vals.tape, value, (vals,), vjp)


def bev_scatter(feats: Node, coords: np.ndarray, grid_dims: tuple[int, int, int]) -> Node:
    """Height-compress active features into a dense (nx, ny, nz*C) BEV map."""
    nx, ny, nz = grid_dims
    c = feats.value.shape[1]
    value = np.zeros((nx, ny, nz * c), dtype=np.float64)
    ch = coords[:, 2, None] * c + np.arange(c)[None, :]
    if coords.shape[0]:
        value[coords[:, 0, None], coords[:, 1, None], ch] = feats.value

    def vjp(g: np.ndarray):
        if coords.shape[0] == 0:
            return (np.zeros_like(feats.value),)
        return (g[coords[:, 0, None], coords[:, 1, None], ch],)

    return Node(feats.tape, value, (feats,), vjp)


def focal_loss_nodes(probs: Node, labels: np.ndarray, alpha: float, gamma: float) -> Node:
    """Mean focal loss over per-element probabilities in (0, 1)."""
    labels = np.asarray(labels, dtype=np.float64).reshape(probs.value.shape)
    if labels.size == 0:
        raise EmptyBatchError("focal loss over an empty batch")
    tape = probs.tape
    p = clamp(probs, 1e-7, 1.0 - 1e-7)
    y = tape.const(labels)
    pos = mul(mul(y, powc(1.0 - p, gamma)), log(p))
    neg = mul(mul(1.0 - y, powc(p, gamma)), log(1.0 - p))
    return mean_all(scale(add(scale(pos, alpha), scale(neg, 1.0 - alpha)), -1.0))


# ---------------------------------------------------------------------------
# Finite differences and the optimizer.


def finite_diff(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays."""
    grads = {}
    work = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + eps
            f_plus = float(f(work))
            arr[ix] = orig - eps
            f_minus = float(f(work))
            arr[ix] = orig
            grad[ix] = (f_plus - f_minus) / (2.0 * eps)
            it.iternext()
        grads[name] = grad
    return grads


@dataclass
class AdamConfig:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamState:
    config: AdamConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: Mapping[str, np.ndarray], config: AdamConfig | None = None) -> AdamState:
    config = config or AdamConfig()
    return AdamState(
        config=config,
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
    )


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> None:
    """One bias-corrected Adam step with decoupled weight decay, in place.

    Weight decay is applied first as p := p - lr*wd*p, then the moment update
    uses the raw gradient.
    """
    missing = set(params) - set(grads)
    if missing:
        raise LengthMismatchError(f"missing gradients for {sorted(missing)}")
    cfg = state.config
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != param shape {p.shape} for {name!r}"
            )
        if cfg.weight_decay:
            p -= cfg.lr * cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
