"""Dense-array reverse-mode automatic differentiation on an explicit tape.

Arrays are contiguous 64-bit floats of rank 1 or 2. Every op validates its
output, so a NaN/Inf raises instead of propagating. The tape records one
node per op together with a closure mapping the gradient at the output to
gradients at the inputs; ``backward`` replays nodes in reverse creation
order, visiting each exactly once, which makes it deterministic and leaves
the tape re-runnable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

LAYER_NORM_EPS = 1e-5

Array = np.ndarray
GradientMap = dict  # node id or parameter name -> gradient array


@dataclass(frozen=True)
class Node:
    """One recorded operation: its output value and how to backpropagate."""

    id: int
    kind: str
    value: np.ndarray
    inputs: tuple = ()
    backward_fn: Callable | None = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of forward ops; node ids are strictly increasing."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def leaf(self, value) -> Node:
        """Record a graph input (parameter or constant). No backward closure."""
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise NumericError("leaf value contains non-finite entries")
        return self._record("leaf", arr, (), None)

    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        """Run one forward op and record it (the spec-level ``forward_op``)."""
        try:
            builder = _OPS[kind]
        except KeyError:
            raise ContractError(f"unknown op kind {kind!r}") from None
        values = tuple(n.value for n in inputs)
        out, backward_fn = builder(*values, **attrs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"op {kind!r} produced non-finite values")
        return self._record(kind, out, tuple(n.id for n in inputs), backward_fn)

    def _record(self, kind, value, input_ids, backward_fn) -> Node:
        node = Node(len(self.nodes), kind, value, input_ids, backward_fn)
        self.nodes.append(node)
        return node


def forward_op(tape: Tape, kind: str, *inputs: Node, **attrs) -> Node:
    """Functional alias for :meth:`Tape.apply`."""
    return tape.apply(kind, *inputs, **attrs)


def backward(tape: Tape, loss: Node, wrt: Sequence[Node]) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of a scalar loss with respect to ``wrt`` nodes.

    Returns a map from node id to a gradient of the node's shape. Nodes the
    loss does not depend on get zero gradients. The tape is not mutated, so
    the call can be repeated and yields bit-identical results.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    for node in wrt:
        if node.id >= len(tape.nodes) or tape.nodes[node.id] is not node:
            raise ContractError(f"node {node.id} is not on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        for input_id, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            acc = grads.get(input_id)
            grads[input_id] = gi if acc is None else acc + gi
    out: dict[int, np.ndarray] = {}
    for node in wrt:
        g = grads.get(node.id)
        out[node.id] = np.zeros_like(node.value) if g is None else g.copy()
    return out


def finite_difference(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` per scalar parameter.

    ``loss_fn`` must be deterministic; it receives a full parameter dict and
    returns a float. This is the verification oracle for ``backward`` and is
    deliberately independent of the tape machinery.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(work)
            flat[i] = orig - eps
            lo = loss_fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


# ---------------------------------------------------------------------------
# op builders: each returns (output value, backward closure or None)

def _as_array(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} arrays are unsupported (shape {arr.shape})")
    return arr


def _require_same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _op_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a @ b

    def bwd(g):
        return g @ b.T, a.T @ g

    return out, bwd


def _op_add(a, b):
    _require_same_shape("add", a, b)
    return a + b, lambda g: (g, g)


def _op_sub(a, b):
    _require_same_shape("sub", a, b)
    return a - b, lambda g: (g, -g)


def _op_mul(a, b):
    _require_same_shape("mul", a, b)
    return a * b, lambda g: (g * b, g * a)


def _op_scale(a, *, factor: float):
    return a * factor, lambda g: (g * factor,)


def _op_add_bias(x, b):
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} do not conform")
    return x + b[None, :], lambda g: (g, g.sum(axis=0))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _op_sigmoid(x):
    out = sigmoid_values(x)
    return out, lambda g: (g * out * (1.0 - out),)


def _op_tanh(x):
    out = np.tanh(x)
    return out, lambda g: (g * (1.0 - out * out),)


def _op_relu(x):
    out = np.maximum(x, 0.0)
    mask = (x > 0).astype(np.float64)
    return out, lambda g: (g * mask,)


def _rows(x):
    return x[None, :] if x.ndim == 1 else x


def _op_softmax_rows(x):
    x2 = _rows(x)
    shifted = x2 - x2.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out2 = e / e.sum(axis=1, keepdims=True)
    out = out2.reshape(x.shape)

    def bwd(g):
        g2 = _rows(g)
        dot = (g2 * out2).sum(axis=1, keepdims=True)
        return ((out2 * (g2 - dot)).reshape(x.shape),)

    return out, bwd


def _op_layer_norm_rows(x):
    x2 = _rows(x)
    mu = x2.mean(axis=1, keepdims=True)
    var = x2.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x2 - mu) * inv
    out = xhat.reshape(x.shape)

    def bwd(g):
        g2 = _rows(g)
        gmean = g2.mean(axis=1, keepdims=True)
        gxhat = (g2 * xhat).mean(axis=1, keepdims=True)
        dx = inv * (g2 - gmean - xhat * gxhat)
        return (dx.reshape(x.shape),)

    return out, bwd


def _op_concat_rows(a, b):
    if a.ndim == 1 and b.ndim == 1:
        out = np.concatenate([a, b])
        split = a.shape[0]
        return out, lambda g: (g[:split], g[split:])
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_rows: shapes {a.shape} and {b.shape} do not conform")
    out = np.concatenate([a, b], axis=1)
    split = a.shape[1]
    return out, lambda g: (g[:, :split], g[:, split:])


def _op_stack_rows(*arrays):
    mats = [_rows(a) for a in arrays]
    width = mats[0].shape[1]
    for m in mats:
        if m.shape[1] != width:
            raise ShapeError(f"stack_rows: column counts differ ({m.shape[1]} vs {width})")
    out = np.concatenate(mats, axis=0)
    counts = [m.shape[0] for m in mats]
    offs = np.cumsum([0] + counts)

    def bwd(g):
        return tuple(
            g[offs[i] : offs[i + 1]].reshape(arrays[i].shape) for i in range(len(arrays))
        )

    return out, bwd


def _op_slice_rows(x, *, start: int, stop: int):
    x2 = _rows(x)
    if not (0 <= start < stop <= x2.shape[0]):
        raise ShapeError(f"slice_rows: range [{start}, {stop}) invalid for shape {x.shape}")
    out = x2[start:stop].copy()

    def bwd(g):
        full = np.zeros_like(x2)
        full[start:stop] = _rows(g)
        return (full.reshape(x.shape),)

    return out, bwd


def _op_slice_cols(x, *, start: int, stop: int):
    if x.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: range [{start}, {stop}) invalid for shape {x.shape}")
    out = x[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(x)
        full[:, start:stop] = g
        return (full,)

    return out, bwd


def _op_scale_rows(x, s):
    if x.ndim != 2:
        raise ShapeError(f"scale_rows: expected matrix, got shape {x.shape}")
    sv = s.reshape(-1)
    if sv.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape} do not conform")
    out = x * sv[:, None]

    def bwd(g):
        return g * sv[:, None], (g * x).sum(axis=1).reshape(s.shape)

    return out, bwd


def _op_mul_scalar(x, s):
    if s.size != 1:
        raise ShapeError(f"mul_scalar: scalar operand has shape {s.shape}")
    c = float(s.reshape(-1)[0])
    out = x * c

    def bwd(g):
        return g * c, np.array([(g * x).sum()]).reshape(s.shape)

    return out, bwd


def _op_transpose(x):
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {x.shape}")
    return np.ascontiguousarray(x.T), lambda g: (np.ascontiguousarray(g.T),)


def _op_mean_all(x):
    out = np.array([x.mean()])
    n = x.size
    return out, lambda g: (np.full_like(x, g.reshape(-1)[0] / n),)


def _op_mse(a, b):
    _require_same_shape("mse", a, b)
    diff = a - b
    out = np.array([(diff * diff).mean()])
    n = a.size

    def bwd(g):
        ga = (2.0 / n) * g.reshape(-1)[0] * diff
        return ga, -ga

    return out, bwd


def _op_bce_with_logits(logits, targets):
    _require_same_shape("bce_with_logits", logits, targets)
    # log(1 + e^{-|x|}) + max(x, 0) - x*y, the log-sum-exp stable form
    per = np.log1p(np.exp(-np.abs(logits))) + np.maximum(logits, 0.0) - logits * targets
    out = np.array([per.mean()])
    n = logits.size
    sig = sigmoid_values(logits)

    def bwd(g):
        s = g.reshape(-1)[0] / n
        return s * (sig - targets), s * (-logits)

    return out, bwd


def _op_stop_gradient(x):
    return x.copy(), None


_OPS = {
    "matmul": _op_matmul,
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "scale": _op_scale,
    "add_bias": _op_add_bias,
    "sigmoid": _op_sigmoid,
    "tanh": _op_tanh,
    "relu": _op_relu,
    "softmax_rows": _op_softmax_rows,
    "layer_norm_rows": _op_layer_norm_rows,
    "concat_rows": _op_concat_rows,
    "stack_rows": _op_stack_rows,
    "slice_rows": _op_slice_rows,
    "slice_cols": _op_slice_cols,
    "scale_rows": _op_scale_rows,
    "mul_scalar": _op_mul_scalar,
    "transpose": _op_transpose,
    "mean_all": _op_mean_all,
    "mse": _op_mse,
    "bce_with_logits": _op_bce_with_logits,
    "stop_gradient": _op_stop_gradient,
}

OP_KINDS = tuple(sorted(_OPS))
