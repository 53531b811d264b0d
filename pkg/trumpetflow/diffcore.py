"""
Differentiable Tensor Core

Dense float64 tensors with a reverse-mode gradient tape, a central-difference
gradient oracle and a brute-force Jacobian. Every other module computes
through this one.

A Tensor is either a plain value (no tape) or a tape-linked value. Operations
on plain values simply evaluate; as soon as one input is linked to a Tape the
result is recorded on that tape and can be differentiated with backward().
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as sla

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""
    pass


class DomainError(ArithmeticError):
    """Raised when an operation is evaluated outside its mathematical domain."""
    pass


class ContractError(RuntimeError):
    """Raised when a caller breaks a tape or argument precondition."""
    pass


@dataclass
class Node:
    """One tape entry: the operation, its input node ids and saved values."""
    kind: str
    inputs: Tuple[Optional[int], ...]
    input_shapes: Tuple[Tuple[int, ...], ...]
    saved: dict
    attrs: dict


class Tape:
    """
    Append-only record of operations on tape-linked tensors.

    Nodes are appended in evaluation order, so every node's inputs precede it.
    A tape is cleared explicitly between optimization steps and must only be
    used from one thread.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def leaf(self, value) -> "Tensor":
        """Register a new leaf (a differentiable input) and return it."""
        data = _as_array(value)
        self.nodes.append(Node("leaf", (), (), {"value": data}, {}))
        return Tensor(data, node=len(self.nodes) - 1, tape=self)

    def record(self, kind: str, inputs, input_shapes, saved: dict, attrs: dict) -> int:
        self.nodes.append(Node(kind, tuple(inputs), tuple(input_shapes), saved, attrs))
        return len(self.nodes) - 1

    def leaves(self) -> List[int]:
        return [i for i, node in enumerate(self.nodes) if node.kind == "leaf"]

    def clear(self):
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """
    Dense multi-dimensional array of 64-bit floats.

    Attributes:
        data: the numpy array holding the values (row-major)
        node: tape node id, or None for a plain value
        tape: the Tape the node lives on, or None
    """

    __slots__ = ("data", "node", "tape")
    __array_ufunc__ = None

    def __init__(self, data, node: Optional[int] = None, tape: Optional[Tape] = None):
        self.data = _as_array(data)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def linked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.linked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; every path goes through apply()
    def __add__(self, other):
        return apply("add", [self, _lift(other)])

    def __radd__(self, other):
        return apply("add", [_lift(other), self])

    def __sub__(self, other):
        return apply("sub", [self, _lift(other)])

    def __rsub__(self, other):
        return apply("sub", [_lift(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar-mul", [self], scalar=float(other))
        return apply("mul", [self, _lift(other)])

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar-mul", [self], scalar=float(other))
        return apply("mul", [_lift(other), self])

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar-mul", [self], scalar=1.0 / float(other))
        return apply("div", [self, _lift(other)])

    def __rtruediv__(self, other):
        return apply("div", [_lift(other), self])

    def __matmul__(self, other):
        return apply("matmul", [self, _lift(other)])

    def __rmatmul__(self, other):
        return apply("matmul", [_lift(other), self])

    def __neg__(self):
        return apply("neg", [self])

    @property
    def T(self) -> "Tensor":
        return apply("transpose", [self])


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _raise_not_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def _broadcast_shape(kind: str, sa: Tuple[int, ...], sb: Tuple[int, ...]) -> Tuple[int, ...]:
    """Shapes conform when equal or when one is a trailing suffix of the other."""
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def _axis_slices(ndim: int, axis: int, start: int, stop: int) -> tuple:
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


# ---------------------------------------------------------------------------
# Operation table: forward returns (value, saved); vjp returns input grads
# ---------------------------------------------------------------------------

def _fwd_add(v, attrs):
    _broadcast_shape("add", v[0].shape, v[1].shape)
    return v[0] + v[1], {}


def _vjp_add(g, v, out, saved, attrs):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]


def _fwd_sub(v, attrs):
    _broadcast_shape("sub", v[0].shape, v[1].shape)
    return v[0] - v[1], {}


def _vjp_sub(g, v, out, saved, attrs):
    return [_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)]


def _fwd_mul(v, attrs):
    _broadcast_shape("mul", v[0].shape, v[1].shape)
    return v[0] * v[1], {}


def _vjp_mul(g, v, out, saved, attrs):
    return [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]


def _fwd_div(v, attrs):
    _broadcast_shape("div", v[0].shape, v[1].shape)
    if np.any(v[1] == 0.0):
        raise DomainError("div: divisor has zero entries")
    return v[0] / v[1], {}


def _vjp_div(g, v, out, saved, attrs):
    return [
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
    ]


def _fwd_neg(v, attrs):
    return -v[0], {}


def _vjp_neg(g, v, out, saved, attrs):
    return [-g]


def _fwd_scalar_mul(v, attrs):
    return attrs["scalar"] * v[0], {}


def _vjp_scalar_mul(g, v, out, saved, attrs):
    return [attrs["scalar"] * g]


def _fwd_matmul(v, attrs):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b, {}


def _vjp_matmul(g, v, out, saved, attrs):
    a, b = v
    return [g @ b.T, a.T @ g]


def _fwd_transpose(v, attrs):
    if v[0].ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {v[0].shape}")
    return v[0].T.copy(), {}


def _vjp_transpose(g, v, out, saved, attrs):
    return [g.T]


def _fwd_exp(v, attrs):
    return np.exp(v[0]), {}


def _vjp_exp(g, v, out, saved, attrs):
    return [g * out]


def _fwd_log(v, attrs):
    if np.any(v[0] <= 0.0):
        raise DomainError(f"log: non-positive entry (min {v[0].min():.3e})")
    return np.log(v[0]), {}


def _vjp_log(g, v, out, saved, attrs):
    return [g / v[0]]


def _fwd_tanh(v, attrs):
    return np.tanh(v[0]), {}


def _vjp_tanh(g, v, out, saved, attrs):
    return [g * (1.0 - out * out)]


def _fwd_softmax(v, attrs):
    a = v[0]
    if a.ndim == 0:
        raise ShapeError("softmax: needs at least one axis")
    shifted = np.exp(a - a.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True), {}


def _vjp_softmax(g, v, out, saved, attrs):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _fwd_sum(v, attrs):
    axis = attrs.get("axis")
    return np.asarray(v[0].sum(axis=axis)), {}


def _vjp_sum(g, v, out, saved, attrs):
    axis = attrs.get("axis")
    shape = v[0].shape
    if axis is None:
        return [np.full(shape, float(g))]
    return [np.broadcast_to(np.expand_dims(g, axis), shape).copy()]


def _fwd_mean(v, attrs):
    axis = attrs.get("axis")
    return np.asarray(v[0].mean(axis=axis)), {}


def _vjp_mean(g, v, out, saved, attrs):
    axis = attrs.get("axis")
    shape = v[0].shape
    count = v[0].size if axis is None else shape[axis]
    grad = _vjp_sum(g, v, out, saved, attrs)[0]
    return [grad / count]


def _fwd_slice(v, attrs):
    a = v[0]
    axis = attrs.get("axis", -1)
    if a.ndim == 0:
        raise ShapeError("slice: cannot slice a scalar")
    start, stop = attrs["start"], attrs["stop"]
    length = a.shape[axis]
    if not 0 <= start < stop <= length:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis of length {length} (shape {a.shape})")
    return a[_axis_slices(a.ndim, axis, start, stop)].copy(), {}


def _vjp_slice(g, v, out, saved, attrs):
    grad = np.zeros_like(v[0])
    grad[_axis_slices(v[0].ndim, attrs.get("axis", -1), attrs["start"], attrs["stop"])] = g
    return [grad]


def _fwd_concat(v, attrs):
    axis = attrs.get("axis", -1)
    ref = v[0].shape
    for other in v[1:]:
        if other.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(other.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {other.shape} do not conform on axis {axis}")
    return np.concatenate(v, axis=axis), {}


def _vjp_concat(g, v, out, saved, attrs):
    axis = attrs.get("axis", -1)
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    return np.split(g, bounds, axis=axis)


def _fwd_reshape(v, attrs):
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != v[0].size:
        raise ShapeError(f"reshape: cannot reshape {v[0].shape} into {shape}")
    return v[0].reshape(shape).copy(), {}


def _vjp_reshape(g, v, out, saved, attrs):
    return [g.reshape(v[0].shape)]


_TRIANGULAR = {
    "lower": dict(lower=True, unit_diagonal=False),
    "unit_lower": dict(lower=True, unit_diagonal=True),
    "upper": dict(lower=False, unit_diagonal=False),
}


def _fwd_solve(v, attrs):
    a, b = v
    structure = attrs.get("structure", "general")
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim not in (1, 2) or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve: shapes {a.shape} and {b.shape} do not conform")
    if structure == "general":
        try:
            return np.linalg.solve(a, b), {}
        except np.linalg.LinAlgError as e:
            raise DomainError(f"solve: singular system ({e})")
    if structure not in _TRIANGULAR:
        raise ContractError(f"solve: unknown structure '{structure}'")
    if not _TRIANGULAR[structure]["unit_diagonal"] and np.any(np.diag(a) == 0.0):
        raise DomainError("solve: triangular matrix has a zero diagonal entry")
    return sla.solve_triangular(a, b, check_finite=False, **_TRIANGULAR[structure]), {}


def _vjp_solve(g, v, out, saved, attrs):
    a, b = v
    structure = attrs.get("structure", "general")
    if structure == "general":
        gb = np.linalg.solve(a.T, g)
    else:
        gb = sla.solve_triangular(a, g, trans="T", check_finite=False, **_TRIANGULAR[structure])
    ga = -(np.outer(gb, out) if gb.ndim == 1 else gb @ out.T)
    if structure == "lower":
        ga = np.tril(ga)
    elif structure == "unit_lower":
        ga = np.tril(ga, -1)
    elif structure == "upper":
        ga = np.triu(ga)
    return [ga, gb]


def _fwd_logdet(v, attrs):
    a = v[0]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logdet: expected a square matrix, got shape {a.shape}")
    sign, value = np.linalg.slogdet(a)
    if sign == 0.0:
        raise DomainError("logdet: matrix is singular")
    return np.asarray(value), {}


def _vjp_logdet(g, v, out, saved, attrs):
    return [float(g) * np.linalg.inv(v[0]).T]


OPS: Dict[str, Tuple[Callable, Callable]] = {
    "add": (_fwd_add, _vjp_add),
    "sub": (_fwd_sub, _vjp_sub),
    "mul": (_fwd_mul, _vjp_mul),
    "div": (_fwd_div, _vjp_div),
    "neg": (_fwd_neg, _vjp_neg),
    "scalar-mul": (_fwd_scalar_mul, _vjp_scalar_mul),
    "matmul": (_fwd_matmul, _vjp_matmul),
    "transpose": (_fwd_transpose, _vjp_transpose),
    "exp": (_fwd_exp, _vjp_exp),
    "log": (_fwd_log, _vjp_log),
    "tanh": (_fwd_tanh, _vjp_tanh),
    "softmax": (_fwd_softmax, _vjp_softmax),
    "sum": (_fwd_sum, _vjp_sum),
    "mean": (_fwd_mean, _vjp_mean),
    "slice": (_fwd_slice, _vjp_slice),
    "concat": (_fwd_concat, _vjp_concat),
    "reshape": (_fwd_reshape, _vjp_reshape),
    "solve": (_fwd_solve, _vjp_solve),
    "logdet": (_fwd_logdet, _vjp_logdet),
}


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """
    Evaluate one operation and record it on the inputs' tape if any is linked.

    Args:
        op_kind: a key of OPS ("add", "matmul", "softmax", ...)
        inputs: operand tensors
        **attrs: operation attributes (axis, start/stop, shape, scalar, structure)

    Returns:
        The result tensor, tape-linked when any input is.

    Raises:
        ContractError: unknown op kind or inputs from two different tapes
        ShapeError: operand shapes do not conform
        DomainError: evaluation outside the domain or a non-finite result
    """
    if op_kind not in OPS:
        raise ContractError(f"unknown op kind '{op_kind}'")
    inputs = [_lift(t) for t in inputs]
    forward, _ = OPS[op_kind]
    values = [t.data for t in inputs]
    out, saved = forward(values, attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op_kind}: produced non-finite values")

    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{op_kind}: inputs are linked to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)

    saved = dict(saved, value=out, constants=[None if t.linked else t.data for t in inputs])
    node = tape.record(
        op_kind,
        [t.node for t in inputs],
        [t.shape for t in inputs],
        saved,
        attrs,
    )
    return Tensor(out, node=node, tape=tape)


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Args:
        loss: single-element tensor produced on an active tape

    Returns:
        Map from every leaf node id (up to the loss) to d(loss)/d(leaf);
        leaves the loss does not depend on get zero gradients.

    Raises:
        ContractError: loss is not scalar or not on a tape
    """
    if loss.tape is None or loss.node is None:
        raise ContractError("backward: loss is not recorded on a tape")
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")

    tape = loss.tape
    values = _replay_values(tape, loss)
    grads: Dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    leaf_grads: Dict[int, np.ndarray] = {}

    for index in range(loss.node, -1, -1):
        node = tape.nodes[index]
        if node.kind == "leaf":
            leaf_grads[index] = grads.pop(index, None)
            if leaf_grads[index] is None:
                leaf_grads[index] = np.zeros_like(values[index])
            continue
        g = grads.pop(index, None)
        if g is None:
            continue
        input_values = [
            values[i] if i is not None else node.saved["constants"][k]
            for k, i in enumerate(node.inputs)
        ]
        _, vjp = OPS[node.kind]
        input_grads = vjp(g, input_values, values[index], node.saved, node.attrs)
        for i, gi in zip(node.inputs, input_grads):
            if i is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.asarray(gi, dtype=np.float64)

    return leaf_grads


def _replay_values(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    values = {}
    for index in range(loss.node + 1):
        values[index] = tape.nodes[index].saved["value"]
    return values


# ---------------------------------------------------------------------------
# Functional shorthands used by the layers
# ---------------------------------------------------------------------------

def constant(value) -> Tensor:
    """Wrap a value as a plain (untaped) tensor."""
    return Tensor(value)


def matmul(a, b) -> Tensor:
    return apply("matmul", [a, b])


def transpose(a) -> Tensor:
    return apply("transpose", [a])


def exp(a) -> Tensor:
    return apply("exp", [a])


def log(a) -> Tensor:
    return apply("log", [a])


def tanh(a) -> Tensor:
    return apply("tanh", [a])


def softmax(a) -> Tensor:
    return apply("softmax", [a])


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    return apply("sum", [a], axis=axis)


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    return apply("mean", [a], axis=axis)


def take(a, start: int, stop: int, axis: int = -1) -> Tensor:
    return apply("slice", [a], start=start, stop=stop, axis=axis)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return apply("concat", list(tensors), axis=axis)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return apply("reshape", [a], shape=tuple(shape))


def solve(a, b, structure: str = "general") -> Tensor:
    return apply("solve", [a, b], structure=structure)


def logdet(a) -> Tensor:
    return apply("logdet", [a])


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

ScalarFunction = Callable[[Tensor], Union[Tensor, float]]


def finite_diff_grad(f: ScalarFunction, x, step: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Entry i is (f(x + step*e_i) - f(x - step*e_i)) / (2*step).

    Args:
        f: scalar function of a Tensor (may return a Tensor or a float)
        x: evaluation point
        step: difference step, must be positive

    Returns:
        Array with the shape of x.
    """
    if step <= 0:
        raise ContractError(f"finite_diff_grad: step must be positive, got {step}")
    base = _as_array(x).astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = _scalar_value(f(Tensor(base.copy())))
        flat[i] = original - step
        lower = _scalar_value(f(Tensor(base.copy())))
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return grad


def _scalar_value(value) -> float:
    if isinstance(value, Tensor):
        if value.size != 1:
            raise ContractError(f"finite_diff_grad: f must be scalar, got shape {value.shape}")
        return float(value.data.reshape(-1)[0])
    return float(value)


def jacobian(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """
    Brute-force Jacobian of a vector function, one backward() per output.

    Args:
        f: maps an n-vector Tensor to an m-vector Tensor
        x: 1-D evaluation point

    Returns:
        m x n matrix of partial derivatives.

    Raises:
        ContractError: input or output is not a vector
    """
    point = _as_array(x)
    if point.ndim != 1:
        raise ContractError(f"jacobian: input must be a vector, got shape {point.shape}")
    tape = Tape()
    leaf = tape.leaf(point.copy())
    out = f(leaf)
    if not isinstance(out, Tensor) or out.ndim != 1:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ContractError(f"jacobian: output must be a vector, got {shape}")

    rows = np.zeros((out.shape[0], point.shape[0]))
    if not out.linked:
        return rows
    for i in range(out.shape[0]):
        component = reduce_sum(take(out, i, i + 1))
        rows[i] = backward(component)[leaf.node]
    tape.clear()
    return rows
