"""
Diff Engine Module
Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every op records its output on the Tape together with a pullback closure.
Complex quantities travel as stacked real pairs (real parts, then imaginary
parts); the physical model enters through batched_matvec with a constant
real block operator.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operands with incompatible shapes"""


class NumericError(ArithmeticError):
    """An op produced a non-finite value"""


class TapeError(RuntimeError):
    """Invalid use of a tape (non-scalar loss, consumed tape, foreign tensor)"""


class Tensor:
    """Dense float64 value recorded on a tape"""

    __slots__ = ('data', 'grad', 'parents', 'pullback', 'op', 'tape', 'requires_grad', 'name')

    def __init__(self, data: np.ndarray, tape: 'Tape', op: str = 'const',
                 parents: Tuple['Tensor', ...] = (), pullback: Optional[Callable] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.pullback = pullback
        self.op = op
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, name={self.name})"


class Tape:
    """Ordered record of executed ops; consumed by one backward pass"""

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.leaves: Dict[str, Tensor] = {}
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str) -> Tensor:
        """Trainable input; its gradient is reported by backward()"""
        if name in self.leaves:
            raise TapeError(f"Leaf {name!r} already registered on this tape")
        tensor = Tensor(np.array(value, dtype=np.float64), self, op='leaf', requires_grad=True, name=name)
        self.leaves[name] = tensor
        self.nodes.append(tensor)
        return tensor

    def constant(self, value) -> Tensor:
        """Input that receives no gradient"""
        tensor = Tensor(np.asarray(value, dtype=np.float64), self, op='const')
        self.nodes.append(tensor)
        return tensor

    def record(self, op: str, data: np.ndarray, parents: Tuple[Tensor, ...],
               pullback: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
        if self.consumed:
            raise TapeError("Cannot record on a consumed tape")
        for parent in parents:
            if parent.tape is not self:
                raise TapeError(f"Operand of {op} belongs to another tape")
        if not np.all(np.isfinite(data)):
            raise NumericError(f"Non-finite value produced by {op}")
        requires_grad = any(p.requires_grad for p in parents)
        tensor = Tensor(data, self, op=op, parents=parents,
                        pullback=pullback if requires_grad else None,
                        requires_grad=requires_grad)
        self.nodes.append(tensor)
        return tensor


def _require_2d(op: str, *tensors: Tensor):
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"{op} expects 2-D operands, got shape {t.shape}")


# Primitives ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n, k) @ (k, m)"""
    _require_2d('matmul', a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a.tape.record('matmul', a.data @ b.data, (a, b),
                         lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a bias row added to every row of a 2-D a"""
    if a.shape == b.shape:
        return a.tape.record('add', a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return a.tape.record('add', a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes"""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return a.tape.record('mul', a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiplication by a constant scalar"""
    factor = float(factor)
    return a.tape.record('scale', a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the derivative at 0 is taken as 0"""
    mask = (a.data > 0).astype(np.float64)
    return a.tape.record('relu', a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return a.tape.record('sigmoid', out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return a.tape.record('tanh', out, (a,), lambda g: (g * (1.0 - out * out),))


def cos(a: Tensor) -> Tensor:
    return a.tape.record('cos', np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a: Tensor) -> Tensor:
    return a.tape.record('sin', np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along one axis"""
    if not tensors:
        raise ShapeError("concat needs at least one operand")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.data.ndim != ndim or other != ref:
            raise ShapeError(f"concat shape mismatch: {[x.shape for x in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def pullback(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return tensors[0].tape.record('concat', np.concatenate([t.data for t in tensors], axis=axis),
                                  tuple(tensors), pullback)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, stop) along one axis"""
    axis = axis % a.data.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}, {stop}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def pullback(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return a.tape.record('slice', a.data[index].copy(), (a,), pullback)


def sum_(a: Tensor) -> Tensor:
    """Sum of all entries, a scalar"""
    return a.tape.record('sum', np.array(a.data.sum()), (a,),
                         lambda g: (np.full_like(a.data, float(g)),))


def batched_matvec(operators: np.ndarray, x: Tensor) -> Tensor:
    """
    Row-wise product with a constant batch of matrices: out[b] = operators[b] @ x[b].

    Args:
        operators: (B, m, n) constant array
        x: (B, n) tensor
    """
    operators = np.asarray(operators, dtype=np.float64)
    if operators.ndim != 3 or x.data.ndim != 2 or operators.shape[0] != x.shape[0] \
            or operators.shape[2] != x.shape[1]:
        raise ShapeError(f"batched_matvec shape mismatch: {operators.shape} x {x.shape}")
    out = np.einsum('bmn,bn->bm', operators, x.data)
    return x.tape.record('batched_matvec', out, (x,),
                         lambda g: (np.einsum('bmn,bm->bn', operators, g),))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, log-sum-exp stabilized"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Fused mean cross-entropy of row-wise softmax(logits) against integer labels.

    Returns:
        Scalar tensor -(1/B) * sum_b log softmax(logits_b)[label_b]
    """
    _require_2d('softmax_cross_entropy', logits)
    labels = np.asarray(labels, dtype=np.int64)
    batch = logits.shape[0]
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError(f"labels out of range for {logits.shape[1]} classes")

    log_probs = log_softmax(logits.data)
    loss = -log_probs[np.arange(batch), labels].mean()

    def pullback(g):
        grad = np.exp(log_probs)
        grad[np.arange(batch), labels] -= 1.0
        return (grad * (float(g) / batch),)

    return logits.tape.record('softmax_cross_entropy', np.array(loss), (logits,), pullback)


def phase_map(theta: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Unit-modulus phases from angles: omega = cos(theta) + j*sin(theta).

    Returns:
        (cos theta, sin theta); the complex vector they form has |omega_i| = 1
    """
    return cos(theta), sin(theta)


def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Reverse pass over the tape that produced `loss`.

    Returns:
        Gradient for every leaf on the tape, zeros for leaves the loss does not reach

    Raises:
        TapeError: non-scalar loss or a tape that was already consumed
    """
    tape = loss.tape
    if tape.consumed:
        raise TapeError("Tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    tape.consumed = True
    loss.grad = np.ones_like(loss.data)

    # Nodes are appended in execution order, so reverse order is a valid topological order
    for node in reversed(tape.nodes):
        if node.grad is None or node.pullback is None:
            continue
        parent_grads = node.pullback(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g

    grads = {}
    for name, leaf in tape.leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads
