"""Dense tensor with reverse-mode differentiation.

Every op in :mod:`cesst.functional` returns a :class:`Tensor` whose ``_parents``
and ``_backward`` fields link it into the computation graph.  :func:`backward`
orders that graph into a :class:`GradTape` and replays it in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

# Per-precision tolerances used by tests and gradient checks.
TOLERANCE = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}

_state = {"grad_enabled": True, "check_finite": True, "macs": None}


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf while finite-checking is on."""


class GraphError(RuntimeError):
    """Raised for misuse of the gradient graph (non-scalar loss, reused graph)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Turn per-op NaN/Inf detection on or off (it is on by default)."""
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


def set_finite_checks(enabled: bool) -> None:
    _state["check_finite"] = enabled


class MacCounter:
    """Accumulates multiply-accumulate counts reported by matmul and conv2d."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    prev = _state["macs"]
    counter = MacCounter()
    _state["macs"] = counter
    try:
        yield counter
    finally:
        _state["macs"] = prev


def _record_macs(op: str, n: int) -> None:
    counter = _state["macs"]
    if counter is not None:
        counter.add(op, n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ValueError(f"every tensor extent must be >= 1, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self) -> None:
        backward(self)

    # -- operator sugar (implemented in functional) -----------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __pow__(self, p: float):
        from . import functional as F
        return F.power(self, p)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and, when recording, link it to ``parents``.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    """
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out._released = False
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class GradTape:
    """Topologically ordered record of the ops that produced a tensor.

    ``ops`` lists every non-leaf tensor reachable from the output such that
    each entry appears after all of its parents; reversing it gives a valid
    order for propagating gradients.
    """

    def __init__(self, ops: list[Tensor], leaves: list[Tensor]):
        self.ops = ops
        self.leaves = leaves

    @classmethod
    def record(cls, output: Tensor) -> "GradTape":
        order: list[Tensor] = []
        leaves: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(output, 0)]
        while stack:
            node, i = stack.pop()
            key = id(node)
            if i == 0:
                if state.get(key) == 2:
                    continue
                if node._released:
                    raise GraphError("gradient graph was already consumed by a previous backward()")
                state[key] = 1
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                pstate = state.get(id(parent))
                if pstate == 1:
                    raise GraphError("cycle detected in gradient graph")
                if pstate is None and parent.requires_grad:
                    stack.append((parent, 0))
            else:
                state[key] = 2
                if node._parents:
                    order.append(node)
                elif node.requires_grad:
                    leaves.append(node)
        return cls(order, leaves)

    def is_topological(self) -> bool:
        pos = {id(t): i for i, t in enumerate(self.ops)}
        for i, t in enumerate(self.ops):
            for p in t._parents:
                if id(p) in pos and pos[id(p)] >= i:
                    return False
        return True

    def run(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.data) if seed is None else seed
        }
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                if parent._parents:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        if not output._parents and output.requires_grad:
            output.grad = grads[id(output)] if output.grad is None else output.grad + grads[id(output)]
        # Free the graph: a second backward over the same tape is an error.
        for node in self.ops:
            node._backward = None
            node._parents = ()
            node._released = True


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every leaf tensor that requires gradients.

    The graph is released afterwards; calling ``backward`` again on the same
    loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("gradient graph was already consumed by a previous backward()")
    if not loss.requires_grad:
        # Constant w.r.t. every tracked tensor: all gradients stay as they are.
        return GradTape([], [])
    tape = GradTape.record(loss)
    tape.run(loss)
    return tape


def graph_nbytes(output: Tensor) -> int:
    """Bytes held by the non-leaf activations reachable from ``output``."""
    seen: set[int] = set()
    stack = [output]
    total = 0
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._parents:
            total += t.data.nbytes
            stack.extend(t._parents)
    return total
