"""Dense tensors with reverse-mode gradients recorded on an explicit tape.

A :class:`Tape` owns every differentiable tensor of one computation: leaf
parameters are created through ``tape.tensor(...)`` / ``tape.parameter(...)``
and each op application appends one :class:`TapeNode`. Execution order is a
topological order by construction, so the backward pass is a single reverse
sweep over the node list.

Tensors are thin wrappers around numpy arrays. Test mode is float64 with
finite-value checking after every op; float32 is available for training runs
that do not need bit-level reproducibility.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractViolation, NumericDomainError

Array = np.ndarray


class TapeNode:
    """One recorded op application: inputs, output, and its local gradient rule.

    ``grad_fn(out_grad, needs)`` returns one gradient array (or None) per
    input; ``needs[i]`` tells the rule whether input i is on a path to any
    leaf so it may skip dead gradients.
    """

    __slots__ = ("op", "inputs", "output", "grad_fn", "needs")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor",
                 grad_fn: Callable[[Array, tuple[bool, ...]], list[Array | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.grad_fn = grad_fn
        self.needs = tuple(t.requires_grad or t._producer is not None for t in inputs)


class Tensor:
    """N-dimensional real array, optionally participating in gradient computation."""

    __slots__ = ("values", "requires_grad", "grad", "tape", "_producer")

    def __init__(self, values, requires_grad: bool = False, tape: "Tape | None" = None,
                 dtype=None):
        if tape is not None:
            dtype = tape.dtype if dtype is None else dtype
        if dtype is None:
            arr = np.asarray(values)
            # keep an explicit float32 array as-is; everything else is f64
            dtype = arr.dtype if arr.dtype in (np.dtype(np.float32),
                                               np.dtype(np.float64)) else np.float64
            values = arr
        values = np.asarray(values, dtype=dtype)
        if requires_grad and tape is None:
            raise ContractViolation("a tensor that requires grad must live on a tape")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = np.zeros_like(values) if requires_grad else None
        self.tape = tape
        self._producer: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        """Same values, no tape, no gradient tracking."""
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        flags = "param" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, {flags})"

    # Arithmetic sugar; the actual rules live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.slice_(self, key)


class Tape:
    """Ordered record of op applications for one single-threaded computation.

    Distinct tapes are fully independent; nothing here touches global state.
    """

    def __init__(self, dtype=np.float64, check_finite: bool | None = None):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ContractViolation(f"unsupported dtype {dtype}")
        # Finite-value checking is the test-mode contract; on by default for f64.
        self.check_finite = (self.dtype == np.dtype(np.float64)
                             if check_finite is None else check_finite)
        self.nodes: list[TapeNode] = []
        self.recording = True

    def tensor(self, values, requires_grad: bool = False) -> Tensor:
        return Tensor(values, requires_grad=requires_grad, tape=self)

    def parameter(self, values) -> Tensor:
        return self.tensor(values, requires_grad=True)

    def record(self, node: TapeNode) -> None:
        node.output._producer = node
        self.nodes.append(node)

    def no_grad(self):
        """Context manager: compute values without recording nodes."""
        return _NoGrad(self)

    def clear(self) -> None:
        """Drop recorded nodes (leaf tensors stay usable)."""
        self.nodes.clear()

    def mark(self) -> int:
        return len(self.nodes)

    def truncate(self, mark: int) -> None:
        for node in self.nodes[mark:]:
            node.output._producer = None
        del self.nodes[mark:]

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Repeated calls without zeroing accumulate into leaf grads;
        intermediate grads are reset at the start of each pass.
        """
        if loss.tape is not self:
            raise ContractViolation("loss does not belong to this tape")
        if loss.values.shape != ():
            raise ContractViolation(f"backward expects a scalar loss, got shape {loss.shape}")

        if loss._producer is None:
            if loss.requires_grad:
                loss.grad = loss.grad + np.ones((), dtype=self.dtype)
            return

        # Intermediate adjoints start fresh each pass; only leaves accumulate.
        seeds: dict[int, Array] = {id(loss): np.ones((), dtype=self.dtype)}
        for node in reversed(self.nodes):
            out_grad = seeds.pop(id(node.output), None)
            if out_grad is None:
                continue
            grads = node.grad_fn(out_grad, node.needs)
            for inp, g, needed in zip(node.inputs, grads, node.needs):
                if g is None or not needed:
                    continue
                if self.check_finite and not np.all(np.isfinite(g)):
                    raise NumericDomainError(f"non-finite gradient out of op '{node.op}'")
                if inp._producer is not None:
                    prev = seeds.get(id(inp))
                    seeds[id(inp)] = g if prev is None else prev + g
                elif inp.requires_grad:
                    inp.grad = inp.grad + np.asarray(g, dtype=self.dtype)

    def check_values(self, op: str, values: Array) -> None:
        if self.check_finite and not np.all(np.isfinite(values)):
            raise NumericDomainError(f"non-finite values out of op '{op}'")


class _NoGrad:
    def __init__(self, tape: Tape):
        self.tape = tape
        self._was = True

    def __enter__(self):
        self._was = self.tape.recording
        self.tape.recording = False
        return self.tape

    def __exit__(self, *exc):
        self.tape.recording = self._was
        return False


def merge_tape(tensors: Iterable[Tensor]) -> Tape | None:
    """The single tape shared by the given tensors (None if all are constants)."""
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractViolation("op inputs live on different tapes")
    return tape
