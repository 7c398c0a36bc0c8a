"""Dense float64 tensors and the reverse-mode gradient tape."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from csasr.errors import NumericError, TapeError

_TAPES: list["Tape"] = []


class Tensor:
    """A dense row-major float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("backward() called on a tensor that was not produced on an active tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from csasr.numerics import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from csasr.numerics import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from csasr.numerics import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from csasr.numerics import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from csasr.numerics import ops

        return ops.matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; every op executed inside the block whose inputs
    require gradients is appended in execution order. ``backward`` walks the
    record in exact reverse order and accumulates gradients additively.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._released = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._leaves[id(t)] = t
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        """Accumulate d loss / d leaf into every leaf's ``.grad``.

        Unless ``retain`` is set the record is dropped afterwards; tensors and
        closures on the tape form reference cycles that would otherwise only
        be reclaimed by a full garbage-collection pass.
        """
        if self._released:
            raise TapeError("tape already consumed by backward(); pass retain=True to reuse it")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            node.out.grad = g
            in_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        if not retain:
            self.nodes = []
            self._leaves = {}
            self._released = True


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, enforce finiteness and record it on the active tape."""
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite output")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out
