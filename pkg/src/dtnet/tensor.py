"""Dense tensor value and the reverse-mode gradient tape.

Operations in :mod:`dtnet.ops` only record themselves when a :class:`Tape` is
active on the current thread and at least one of their inputs is watched by
it. Outside a tape every op is a plain numpy computation.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Immutable-by-convention wrapper around a numpy array (N, C, H, W layout)."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        from dtnet import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from dtnet import ops

        return ops.mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class DecisionLog:
    """Collects digests of the discrete choices (masks, argmaxes) ops make.

    Used by the gradient checker to tell a finite-difference probe that
    stepped across a non-differentiable point from a genuine mismatch.
    """

    def __init__(self):
        self.digests: list[bytes] = []

    def __enter__(self) -> "DecisionLog":
        _decision_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _decision_stack().remove(self)


def _decision_stack() -> list:
    stack = getattr(_state, "decisions", None)
    if stack is None:
        stack = _state.decisions = []
    return stack


def note_decision(choice: np.ndarray) -> None:
    """Record a discrete choice if a :class:`DecisionLog` is open; free otherwise."""
    stack = _decision_stack()
    if stack:
        digest = hashlib.blake2b(np.ascontiguousarray(choice).tobytes(), digest_size=16).digest()
        for log in stack:
            log.digests.append(digest)


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Use as a context manager, ``watch`` the leaves you want gradients for,
    run the forward computation, then call :meth:`gradient` once::

        with Tape() as tape:
            tape.watch(w)
            loss = ops.sum(ops.relu(ops.conv2d(x, w, b)))
        (gw,) = tape.gradient(loss, [w])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._pinned: list[Tensor] = []  # keeps ids of watched leaves from being reused
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, *tensors: Tensor | Iterable[Tensor]) -> None:
        for t in tensors:
            for u in [t] if isinstance(t, Tensor) else t:
                self._tracked.add(id(u))
                self._pinned.append(u)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        if not any(id(t) in self._tracked for t in inputs):
            return
        self._tracked.add(id(out))
        self.nodes.append(_Node(out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Backpropagate from ``target`` and return d(sum target)/d(source) per source."""
        if self._used:
            raise RuntimeError("a tape supports exactly one backward pass")
        self._used = True
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        self.nodes.clear()
        self._pinned.clear()
        return [
            grads.get(id(s), np.zeros_like(s.data)).astype(s.dtype, copy=False)
            for s in sources
        ]


def record(out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out
