"""Minimal reverse-mode differentiation for the fixed op set used here.

A ``Var`` wraps a numpy array. Operations that should be differentiated are
recorded on a ``Tape``; calling :func:`backward` walks the tape in reverse
and accumulates gradients into ``Var.grad``. This is deliberately not a
general autodiff engine: only the operations in :mod:`solidtex.ops` know how
to record themselves.
"""

from __future__ import annotations

import numpy as np


class TapeConsumedError(RuntimeError):
    """Raised when a tape's backward pass is run more than once."""


class Var:
    """A numpy array participating in differentiation.

    ``grad`` is ``None`` until the variable receives a contribution during a
    backward pass; a parameter that never participated in the forward pass
    keeps ``grad is None`` (read it through :func:`grad_value`).
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of executed operations.

    Single-owner: a tape must not be shared across concurrent tasks, and its
    backward pass can run only once.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def record(self, out, inputs, backward_fn):
        """Register ``out = f(inputs)`` with ``backward_fn(grad_out) -> grads``.

        ``backward_fn`` must return one gradient (or ``None``) per input, in
        input order.
        """
        self._nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._nodes)


def backward(tape, loss):
    """Accumulate gradients of scalar ``loss`` into every recorded input."""
    if tape._consumed:
        raise TapeConsumedError("tape backward pass already ran")
    tape._consumed = True
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for var, g in zip(inputs, grads):
            if g is None:
                continue
            if var.grad is None:
                var.grad = g
            else:
                var.grad = var.grad + g


def grad_value(var):
    """Gradient of ``var`` after a backward pass; zeros if it was off-path."""
    if var.grad is None:
        return np.zeros_like(var.data)
    return var.grad
