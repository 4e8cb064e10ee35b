"""Minimal reverse-mode tape over numpy arrays.

Only the handful of ops needed to differentiate the denoiser output with
respect to the network parameters.  Arrays are row-batched: a value of
shape ``(batch, d)`` holds one vector per row.
"""

from __future__ import annotations

import numpy as np

from .network import activation_derivative, activation_eval, activation_second_derivative


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g


def affine(x: Var, W: Var, b: Var) -> Var:
    """``x @ W.T + b``."""

    def back(G):
        x._accumulate(G @ W.value)
        W._accumulate(G.T @ x.value)
        b._accumulate(G.sum(axis=0))

    return Var(x.value @ W.value.T + b.value, (x, W, b), back)


def rmatmul(g: Var, W: Var) -> Var:
    """``g @ W`` (applies ``W^T`` to each row vector)."""

    def back(G):
        g._accumulate(G @ W.value.T)
        W._accumulate(g.value.T @ G)

    return Var(g.value @ W.value, (g, W), back)


def activation(z: Var, spec) -> Var:
    def back(G):
        z._accumulate(activation_derivative(spec, z.value) * G)

    return Var(activation_eval(spec, z.value), (z,), back)


def activation_prime(z: Var, spec) -> Var:
    def back(G):
        z._accumulate(activation_second_derivative(spec, z.value) * G)

    return Var(activation_derivative(spec, z.value), (z,), back)


def mul(a: Var, b: Var) -> Var:
    def back(G):
        a._accumulate(G * b.value)
        b._accumulate(G * a.value)

    return Var(a.value * b.value, (a, b), back)


def add(a: Var, b: Var) -> Var:
    def back(G):
        a._accumulate(G)
        b._accumulate(G)

    return Var(a.value + b.value, (a, b), back)


def squared_error(a: Var, target, scale: float = 1.0) -> Var:
    """``scale * sum((a - target)^2)`` as a scalar."""
    r = a.value - target

    def back(G):
        a._accumulate(2 * scale * G * r)

    return Var(scale * float(np.sum(r * r)), (a,), back)


def backward(out: Var) -> None:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    out.grad = 1.0
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
