"""The gradient denoiser ``D = grad psi`` with ``psi = sum_i t_i``.

``D`` is evaluated without autodiff: a forward pass records the
pre-activations ``z_n = W_n x_{n-1} + b_n``, then the decoder runs the
Jacobian-transpose recursion

    R_N = W_N^T sigma'(z_N),    R_n = W_n^T (sigma'(z_n) * R_{n+1}),

and ``D(x_0) = R_1``.  The same pass optionally carries a forward-mode
tangent, which gives Jacobian-vector products (and hence the dense
Jacobian) of ``D`` exactly.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .exceptions import CapExceededError, ShapeError, UnsupportedVariantError
from .network import (
    Network,
    activation_derivative,
    activation_eval,
    activation_second_derivative,
    network_forward,
)

__all__ = [
    "DenoiserEval",
    "JACOBIAN_CAP",
    "potential_eval",
    "denoiser_apply",
    "denoiser_apply_skip",
    "denoise",
    "denoiser_eval",
    "denoiser_jvp",
    "denoiser_jacobian",
]

JACOBIAN_CAP = 4096


def _check_input(net: Network, x0):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim not in (1, 2) or x0.shape[-1] != net.in_dim:
        raise ShapeError(f"expected input of dim {net.in_dim}, got shape {x0.shape}")
    return x0


def _encode(net: Network, x0, v=None):
    """Forward pass returning pre-activations ``z_n`` and their tangents.

    Follows the skip path when ``net.skip`` is set: the input of layer ``b``
    is ``x_{b-1} + x_a``.
    """
    a, b = net.skip if net.skip is not None else (None, None)
    zs, dzs = [], []
    x, dx = x0, v
    x_a = dx_a = None
    for n, layer in enumerate(net.layers, start=1):
        z = x @ layer.weight.T + layer.bias
        zs.append(z)
        x = activation_eval(layer.activation, z)
        if v is not None:
            dz = dx @ layer.weight.T
            dzs.append(dz)
            dx = activation_derivative(layer.activation, z) * dz
        if n == a:
            x_a, dx_a = x, dx
        if b is not None and n == b - 1:
            x = x + x_a
            if v is not None:
                dx = dx + dx_a
    return zs, (dzs if v is not None else None)


def _decode(net: Network, zs, dzs=None, passthrough=()):
    """One Jacobian-transpose recursion from layer N down to layer 1.

    Layers listed in ``passthrough`` forward ``R_{n+1}`` unchanged.  Returns
    ``(R_1, dR_1)``; ``dR_1`` is ``None`` without tangents.
    """
    N = net.depth
    R = dR = None
    for n in range(N, 0, -1):
        if n in passthrough:
            continue
        act = net.layers[n - 1].activation
        W = net.decoder_weight(n)
        s = activation_derivative(act, zs[n - 1])
        if dzs is not None:
            ds = activation_second_derivative(act, zs[n - 1]) * dzs[n - 1]
        if R is None:
            g = s
            dg = ds if dzs is not None else None
        else:
            g = s * R
            dg = ds * R + s * dR if dzs is not None else None
        R = g @ W
        dR = dg @ W if dzs is not None else None
    return R, dR


def potential_eval(net: Network, x0):
    """``psi(x_0)``: the sum of the network outputs (skip-aware)."""
    x0 = _check_input(net, x0)
    return network_forward(net, x0).sum(axis=-1)


def denoiser_apply(net: Network, x0):
    """``D(x_0) = R_1(x_0)`` for a network without skip connection."""
    if net.skip is not None:
        raise UnsupportedVariantError("network has a skip connection; use denoiser_apply_skip")
    x0 = _check_input(net, x0)
    zs, _ = _encode(net, x0)
    return _decode(net, zs)[0]


def denoiser_apply_skip(net: Network, x0):
    """``D^{b<-a}(x_0)`` as the sum of two decoder recursions.

    One recursion runs through every layer; the other forwards ``R`` unchanged
    across layers ``a+1 .. b-1`` (the skip branch).  Both use the
    sigma'-gates of the skip-aware forward pass.
    """
    if net.skip is None:
        raise UnsupportedVariantError("network has no skip descriptor")
    x0 = _check_input(net, x0)
    a, b = net.skip
    zs, _ = _encode(net, x0)
    through, _ = _decode(net, zs)
    skipped, _ = _decode(net, zs, passthrough=range(a + 1, b))
    return skipped + through


def denoise(net: Network, x0):
    """Dispatch to the plain or skip denoiser."""
    return denoiser_apply_skip(net, x0) if net.skip is not None else denoiser_apply(net, x0)


def denoiser_jvp(net: Network, x0, v):
    """Return ``(D(x_0), J_D(x_0) v)``.

    ``v`` may hold several directions as rows when ``x_0`` is a single
    vector; otherwise it must match ``x_0``'s shape.
    """
    x0 = _check_input(net, x0)
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != net.in_dim:
        raise ShapeError(f"direction dim {v.shape[-1]} != {net.in_dim}")
    zs, dzs = _encode(net, x0, v)
    if net.skip is None:
        return _decode(net, zs, dzs)
    a, b = net.skip
    r1, dr1 = _decode(net, zs, dzs)
    r2, dr2 = _decode(net, zs, dzs, passthrough=range(a + 1, b))
    return r1 + r2, dr1 + dr2


def denoiser_jacobian(net: Network, x0, mode: str = "analytic", h: float = 1e-5, cap: int = JACOBIAN_CAP):
    """Dense Jacobian ``J_D(x_0)`` of shape ``(d_0, d_0)``.

    ``mode="analytic"`` pushes the identity through the tangent pass;
    ``mode="finite-difference"`` uses central differences of ``D`` with step
    ``h``.
    """
    x0 = _check_input(net, x0)
    if x0.ndim != 1:
        raise ShapeError("denoiser_jacobian takes a single input vector")
    d0 = net.in_dim
    if d0 > cap:
        raise CapExceededError(f"d_0={d0} exceeds Jacobian cap {cap}")
    eye = np.eye(d0)
    if mode == "analytic":
        _, cols = denoiser_jvp(net, x0, eye)
        return cols.T
    if mode == "finite-difference":
        plus = denoise(net, x0 + h * eye)
        minus = denoise(net, x0 - h * eye)
        return ((plus - minus) / (2 * h)).T
    raise ValueError(f"unknown Jacobian mode {mode!r}")


@dataclasses.dataclass(frozen=True, eq=False)
class DenoiserEval:
    """Everything recorded while evaluating ``D`` at one input."""

    output: np.ndarray
    potential: float
    intermediates: list
    encoder_top: np.ndarray

    def csv_row(self) -> dict:
        return {
            "potential": repr(float(self.potential)),
            "output_norm": repr(float(np.linalg.norm(self.output))),
            "encoder_top_mean": repr(float(np.mean(self.encoder_top))),
        }


def denoiser_eval(net: Network, x0) -> DenoiserEval:
    x0 = _check_input(net, x0)
    if x0.ndim != 1:
        raise ShapeError("denoiser_eval takes a single input vector")
    top, inter = network_forward(net, x0, record=True)
    zs, _ = _encode(net, x0)
    return DenoiserEval(
        output=denoise(net, x0),
        potential=float(top.sum()),
        intermediates=inter,
        encoder_top=activation_derivative(net.layers[-1].activation, zs[-1]),
    )
