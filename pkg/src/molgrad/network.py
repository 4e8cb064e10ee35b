"""Layers, activations and multi-layer forward evaluation.

A network is an ordered tuple of affine-plus-activation layers
``T_n(x) = sigma(W_n x + b_n)``.  Inputs are handled as row vectors, so a
batch is a ``(batch, d)`` array and a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import os
from typing import Optional, Sequence

import numpy as np

from .exceptions import DomainError, FormatError, ShapeError, UnsupportedVariantError

__all__ = [
    "ActivationKind",
    "ActivationSpec",
    "Layer",
    "Network",
    "activation_eval",
    "activation_derivative",
    "activation_second_derivative",
    "layer_forward",
    "network_forward",
    "init_network",
    "conv_layer",
    "dumps_network",
    "loads_network",
    "save_network",
    "load_network",
]


class ActivationKind(str, enum.Enum):
    SRELU = "srelu"
    # sigma(x) = x; only for oracle tests, never certified.
    LINEAR_TEST = "linear-test"


@dataclasses.dataclass(frozen=True)
class ActivationSpec:
    """Componentwise activation.

    ``srelu`` is ReLU with a quadratic transition on ``[-gamma, gamma]``;
    its derivative lies in [0, 1] and its second derivative in
    [0, 1/(2 gamma)].
    """

    kind: ActivationKind = ActivationKind.SRELU
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", ActivationKind(self.kind))
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.kind is ActivationKind.SRELU and not self.gamma > 0:
            raise DomainError(f"sReLU needs gamma > 0, got {self.gamma}")

    @property
    def certifiable(self) -> bool:
        return self.kind is ActivationKind.SRELU


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("activation input contains non-finite values")
    return x


def activation_eval(spec: ActivationSpec, x):
    x = _check_finite(x)
    if spec.kind is ActivationKind.LINEAR_TEST:
        return x.copy()
    g = spec.gamma
    return np.where(x > g, x, np.where(x >= -g, x * x / (4 * g) + x / 2 + g / 4, 0.0))


def activation_derivative(spec: ActivationSpec, x):
    x = _check_finite(x)
    if spec.kind is ActivationKind.LINEAR_TEST:
        return np.ones_like(x)
    g = spec.gamma
    return np.where(x > g, 1.0, np.where(x >= -g, x / (2 * g) + 0.5, 0.0))


def activation_second_derivative(spec: ActivationSpec, x):
    """Second derivative; the kinks at ``|x| = gamma`` take the interior value."""
    x = _check_finite(x)
    if spec.kind is ActivationKind.LINEAR_TEST:
        return np.zeros_like(x)
    g = spec.gamma
    return np.where(np.abs(x) <= g, 1.0 / (2 * g), 0.0)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True, eq=False)
class Layer:
    """One layer ``sigma(W x + b)`` with ``W`` of shape ``(d_out, d_in)``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: ActivationSpec = ActivationSpec()
    nonneg_required: bool = False

    def __post_init__(self):
        w = _frozen(self.weight)
        b = _frozen(self.bias)
        if w.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match weight rows {w.shape[0]}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def replace(self, **changes) -> "Layer":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class Network:
    """Ordered layers ``T_1 .. T_N`` with an optional skip pair ``(a, b)``.

    With a skip, the full map is ``T_{N:b} o (T_{a:1} + T_{b-1:1})``.

    ``decoder_weights`` replaces ``W_n`` in the decoder (Jacobian-transpose)
    pass.  It exists only to build deliberately untied networks for negative
    controls; ``None`` means weight-tied, which is the certified form.
    """

    layers: tuple
    skip: Optional[tuple] = None
    certified: bool = False
    decoder_weights: Optional[tuple] = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for n in range(1, len(layers)):
            if layers[n].in_dim != layers[n - 1].out_dim:
                raise ShapeError(
                    f"layer {n + 1} expects input dim {layers[n].in_dim}, "
                    f"layer {n} outputs {layers[n - 1].out_dim}"
                )
        object.__setattr__(self, "layers", layers)
        if self.skip is not None:
            a, b = (int(v) for v in self.skip)
            N = len(layers)
            if not (1 <= a and b <= N and b - a >= 2):
                raise ShapeError(f"skip ({a}, {b}) needs 1 <= a, b <= N={N}, b - a >= 2")
            if layers[a - 1].out_dim != layers[b - 2].out_dim:
                raise ShapeError(
                    f"skip ({a}, {b}) joins dims {layers[a - 1].out_dim} and {layers[b - 2].out_dim}"
                )
            object.__setattr__(self, "skip", (a, b))
        if self.decoder_weights is not None:
            dec = tuple(_frozen(w) for w in self.decoder_weights)
            if len(dec) != len(layers) or any(
                w.shape != l.weight.shape for w, l in zip(dec, layers)
            ):
                raise ShapeError("decoder_weights must mirror the layer weight shapes")
            object.__setattr__(self, "decoder_weights", dec)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def tied(self) -> bool:
        return self.decoder_weights is None

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def decoder_weight(self, n: int) -> np.ndarray:
        """Weight used in the decoder pass for layer ``n`` (1-based)."""
        if self.decoder_weights is None:
            return self.layers[n - 1].weight
        return self.decoder_weights[n - 1]

    def replace(self, **changes) -> "Network":
        return dataclasses.replace(self, **changes)

    def get_flat_params(self) -> np.ndarray:
        """All parameters as one vector, ordered ``W_1, b_1, W_2, b_2, ...``."""
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def with_flat_params(self, theta) -> "Network":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        layers, pos = [], 0
        for l in self.layers:
            nw, nb = l.weight.size, l.bias.size
            w = theta[pos : pos + nw].reshape(l.weight.shape)
            b = theta[pos + nw : pos + nw + nb]
            pos += nw + nb
            layers.append(l.replace(weight=w, bias=b))
        return self.replace(layers=tuple(layers), certified=False)

    def weight_mask(self, min_layer: int = 2) -> np.ndarray:
        """Boolean mask over the flat parameters selecting weights of layers >= ``min_layer``."""
        parts = []
        for n, l in enumerate(self.layers, start=1):
            parts.append(np.full(l.weight.size, n >= min_layer))
            parts.append(np.zeros(l.bias.size, dtype=bool))
        return np.concatenate(parts)


def _as_input(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != dim:
        raise ShapeError(f"expected input with last dimension {dim}, got shape {x.shape}")
    return x


def layer_forward(layer: Layer, x):
    x = _as_input(x, layer.in_dim)
    return activation_eval(layer.activation, x @ layer.weight.T + layer.bias)


def network_forward(net: Network, x, m: int = 1, n: Optional[int] = None, record: bool = False):
    """Evaluate ``T_{n:m}`` (1-based, inclusive) on ``x``.

    The skip connection is honoured only for the full network ``m=1, n=N``;
    partial ranges are the plain composition.  With ``record=True`` the
    return value is ``(output, [x_m, ..., x_n])``.
    """
    N = net.depth
    n = N if n is None else n
    if not (1 <= m <= n <= N):
        raise IndexError(f"layer range [{m}, {n}] invalid for depth {N}")
    x = _as_input(x, net.layers[m - 1].in_dim)
    use_skip = net.skip is not None and m == 1 and n == N
    a, b = net.skip if use_skip else (None, None)
    outputs = []
    x_a = None
    for k in range(m, n + 1):
        x = layer_forward(net.layers[k - 1], x)
        if use_skip:
            if k == a:
                x_a = x
            if k == b - 1:
                x = x + x_a
        outputs.append(x)
    return (x, outputs) if record else x


def init_network(
    widths: Sequence[int],
    gamma: float = 0.1,
    seed: int = 0,
    nonneg: bool = False,
    skip: Optional[tuple] = None,
) -> Network:
    """Random network with layer dims ``widths = [d_0, d_1, ..., d_N]``.

    Weights are uniform on ``[-s, s]`` with ``s = 1/sqrt(fan_in)``; with
    ``nonneg=True`` layers n >= 2 draw from ``[0, s]`` instead.  Biases
    start at zero.
    """
    if len(widths) < 2:
        raise ShapeError("need at least input and one output width")
    rng = np.random.default_rng(seed)
    spec = ActivationSpec(ActivationKind.SRELU, gamma)
    layers = []
    for n in range(1, len(widths)):
        fan_in, fan_out = widths[n - 1], widths[n]
        s = 1.0 / np.sqrt(fan_in)
        low = 0.0 if (nonneg and n >= 2) else -s
        w = rng.uniform(low, s, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), spec, nonneg_required=n >= 2))
    return Network(tuple(layers), skip=skip)


def conv_layer(kernels, height, width, bias=0.0, pool=False, activation=None, nonneg_required=True):
    """Dense layer realizing a multi-channel 2-D convolution.

    ``kernels`` has shape ``(c_out, c_in, k, k)``; inputs are channel-major
    flattened ``(c_in, height, width)`` images with zero padding.  With
    ``pool=True`` a fixed 2x2 average pooling matrix is pre-multiplied.
    """
    from .imaging import avg_pool_matrix, convolution_matrix

    kernels = np.asarray(kernels, dtype=float)
    c_out, c_in = kernels.shape[:2]
    hw = height * width
    w = np.zeros((c_out * hw, c_in * hw))
    for o in range(c_out):
        for i in range(c_in):
            w[o * hw : (o + 1) * hw, i * hw : (i + 1) * hw] = convolution_matrix(
                kernels[o, i], height, width, boundary="zero"
            )
    if pool:
        p = avg_pool_matrix(height, width)
        w = np.kron(np.eye(c_out), p) @ w
    bias = np.broadcast_to(np.asarray(bias, dtype=float), (w.shape[0],))
    return Layer(w, bias, activation or ActivationSpec(), nonneg_required=nonneg_required)


# -- plain-text container ----------------------------------------------------

_MAGIC = "MOLGRAD-NETWORK"
_VERSION = 1


def dumps_network(net: Network) -> str:
    """Serialize to the versioned text container (17 significant digits).

    Layout::

        MOLGRAD-NETWORK 1
        layers <N>
        skip <a> <b> | skip none
        certified <0|1>
        layer <n> <d_out> <d_in> <activation-kind> <gamma> <nonneg_required 0|1>
        <d_out lines of d_in weights, row-major>
        <one line of d_out biases>
        ... (repeated per layer)
        end
    """
    if not net.tied:
        raise UnsupportedVariantError("untied networks are test-only and not serializable")
    out = io.StringIO()
    out.write(f"{_MAGIC} {_VERSION}\n")
    out.write(f"layers {net.depth}\n")
    out.write("skip none\n" if net.skip is None else f"skip {net.skip[0]} {net.skip[1]}\n")
    out.write(f"certified {int(net.certified)}\n")
    fmt = lambda v: format(v, ".17g")  # noqa: E731
    for n, layer in enumerate(net.layers, start=1):
        act = layer.activation
        out.write(
            f"layer {n} {layer.out_dim} {layer.in_dim} {act.kind.value} "
            f"{fmt(act.gamma)} {int(layer.nonneg_required)}\n"
        )
        for row in layer.weight:
            out.write(" ".join(map(fmt, row)) + "\n")
        out.write(" ".join(map(fmt, layer.bias)) + "\n")
    out.write("end\n")
    return out.getvalue()


def loads_network(text: str) -> Network:
    lines = iter(text.splitlines())

    def take(expect=None):
        try:
            parts = next(lines).split()
        except StopIteration:
            raise FormatError("truncated network file") from None
        if expect is not None and (not parts or parts[0] != expect):
            raise FormatError(f"expected '{expect}' line, got {' '.join(parts)!r}")
        return parts

    head = take(_MAGIC)
    if len(head) != 2 or int(head[1]) != _VERSION:
        raise FormatError(f"unsupported container version {head[1:]}")
    try:
        depth = int(take("layers")[1])
        skip_parts = take("skip")[1:]
        skip = None if skip_parts == ["none"] else (int(skip_parts[0]), int(skip_parts[1]))
        certified = bool(int(take("certified")[1]))
        layers = []
        for n in range(1, depth + 1):
            _, idx, rows, cols, kind, gamma, nonneg = take("layer")
            if int(idx) != n:
                raise FormatError(f"layer index {idx} out of order")
            rows, cols = int(rows), int(cols)
            w = np.array([[float(v) for v in take()] for _ in range(rows)]).reshape(rows, cols)
            bias = [float(v) for v in take()]
            if len(bias) != rows:
                raise FormatError(f"layer {n}: expected {rows} biases, got {len(bias)}")
            layers.append(Layer(w, np.array(bias), ActivationSpec(kind, float(gamma)), bool(int(nonneg))))
        take("end")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed network file: {exc}") from exc
    return Network(tuple(layers), skip=skip, certified=certified)


def save_network(net: Network, path) -> None:
    """Write atomically (temp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(dumps_network(net))
    os.replace(tmp, path)


def load_network(path) -> Network:
    with open(path) as fh:
        return loads_network(fh.read())
