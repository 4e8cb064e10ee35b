"""Training the denoiser with a soft nonnegativity barrier and Adam.

The loss for a clean/noisy pair is

    ||D(noisy) - clean||^2 + alpha * sum_{w in layers n >= 2} max(0, -w)^2.

Because ``D`` already is a Jacobian-transpose product, the parameter
gradient is second order; it is computed by replaying the decoder pass on a
small reverse-mode tape (``molgrad._tape``).  After training, any remaining
negative weights in layers n >= 2 are zeroed by :func:`clamp_negative_weights`.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _tape as tp
from .denoiser import denoise
from .exceptions import DomainError, NumericalError, ShapeError, UnsupportedVariantError
from .network import Network, save_network

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochLog",
    "loss_eval",
    "loss_gradient",
    "barrier_value",
    "adam_step",
    "train",
    "clamp_negative_weights",
    "negative_weight_mass",
    "write_training_csv",
]

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``lr_schedule`` is a sequence of ``(first_epoch, last_epoch, rate)``
    covering ``1..epochs`` without gaps; ``None`` means 1e-4 for the first
    90% of the epochs and 2.5e-6 for the rest.
    """

    epochs: int = 10
    alpha_barrier: float = 1.0
    lr_schedule: Optional[tuple] = None
    batch_size: int = 16
    noise_sigma: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs must be >= 0 and batch_size >= 1")
        if self.alpha_barrier < 0 or self.noise_sigma < 0:
            raise DomainError("alpha_barrier and noise_sigma must be nonnegative")
        if self.lr_schedule is not None:
            sched = tuple((int(a), int(b), float(r)) for a, b, r in self.lr_schedule)
            object.__setattr__(self, "lr_schedule", sched)
        self.schedule()  # validates

    def schedule(self) -> tuple:
        K = self.epochs
        if self.lr_schedule is None:
            if K == 0:
                return ()
            cut = max(1, math.ceil(0.9 * K))
            sched = ((1, cut, 1e-4),) + (((cut + 1, K, 2.5e-6),) if cut < K else ())
            return sched
        expected = 1
        for first, last, rate in self.lr_schedule:
            if first != expected or last < first or not rate > 0:
                raise DomainError(f"learning-rate schedule must partition 1..{K} with rates > 0")
            expected = last + 1
        if expected != K + 1:
            raise DomainError(f"learning-rate schedule must end at epoch {K}")
        return self.lr_schedule

    def rate(self, epoch: int) -> float:
        for first, last, r in self.schedule():
            if first <= epoch <= last:
                return r
        raise DomainError(f"no learning rate for epoch {epoch}")


@dataclasses.dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, grad, params, lr: float):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    grad = np.asarray(grad, dtype=float)
    params = np.asarray(params, dtype=float)
    if grad.shape != params.shape or grad.shape != state.first_moment.shape:
        raise ShapeError("gradient, parameters and Adam state must share one shape")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return dataclasses.replace(state, first_moment=m, second_moment=v, step_count=t), new


def barrier_value(net: Network, alpha: float) -> float:
    theta = net.get_flat_params()[net.weight_mask()]
    return alpha * float(np.sum(np.minimum(theta, 0.0) ** 2))


def _pairs(net, clean, noisy):
    clean = np.asarray(clean, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if clean.shape != noisy.shape or clean.shape[-1] != net.in_dim or clean.ndim not in (1, 2):
        raise ShapeError(f"clean {clean.shape} / noisy {noisy.shape} do not fit input dim {net.in_dim}")
    return clean, noisy


def loss_eval(net: Network, clean, noisy, alpha: float) -> float:
    """Data term plus barrier.  For a batch of rows the data term is averaged."""
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    clean, noisy = _pairs(net, clean, noisy)
    r = denoise(net, noisy) - clean
    batch = 1 if r.ndim == 1 else r.shape[0]
    return float(np.sum(r * r)) / batch + barrier_value(net, alpha)


def _graph(net: Network, noisy, clean):
    """Record ``D(noisy)`` and the loss on the tape; return (loss, leaves)."""
    noisy2 = np.atleast_2d(noisy)
    clean2 = np.atleast_2d(clean)
    params = [(tp.Var(l.weight), tp.Var(l.bias)) for l in net.layers]
    a, b = net.skip if net.skip is not None else (None, None)
    x = tp.Var(noisy2)
    zs, x_a = [], None
    for n, (layer, (W, bb)) in enumerate(zip(net.layers, params), start=1):
        z = tp.affine(x, W, bb)
        zs.append(z)
        x = tp.activation(z, layer.activation)
        if n == a:
            x_a = x
        if b is not None and n == b - 1:
            x = tp.add(x, x_a)

    def decode(passthrough=()):
        R = None
        for n in range(net.depth, 0, -1):
            if n in passthrough:
                continue
            s = tp.activation_prime(zs[n - 1], net.layers[n - 1].activation)
            g = s if R is None else tp.mul(s, R)
            R = tp.rmatmul(g, params[n - 1][0])
        return R

    out = decode()
    if net.skip is not None:
        out = tp.add(out, decode(range(a + 1, b)))
    loss = tp.squared_error(out, clean2, scale=1.0 / noisy2.shape[0])
    return loss, params


def loss_gradient(net: Network, clean, noisy, alpha: float) -> np.ndarray:
    """Exact gradient of :func:`loss_eval` w.r.t. ``net.get_flat_params()``."""
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    if not net.tied:
        raise UnsupportedVariantError("training is defined for weight-tied networks only")
    clean, noisy = _pairs(net, clean, noisy)
    loss, params = _graph(net, noisy, clean)
    tp.backward(loss)
    parts = []
    for (W, b), layer in zip(params, net.layers):
        gw = W.grad if W.grad is not None else np.zeros_like(layer.weight)
        gb = b.grad if b.grad is not None else np.zeros_like(layer.bias)
        parts.append(np.concatenate([np.ravel(gw), np.ravel(gb)]))
    grad = np.concatenate(parts)
    theta = net.get_flat_params()
    mask = net.weight_mask()
    grad[mask] += 2 * alpha * np.minimum(theta[mask], 0.0)
    return grad


def negative_weight_mass(net: Network) -> tuple:
    """``(sum of |negative weights|, that sum over sum of |weights|)`` for layers n >= 2."""
    theta = net.get_flat_params()[net.weight_mask()]
    neg = float(-np.sum(np.minimum(theta, 0.0)))
    total = float(np.sum(np.abs(theta)))
    return neg, (neg / total if total > 0 else 0.0)


def clamp_negative_weights(net: Network) -> Network:
    """Zero every negative weight of layers n >= 2; biases and ``W_1`` untouched."""
    layers = tuple(
        l.replace(weight=np.maximum(l.weight, 0.0)) if n >= 2 else l
        for n, l in enumerate(net.layers, start=1)
    )
    dec = None
    if net.decoder_weights is not None:
        dec = tuple(np.maximum(w, 0.0) if n >= 2 else w for n, w in enumerate(net.decoder_weights, start=1))
    return net.replace(layers=layers, decoder_weights=dec, certified=net.tied)


@dataclasses.dataclass(frozen=True)
class EpochLog:
    epoch: int
    mean_loss: float
    barrier: float
    negative_mass: float


def _as_matrix(dataset, d0):
    rows = []
    for item in dataset:
        v = item.vector if hasattr(item, "vector") else np.ravel(np.asarray(item, dtype=float))
        rows.append(v)
    X = np.array(rows, dtype=float)
    if X.ndim != 2 or X.shape[1] != d0:
        raise ShapeError(f"dataset images have {X.shape[-1]} pixels, network expects {d0}")
    return X


def train(config: TrainConfig, dataset: Sequence, net: Network):
    """Minibatch Adam on the barrier loss; returns ``(net, [EpochLog, ...])``.

    Noise is redrawn for every batch.  The run is deterministic for a fixed
    ``config.seed``.  A non-finite loss raises :class:`NumericalError` whose
    payload holds the offending batch.
    """
    if len(dataset) == 0:
        raise DomainError("training dataset is empty")
    if not net.tied:
        raise UnsupportedVariantError("training is defined for weight-tied networks only")
    X = _as_matrix(dataset, net.in_dim)
    if config.epochs == 0:
        return net, []
    rng = np.random.default_rng(config.seed)
    theta = net.get_flat_params()
    state = AdamState.zeros(theta.size, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_eps)
    history = []
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    for epoch in range(1, config.epochs + 1):
        lr = config.rate(epoch)
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), config.batch_size):
            idx = order[start : start + config.batch_size]
            clean = X[idx]
            noisy = clean + config.noise_sigma * rng.standard_normal(clean.shape)
            current = net.with_flat_params(theta)
            try:
                data = loss_eval(current, clean, noisy, 0.0)
            except DomainError:  # non-finite activations: same failure as a non-finite loss
                data = math.nan
            loss = data + barrier_value(current, config.alpha_barrier)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}",
                    payload={"epoch": epoch, "clean": clean, "noisy": noisy, "params": theta},
                )
            grad = loss_gradient(current, clean, noisy, config.alpha_barrier)
            state, theta = adam_step(state, grad, theta, lr)
            total += data * len(idx)
            count += len(idx)
        current = net.with_flat_params(theta)
        barrier = barrier_value(current, config.alpha_barrier)
        entry = EpochLog(epoch, total / count + barrier, barrier, negative_weight_mass(current)[0])
        history.append(entry)
        log.info("epoch %d loss %.6g barrier %.3g", epoch, entry.mean_loss, barrier)
        if ckpt_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_network(current, ckpt_dir / f"checkpoint_{epoch:05d}.net")
    return net.with_flat_params(theta), history


def write_training_csv(history, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "barrier", "negative_mass"])
        for e in history:
            w.writerow([e.epoch, repr(e.mean_loss), repr(e.barrier), repr(e.negative_mass)])
    os.replace(tmp, path)
