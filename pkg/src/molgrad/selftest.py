"""Closed-form check of the PnP solver on an affine denoiser.

A single sReLU layer evaluated inside its quadratic region ``|W x + b| <= gamma``
gives the affine denoiser

    D(x) = W^T ((W x + b) / (2 gamma) + 1/2) = Q x + c,
    Q = W^T W / (2 gamma),  c = W^T (b / (2 gamma) + 1/2),

for which the PnP fixed point solves a linear system exactly.  ``gamma`` is
chosen large so the iterates never leave the region; the run records the
largest ``|W x + b| / gamma`` it encountered.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .denoiser import denoise
from .exceptions import NumericalError
from .network import ActivationSpec, Layer, Network
from .pnp import LinearOperator, build_subspace, closed_form_quadratic_solve, pnp_solve, recommended_params

__all__ = ["AffineInstance", "affine_instance", "SelftestResult", "run_selftest"]


@dataclasses.dataclass(frozen=True, eq=False)
class AffineInstance:
    net: Network
    Q: np.ndarray
    c: np.ndarray
    A: LinearOperator
    y: np.ndarray
    mu: float
    gamma: float

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.Q, 2))


def affine_instance(seed=0, d0: int = 16, d1: int = 24, gamma: float = 200.0, lipschitz: float = 2.0, mu: float = 4.0) -> AffineInstance:
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d1, d0))
    W *= math.sqrt(2 * gamma * lipschitz) / np.linalg.norm(W, 2)
    b = gamma * rng.uniform(-0.05, 0.05, d1)
    net = Network((Layer(W, b, ActivationSpec("srelu", gamma)),))
    Q = W.T @ W / (2 * gamma)
    c = W.T @ (b / (2 * gamma) + 0.5)
    A = LinearOperator(rng.standard_normal((d0, d0)) / math.sqrt(d0))
    y = rng.uniform(0.0, 1.0, d0)
    return AffineInstance(net, Q, c, A, y, mu, gamma)


@dataclasses.dataclass
class SelftestResult:
    rel_error: float
    iterations: int
    reason: str
    region_ratio: float  # max |W x + b| / gamma seen by D; < 1 means affine throughout
    sigma: float
    tau: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= 1e-6 and self.region_ratio < 1.0


def run_selftest(
    seed=0,
    tau_scale: float = 1.0,
    sigma: float | None = None,
    max_iter: int = 500,
    rel_tol: float = 1e-24,
    lagged: bool = False,
    **instance_kw,
) -> SelftestResult:
    """Solve the instance with strict parameters and compare to the closed form.

    ``tau_scale > 1`` inflates ``tau`` beyond the admissible value (a
    deliberate violation); the solver then runs unchecked.
    """
    inst = affine_instance(seed, **instance_kw)
    beta = 1.0 / inst.lipschitz
    proj, kappa = build_subspace(inst.A, inst.mu)
    params = recommended_params(beta, kappa, inst.mu, sigma=sigma, max_iter=max_iter, rel_tol=rel_tol)
    if tau_scale != 1.0:
        params = dataclasses.replace(params, tau=params.tau * tau_scale)
    layer = inst.net.layers[0]
    ratio = [0.0]

    def D(x):
        ratio[0] = max(ratio[0], float(np.max(np.abs(x @ layer.weight.T + layer.bias))) / inst.gamma)
        return denoise(inst.net, x)

    try:
        v, trace = pnp_solve(D, inst.A, inst.y, proj, params, beta=beta, check=tau_scale == 1.0, lagged=lagged)
    except NumericalError as exc:
        return SelftestResult(math.inf, exc.payload.iterations, "diverged", ratio[0], params.sigma, params.tau)
    exact = closed_form_quadratic_solve(inst.Q, inst.c, inst.A, inst.y, inst.mu, params.sigma, proj)
    err = float(np.linalg.norm(v - exact) / np.linalg.norm(exact))
    return SelftestResult(err, trace.iterations, trace.reason, ratio[0], params.sigma, params.tau)
