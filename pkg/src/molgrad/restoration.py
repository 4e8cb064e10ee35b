"""Glue for deblurring with a trained denoiser.

Picks the PnP parameters the usual way: estimate ``L_D`` on noisy versions
of the observation, map it to ``beta``, take the largest admissible
``sigma = beta/(1-beta)`` and ``tau = gamma_step/(sigma + kappa/2)``.

An estimate taken near the observation can understate the Jacobian norm
elsewhere; sized to that value, ``sigma`` may be too large and the solver
can settle on a spurious fixed point far outside the image range.  With
``lipschitz_set="conservative"`` the estimate also covers the solver's zero
start and random images drawn from the pixel box ``[0, 1]^d``, which gives a
larger ``L`` and a smaller, safer ``sigma``.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .network import Network
from .pnp import (
    LinearOperator,
    PnPParams,
    StepSizeCheck,
    SolveTrace,
    build_subspace,
    check_step_sizes,
    pnp_solve,
    recommended_params,
)
from .verification import LipschitzWarning, estimate_lipschitz, lipschitz_to_beta

__all__ = ["RestoreResult", "restore"]


@dataclasses.dataclass
class RestoreResult:
    image: np.ndarray
    trace: SolveTrace
    params: PnPParams
    lipschitz: float
    beta: float
    step_check: StepSizeCheck


def restore(
    net: Network,
    A: LinearOperator,
    y,
    mu: float,
    *,
    sigma: float | None = None,
    mode: str = "strict",
    gamma_step: float = 0.8,
    lipschitz: float | None = None,
    lipschitz_samples: int = 4,
    noise_sigma: float = 0.05,
    max_iter: int = 500,
    rel_tol: float = 1e-10,
    seed=0,
    lipschitz_set: str = "observation",
) -> RestoreResult:
    """Solve from ``v0 = u0 = 0``; ``sigma=None`` takes the bound ``beta/(1-beta)``.

    ``lipschitz`` skips estimation.  Otherwise ``L`` is estimated on the
    observation plus ``lipschitz_samples`` noisy copies (``"observation"``),
    or additionally on the zero image and as many uniform random images
    (``"conservative"``).
    """
    y = np.asarray(y, dtype=float)
    if lipschitz is None:
        lipschitz = _estimate(net, A, y, lipschitz_set, lipschitz_samples, noise_sigma, seed)
    beta = lipschitz_to_beta(lipschitz)
    proj, kappa = build_subspace(A, mu)
    params = recommended_params(beta, kappa, mu, gamma_step, sigma=sigma, max_iter=max_iter, rel_tol=rel_tol)
    check = check_step_sizes(params, beta, mode)
    v, trace = pnp_solve(net, A, y, proj, params, beta=beta, mode=mode)
    return RestoreResult(v, trace, params, lipschitz, beta, check)


def _estimate(net, A, y, which, count, noise_sigma, seed):
    if which not in ("observation", "conservative"):
        raise ValueError(f"unknown lipschitz_set {which!r}")
    rng = np.random.default_rng(seed)
    base = A.adjoint(y) if A.shape[0] != A.shape[1] else y
    X = [base] + [base + noise_sigma * rng.standard_normal(base.shape) for _ in range(count)]
    if which == "conservative":
        X += [np.zeros_like(base)] + list(rng.uniform(0.0, 1.0, (count, base.size)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LipschitzWarning)
        return estimate_lipschitz(net, X, seed=seed)
