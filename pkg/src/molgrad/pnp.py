"""Primal-dual plug-and-play solver with subspace restriction.

Solves

    min_v  mu * Phi(v) + (sigma + 1) * phi(v) + 1/2 ||P_{M^perp} v||^2,
    Phi(v) = 1/2 ||A v - y||^2,

where ``phi`` is the implicit regularizer whose proximity operator is the
denoiser ``D``.  ``M`` is the dominant eigenspace of ``A^T A`` (eigenvalues
``>= 1/mu``), which keeps the overall cost convex when ``A`` is ill-posed.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import warnings
from typing import Callable, Optional

import numpy as np

from .exceptions import CapExceededError, DomainError, NumericalError, ShapeError, ValidationError

__all__ = [
    "LinearOperator",
    "SubspaceProjector",
    "PnPParams",
    "StepSizeCheck",
    "SolveTrace",
    "StepSizeWarning",
    "build_subspace",
    "check_step_sizes",
    "recommended_params",
    "grad_f",
    "pnp_solve",
    "closed_form_quadratic_solve",
    "write_trace_csv",
]

DENSE_CAP = 4096


class StepSizeWarning(UserWarning):
    """Step sizes run outside the proven convergence region (relaxed mode)."""


@dataclasses.dataclass(frozen=True, eq=False)
class LinearOperator:
    """Dense matrix ``A`` of shape ``(d, d_0)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ShapeError(f"operator matrix must be 2-D, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self):
        return self.matrix.shape

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.shape[1]:
            raise ShapeError(f"operator expects dim {self.shape[1]}, got {x.shape}")
        return x @ self.matrix.T

    def adjoint(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.shape[0]:
            raise ShapeError(f"adjoint expects dim {self.shape[0]}, got {y.shape}")
        return y @ self.matrix

    def adjoint_defect(self, probes: int = 100, seed=0) -> float:
        """Max relative mismatch of ``<Ax, y>`` and ``<x, A^T y>`` over random probes."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(probes):
            x = rng.standard_normal(self.shape[1])
            y = rng.standard_normal(self.shape[0])
            lhs, rhs = self.forward(x) @ y, x @ self.adjoint(y)
            scale = max(abs(lhs), abs(rhs), 1e-300)
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst

    @classmethod
    def identity(cls, n: int) -> "LinearOperator":
        return cls(np.eye(n))


@dataclasses.dataclass(frozen=True, eq=False)
class SubspaceProjector:
    """Orthogonal projections onto ``M = span(U)`` and its complement."""

    basis: np.ndarray

    def __post_init__(self):
        U = np.array(self.basis, dtype=float)
        if U.ndim != 2:
            raise ShapeError("basis must be a (d_0, r) matrix")
        U.setflags(write=False)
        object.__setattr__(self, "basis", U)

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def project(self, v):
        U = self.basis
        return (v @ U) @ U.T

    def project_perp(self, v):
        return v - self.project(v)

    @property
    def P(self) -> np.ndarray:
        return self.basis @ self.basis.T

    @property
    def P_perp(self) -> np.ndarray:
        return np.eye(self.dim) - self.P

    @classmethod
    def full(cls, n: int) -> "SubspaceProjector":
        return cls(np.eye(n))


def build_subspace(A: LinearOperator, mu: float, cap: int = DENSE_CAP):
    """Dominant eigenspace of ``A^T A`` and the smoothness constant ``kappa``.

    Eigenvectors with eigenvalue ``>= 1/mu`` (ties kept) span ``M``;
    ``kappa = ||mu A^T A - P_M||_2``.
    """
    if not mu > 0:
        raise DomainError(f"mu must be positive, got {mu}")
    d0 = A.shape[1]
    if d0 > cap:
        raise CapExceededError(f"d_0={d0} exceeds dense cap {cap}")
    AtA = A.matrix.T @ A.matrix
    lam, V = np.linalg.eigh((AtA + AtA.T) / 2)
    keep = lam >= 1.0 / mu
    proj = SubspaceProjector(V[:, keep])
    H = mu * AtA - proj.P
    kappa = float(np.max(np.abs(np.linalg.eigvalsh((H + H.T) / 2)))) if d0 else 0.0
    return proj, kappa


@dataclasses.dataclass(frozen=True)
class PnPParams:
    sigma: float
    tau: float
    mu: float
    kappa: float = 0.0
    gamma_step: float = 0.8
    max_iter: int = 500
    rel_tol: float = 1e-10

    def __post_init__(self):
        if self.sigma < 0 or not self.tau > 0 or not self.mu > 0:
            raise DomainError("need sigma >= 0, tau > 0, mu > 0")
        if self.kappa < 0:
            raise DomainError("kappa must be nonnegative")


def recommended_params(beta: float, kappa: float, mu: float, gamma_step: float = 0.8, sigma: float | None = None, **kw) -> PnPParams:
    """Largest admissible ``sigma = beta/(1-beta)`` and ``tau = gamma_step/(sigma + kappa/2)``.

    Passing ``sigma`` overrides the first choice (e.g. for a relaxed run).
    """
    if not 0 < beta < 1:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    if not 0 < gamma_step < 1:
        raise DomainError(f"gamma_step must lie in (0, 1), got {gamma_step}")
    if sigma is None:
        sigma = beta / (1 - beta)
    tau = gamma_step / (sigma + kappa / 2)
    return PnPParams(sigma=sigma, tau=tau, mu=mu, kappa=kappa, gamma_step=gamma_step, **kw)


@dataclasses.dataclass(frozen=True)
class StepSizeCheck:
    passed: bool
    mode: str
    sigma_bound: float
    margin_i: float  # sigma_bound - sigma, >= 0 when condition (i) holds
    margin_ii: float  # 1 - tau*(sigma + kappa/2), > 0 when condition (ii) holds
    warnings: tuple = ()

    @property
    def cond_i(self) -> bool:
        return self.margin_i >= 0

    @property
    def cond_ii(self) -> bool:
        return self.margin_ii > 0

    def describe(self) -> str:
        return (
            f"step sizes ({self.mode}): {'PASS' if self.passed else 'FAIL'}; "
            f"(i) sigma <= {self.sigma_bound:.6g} margin {self.margin_i:.3g}; "
            f"(ii) tau(sigma+kappa/2) < 1 margin {self.margin_ii:.3g}"
        )


def check_step_sizes(params: PnPParams, beta: float, mode: str = "strict") -> StepSizeCheck:
    """Validate ``sigma <= beta/(1-beta)`` and ``tau (sigma + kappa/2) < 1``.

    Relaxed mode only enforces the second condition and reports a violation
    of the first as a warning.
    """
    if not 0 < beta < 1:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    if mode not in ("strict", "relaxed"):
        raise ValueError(f"unknown mode {mode!r}")
    bound = beta / (1 - beta)
    margin_i = bound - params.sigma
    margin_ii = 1 - params.tau * (params.sigma + params.kappa / 2)
    notes = []
    if margin_i < 0 and mode == "relaxed":
        notes.append(
            f"sigma={params.sigma:.6g} exceeds beta/(1-beta)={bound:.6g}; "
            "convergence is not guaranteed"
        )
    passed = margin_ii > 0 and (margin_i >= 0 or mode == "relaxed")
    return StepSizeCheck(passed, mode, bound, margin_i, margin_ii, tuple(notes))


def grad_f(A: LinearOperator, y, proj: SubspaceProjector, mu: float, v):
    """Gradient of ``mu * Phi + 1/2 ||P_{M^perp} .||^2`` at ``v``."""
    v = np.asarray(v, dtype=float)
    y = np.asarray(y, dtype=float)
    if v.shape[-1] != A.shape[1] or y.shape[-1] != A.shape[0] or proj.dim != A.shape[1]:
        raise ShapeError("dimensions of A, y, v and the projector disagree")
    return mu * A.adjoint(A.forward(v) - y) + proj.project_perp(v)


@dataclasses.dataclass
class SolveTrace:
    rel_changes: list = dataclasses.field(default_factory=list)
    fidelity: list = dataclasses.field(default_factory=list)
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.rel_changes)


def _as_operator(D):
    if callable(D):
        return D
    from .denoiser import denoise

    return lambda x: denoise(D, x)


def pnp_solve(
    D,
    A: LinearOperator,
    y,
    proj: SubspaceProjector,
    params: PnPParams,
    v0=None,
    u0=None,
    *,
    beta: Optional[float] = None,
    mode: str = "strict",
    lagged: bool = False,
    check: bool = True,
    callback: Optional[Callable] = None,
):
    """Run the primal-dual iteration; return ``(v, SolveTrace)``.

    ``D`` is a ``Network`` or any callable vector map.  Per iteration::

        u~ = u + sigma v
        u' = u~ - sigma D(u~ / (sigma + 1))
        v~ = tau grad(mu Phi + 1/2 ||P_perp .||^2)(v)
        v' = (1 + tau) v - v~ - tau (2 u' - u)

    ``lagged=True`` uses the previous iteration's ``v~`` in the last line
    instead.  The run stops once ``||v_k - v_{k-1}||^2 / ||v_0||^2`` drops
    below ``rel_tol`` (normalized by ``||v_k||^2`` when ``v_0 = 0``) or
    after ``max_iter`` iterations.

    With ``check`` the step sizes are validated first: condition (ii) always,
    and condition (i) too when ``beta`` is given (``mode`` as in
    :func:`check_step_sizes`).
    """
    y = np.asarray(y, dtype=float)
    d0 = A.shape[1]
    v = np.zeros(d0) if v0 is None else np.array(v0, dtype=float)
    u = np.zeros(d0) if u0 is None else np.array(u0, dtype=float)
    if v.shape != (d0,) or u.shape != (d0,) or y.shape != (A.shape[0],):
        raise ShapeError("initial iterates or data do not match the operator")
    if check:
        if beta is not None:
            res = check_step_sizes(params, beta, mode)
            if not res.passed:
                raise ValidationError(res.describe())
            for note in res.warnings:
                warnings.warn(note, StepSizeWarning, stacklevel=2)
        elif params.tau * (params.sigma + params.kappa / 2) >= 1:
            raise ValidationError("condition (ii) tau*(sigma + kappa/2) < 1 violated")

    Dop = _as_operator(D)
    with np.errstate(over="ignore", invalid="ignore"):
        return _iterate(Dop, A, y, proj, params, v, u, lagged, callback)


def _iterate(Dop, A, y, proj, params, v, u, lagged, callback):
    s, t, mu = params.sigma, params.tau, params.mu
    norm0 = float(v @ v)
    trace = SolveTrace()
    v_tilde_prev = t * grad_f(A, y, proj, mu, v)
    for k in range(params.max_iter):
        u_tilde = u + s * v
        u_new = u_tilde - s * Dop(u_tilde / (s + 1))
        v_tilde = t * grad_f(A, y, proj, mu, v)
        v_new = (1 + t) * v - (v_tilde_prev if lagged else v_tilde) - t * (2 * u_new - u)
        v_tilde_prev = v_tilde
        if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(u_new))):
            trace.reason = "non-finite iterate"
            raise NumericalError(f"non-finite iterate at iteration {k + 1}", payload=trace)
        diff = float(np.sum((v_new - v) ** 2))
        denom = norm0 if norm0 > 0 else float(v_new @ v_new)
        rel = diff / denom if denom > 0 else (0.0 if diff == 0 else math.inf)
        r = A.forward(v_new) - y
        trace.rel_changes.append(rel)
        trace.fidelity.append(0.5 * float(r @ r))
        u, v = u_new, v_new
        if callback is not None:
            callback(k + 1, v, u)
        if rel < params.rel_tol:
            trace.reason = "rel_tol"
            return v, trace
    trace.reason = "max_iter"
    return v, trace


def closed_form_quadratic_solve(Q, c, A: LinearOperator, y, mu: float, sigma: float, proj: SubspaceProjector):
    """Exact minimizer of the PnP objective when ``D(x) = Q x + c``.

    For affine ``D`` with ``Q`` symmetric positive definite the implicit
    regularizer is quadratic with gradient ``Q^{-1}(v - c) - v``, so the
    optimality condition is the linear system

        [mu A^T A + P_perp + (sigma+1)(Q^{-1} - I)] v = mu A^T y + (sigma+1) Q^{-1} c.
    """
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    d0 = A.shape[1]
    if Q.shape != (d0, d0) or c.shape != (d0,):
        raise ShapeError("Q and c must match the operator's domain")
    if not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ValidationError("Q must be symmetric")
    ev = np.linalg.eigvalsh(Q)
    if ev.min() <= 1e-12 * max(ev.max(), 1.0):
        raise ValidationError("Q is singular or indefinite; the oracle needs Q positive definite")
    Qinv = np.linalg.inv(Q)
    AtA = A.matrix.T @ A.matrix
    H = mu * AtA + proj.P_perp + (sigma + 1) * (Qinv - np.eye(d0))
    H = (H + H.T) / 2
    hev = np.linalg.eigvalsh(H)
    if hev.min() <= 1e-12 * max(abs(hev).max(), 1.0):
        raise ValidationError(
            f"optimality system is singular or indefinite (min eigenvalue {hev.min():.3g})"
        )
    rhs = mu * A.adjoint(np.asarray(y, dtype=float)) + (sigma + 1) * Qinv @ c
    return np.linalg.solve(H, rhs)


def write_trace_csv(trace: SolveTrace, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "rel_change", "fidelity"])
        for i, (r, f) in enumerate(zip(trace.rel_changes, trace.fidelity), start=1):
            w.writerow([i, repr(r), repr(f)])
    os.replace(tmp, path)
