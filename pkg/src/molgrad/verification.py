"""Executable checks of the denoiser's structural guarantees.

Each ``check_*`` function returns a :class:`VerificationReport`.  The
Lipschitz estimator returns a plain float, and the 1-D s-Prox oracle
tabulates the implicit regularizer ``phi = psi^* - z^2/2`` on a grid.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import warnings
from typing import Optional, Sequence

import numpy as np

from .denoiser import JACOBIAN_CAP, denoise, denoiser_jacobian, denoiser_jvp, potential_eval
from .exceptions import CapExceededError, DomainError, ShapeError
from .network import ActivationKind, Network

__all__ = [
    "VerificationReport",
    "ProxOracle1D",
    "LipschitzWarning",
    "check_jacobian_symmetry",
    "check_monotonicity",
    "check_convexity",
    "check_nonnegativity",
    "check_lipschitz_lower_bound",
    "estimate_lipschitz",
    "lipschitz_to_beta",
    "sprox_oracle_build",
    "sprox_oracle_check",
    "run_suite",
    "reports_to_text",
    "reports_to_csv",
]

SYMMETRY_TOL_ANALYTIC = 1e-8
SYMMETRY_TOL_FD = 1e-5
CONVEXITY_TOL = 1e-8
MONOTONICITY_TOL = 1e-10


class LipschitzWarning(UserWarning):
    """Power iteration stopped before reaching its tolerance."""


@dataclasses.dataclass(frozen=True)
class VerificationReport:
    prop: str
    passed: bool
    value: float
    tolerance: float
    samples: int
    worst_case: str = ""
    notes: str = ""

    def to_text(self) -> str:
        lines = [
            f"[{self.prop}]",
            f"  status     : {'PASS' if self.passed else 'FAIL'}",
            f"  measured   : {self.value:.6g}",
            f"  tolerance  : {self.tolerance:.3g}",
            f"  samples    : {self.samples}",
        ]
        if self.worst_case:
            lines.append(f"  worst case : {self.worst_case}")
        if self.notes:
            lines.append(f"  notes      : {self.notes}")
        return "\n".join(lines)

    def csv_row(self) -> list:
        return [self.prop, int(self.passed), repr(float(self.value)), repr(self.tolerance), self.samples, self.worst_case, self.notes]


CSV_HEADER = ["property", "passed", "value", "tolerance", "samples", "worst_case", "notes"]


def reports_to_text(reports: Sequence[VerificationReport]) -> str:
    return "\n\n".join(r.to_text() for r in reports) + "\n"


def reports_to_csv(reports: Sequence[VerificationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def _samples(net: Network, count: int, seed, scale: float, center: float = 0.0):
    rng = np.random.default_rng(seed)
    return center + scale * rng.standard_normal((count, net.in_dim))


def _check_cap(net, cap):
    if net.in_dim > cap:
        raise CapExceededError(f"d_0={net.in_dim} exceeds Jacobian cap {cap}")


def check_jacobian_symmetry(
    net: Network,
    samples: int = 100,
    tol: Optional[float] = None,
    seed=0,
    mode: str = "analytic",
    scale: float = 1.0,
    center: float = 0.0,
    cap: int = JACOBIAN_CAP,
) -> VerificationReport:
    """Max entrywise asymmetry ``|J - J^T|`` over random inputs."""
    _check_cap(net, cap)
    if tol is None:
        tol = SYMMETRY_TOL_ANALYTIC if mode == "analytic" else SYMMETRY_TOL_FD
    worst, where = 0.0, ""
    for i, x in enumerate(_samples(net, samples, seed, scale, center)):
        J = denoiser_jacobian(net, x, mode=mode, cap=cap)
        asym = float(np.max(np.abs(J - J.T)))
        if asym > worst or not where:
            worst, where = asym, f"sample {i}"
    return VerificationReport("jacobian_symmetry", worst <= tol, worst, tol, samples, where, f"{mode} Jacobian")


def _min_sym_eig(J):
    S = (J + J.T) / 2
    lam, V = np.linalg.eigh(S)
    return lam[0], V[:, 0]


def check_monotonicity(
    net: Network,
    pairs: int = 1000,
    seed=0,
    scale: float = 1.0,
    center: float = 0.0,
    adversarial: bool = False,
    tol: float = MONOTONICITY_TOL,
) -> VerificationReport:
    """Min of ``<D(x) - D(y), x - y>`` over random pairs.

    With ``adversarial=True`` every second pair is replaced by a short step
    along the most negative eigendirection of the symmetrized Jacobian at
    ``x`` (a targeted counterexample search; needs ``d_0`` under the cap).
    """
    rng = np.random.default_rng(seed)
    X = center + scale * rng.standard_normal((pairs, net.in_dim))
    Y = center + scale * rng.standard_normal((pairs, net.in_dim))
    if adversarial:
        _check_cap(net, JACOBIAN_CAP)
        for i in range(0, pairs, 2):
            _, v = _min_sym_eig(denoiser_jacobian(net, X[i]))
            Y[i] = X[i] + 1e-3 * scale * v
    inner = np.einsum("ij,ij->i", denoise(net, X) - denoise(net, Y), X - Y)
    i = int(np.argmin(inner))
    value = float(inner[i])
    return VerificationReport(
        "monotonicity", value >= -tol, value, tol, pairs, f"pair {i}", "adversarial" if adversarial else "random pairs"
    )


def check_convexity(
    net: Network,
    samples: int = 100,
    seed=0,
    scale: float = 1.0,
    center: float = 0.0,
    tol: float = CONVEXITY_TOL,
    cap: int = JACOBIAN_CAP,
) -> VerificationReport:
    """Min eigenvalue of the symmetrized Jacobian (Hessian of ``psi``)."""
    _check_cap(net, cap)
    worst, where = math.inf, ""
    for i, x in enumerate(_samples(net, samples, seed, scale, center)):
        lam, _ = _min_sym_eig(denoiser_jacobian(net, x, cap=cap))
        if lam < worst:
            worst, where = float(lam), f"sample {i}"
    return VerificationReport("convexity", worst >= -tol, worst, tol, samples, where)


def check_nonnegativity(net: Network) -> VerificationReport:
    """Minimum weight entry over layers n >= 2; passes iff >= 0 exactly."""
    worst, where = math.inf, ""
    for n, layer in enumerate(net.layers[1:], start=2):
        w = layer.weight
        if w.size and w.min() < worst:
            worst = float(w.min())
            where = f"layer {n} entry {tuple(int(i) for i in np.unravel_index(int(np.argmin(w)), w.shape))}"
    if net.decoder_weights is not None:
        for n, w in enumerate(net.decoder_weights[1:], start=2):
            if w.size and w.min() < worst:
                worst, where = float(w.min()), f"decoder layer {n}"
    if worst is math.inf:
        worst = 0.0  # single-layer nets have nothing to audit
    notes = ""
    if any(l.activation.kind is not ActivationKind.SRELU for l in net.layers):
        notes = "non-certifiable activation present"
    return VerificationReport("nonnegativity", worst >= 0, worst, 0.0, net.n_params, where, notes)


def estimate_lipschitz(
    net: Network,
    input_set,
    iters: int = 200,
    tol: float = 1e-9,
    seed=0,
    cap: int = JACOBIAN_CAP,
) -> float:
    """Max over ``input_set`` of the spectral norm ``||J_D(x)||``.

    Power iteration on ``J^T J``.  For weight-tied nets ``J`` is symmetric
    and applied matrix-free through exact Jacobian-vector products; untied
    nets fall back to the dense Jacobian (``d_0`` under ``cap``).  Emits a
    :class:`LipschitzWarning` if some input did not reach the relative
    tolerance within ``iters`` steps.
    """
    X = np.atleast_2d(np.asarray(input_set, dtype=float))
    if X.shape[0] == 0 or X.shape[1] != net.in_dim:
        raise ShapeError("input_set must be a nonempty collection of input vectors")
    rng = np.random.default_rng(seed)
    best, unconverged = 0.0, 0
    for x in X:
        if net.tied:
            apply = lambda v, x=x: denoiser_jvp(net, x, v)[1]  # noqa: E731
            apply_t = apply
        else:
            if net.in_dim > cap:
                raise CapExceededError("untied nets need the dense Jacobian")
            J = denoiser_jacobian(net, x, cap=cap)
            apply, apply_t = (lambda v, J=J: J @ v), (lambda v, J=J: J.T @ v)
        v = rng.standard_normal(net.in_dim)
        v /= np.linalg.norm(v)
        lam_prev, converged = 0.0, False
        for _ in range(iters):
            w = apply_t(apply(v))
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                converged = True
                break
            v = w / lam
            if abs(lam - lam_prev) <= tol * lam:
                converged = True
                break
            lam_prev = lam
        unconverged += not converged
        best = max(best, math.sqrt(lam))
    if unconverged:
        warnings.warn(
            f"power iteration did not converge for {unconverged} of {len(X)} inputs", LipschitzWarning, stacklevel=2
        )
    return best


def lipschitz_to_beta(lipschitz: float, eps: float = 1e-6) -> float:
    """``beta = 1 / max(L, 1 + eps)``: any ``L' >= L`` is also a Lipschitz constant."""
    return 1.0 / max(lipschitz, 1.0 + eps)


def check_lipschitz_lower_bound(
    net: Network, lipschitz: float, pairs: int = 10_000, seed=0, scale: float = 1.0, center: float = 0.0, slack: float = 1e-6
) -> VerificationReport:
    """Count sampled pairs with ``||D(x) - D(y)|| > (L + slack) ||x - y||``.

    The estimate comes from Jacobian norms at finitely many inputs, so it is
    only a lower bound of the true constant; violations are recorded, and the
    report passes iff none occurred in the sampled region.
    """
    rng = np.random.default_rng(seed)
    X = center + scale * rng.standard_normal((pairs, net.in_dim))
    Y = center + scale * rng.standard_normal((pairs, net.in_dim))
    num = np.linalg.norm(denoise(net, X) - denoise(net, Y), axis=1)
    den = np.linalg.norm(X - Y, axis=1)
    ratio = num / np.where(den > 0, den, 1.0)
    viol = int(np.count_nonzero(num > (lipschitz + slack) * den))
    i = int(np.argmax(ratio))
    return VerificationReport(
        "lipschitz_lower_bound", viol == 0, float(ratio[i]), lipschitz + slack, pairs, f"pair {i}", f"{viol} violations"
    )


# -- 1-D s-Prox witness ------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class ProxOracle1D:
    """Grid tabulation of ``psi``, its conjugate and ``phi = psi^* - z^2/2``."""

    grid: np.ndarray
    psi: np.ndarray
    psi_conj: np.ndarray
    phi: np.ndarray
    # index of the maximizing x for each z; on the boundary means truncated
    argmax: np.ndarray

    @property
    def grid_min(self) -> float:
        return float(self.grid[0])

    @property
    def grid_max(self) -> float:
        return float(self.grid[-1])

    @property
    def grid_points(self) -> int:
        return self.grid.size

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])


def _conjugate(grid, psi, chunk: int = 512):
    """Brute-force ``max_x (x z - psi(x))`` for every ``z`` on the grid."""
    conj = np.empty_like(grid)
    arg = np.empty(grid.size, dtype=int)
    for s in range(0, grid.size, chunk):
        z = grid[s : s + chunk, None]
        vals = z * grid[None, :] - psi[None, :]
        arg[s : s + chunk] = np.argmax(vals, axis=1)
        conj[s : s + chunk] = vals[np.arange(z.shape[0]), arg[s : s + chunk]]
    return conj, arg


def sprox_oracle_build(net_1d: Network, grid_min: float, grid_max: float, grid_points: int = 10_000) -> ProxOracle1D:
    if net_1d.in_dim != 1:
        raise ShapeError("the s-Prox oracle needs a scalar-input network")
    if grid_points < 100:
        raise DomainError("grid too coarse: need at least 100 points")
    if not grid_max > grid_min:
        raise DomainError("grid_max must exceed grid_min")
    grid = np.linspace(grid_min, grid_max, grid_points)
    psi = potential_eval(net_1d, grid[:, None])
    conj, arg = _conjugate(grid, psi)
    return ProxOracle1D(grid, psi, conj, conj - grid**2 / 2, arg)


def sprox_oracle_check(oracle: ProxOracle1D, net_1d: Network, test_points) -> VerificationReport:
    """Compare ``D(x)`` with the grid argmin of ``phi(y) + (x - y)^2 / 2``.

    Passes iff every deviation is within two grid spacings.  A minimizer on
    the grid boundary, or one whose conjugate value was attained at the grid
    boundary, marks the result inconclusive (reported as a failure).
    """
    pts = np.asarray(test_points, dtype=float).ravel()
    h = oracle.spacing
    tol = 2 * h
    D = denoise(net_1d, pts[:, None]).ravel()
    worst, where, inconclusive = 0.0, "", []
    last = oracle.grid_points - 1
    for i, x in enumerate(pts):
        j = int(np.argmin(oracle.phi + (x - oracle.grid) ** 2 / 2))
        if j in (0, last) or oracle.argmax[j] in (0, last):
            inconclusive.append(i)
        dev = abs(D[i] - oracle.grid[j])
        if dev >= worst:
            worst, where = dev, f"x={x:.6g}"
    notes = f"inconclusive at points {inconclusive} (grid range too small)" if inconclusive else ""
    return VerificationReport("sprox_witness", worst <= tol and not inconclusive, worst, tol, pts.size, where, notes)


def run_suite(
    net: Network,
    seed=0,
    samples: int = 100,
    pairs: int = 1000,
    scale: float = 1.0,
    center: float = 0.0,
    lipschitz_inputs=None,
    sprox: bool = True,
    cap: int = JACOBIAN_CAP,
) -> list:
    """All checks, in a fixed order.  Jacobian-based checks are skipped above ``cap``."""
    reports = [check_nonnegativity(net)]
    if net.in_dim <= cap:
        reports.append(check_jacobian_symmetry(net, samples, seed=seed, scale=scale, center=center, cap=cap))
        reports.append(check_convexity(net, samples, seed=seed, scale=scale, center=center, cap=cap))
    reports.append(check_monotonicity(net, pairs, seed=seed, scale=scale, center=center))
    if lipschitz_inputs is None:
        lipschitz_inputs = _samples(net, 8, seed, scale, center)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LipschitzWarning)
        L = estimate_lipschitz(net, lipschitz_inputs, seed=seed, cap=cap)
    beta = lipschitz_to_beta(L)
    note = f"beta={beta:.6g}" + ("; power iteration hit its cap" if caught else "")
    reports.append(VerificationReport("lipschitz_estimate", True, L, math.nan, len(lipschitz_inputs), "", note))
    lb = check_lipschitz_lower_bound(net, L, pairs=pairs, seed=seed, scale=scale, center=center)
    # informational: a finite-sample estimate may legitimately be exceeded
    reports.append(dataclasses.replace(lb, passed=True, notes=lb.notes + " (informational)"))
    if sprox and net.in_dim == 1:
        lo, hi = center - 8 * scale, center + 8 * scale
        oracle = sprox_oracle_build(net, lo, hi, 10_000)
        pts = np.linspace(center - 2 * scale, center + 2 * scale, 20)
        reports.append(sprox_oracle_check(oracle, net, pts))
    return reports
