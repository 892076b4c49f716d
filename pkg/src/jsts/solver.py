"""Rank-constrained maximum-likelihood factor analysis with a variance floor.

The problem fits ``Sigma = V V^T + P`` to a second-moment matrix ``R`` with
``rank(V) <= r`` and ``P = diag(p) >= eps * I``.  Profiling out ``V`` leaves a
problem in the inverse variances ``gamma = 1 / p`` whose objective splits
into a convex part and a convex spectral part,

    f(gamma) = sum_i (-log gamma_i + R_ii gamma_i) - f2(gamma),
    f2(gamma) = sum_{i<=r} (max(1, lam_i) - 1 - log max(1, lam_i)),

with ``lam`` the descending eigenvalues of ``G^1/2 R G^1/2`` (``G = diag(gamma)``).
The solver linearises ``f2`` at the current iterate and minimises the convex
remainder in closed form (convex-concave procedure).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

EIG_CLAMP = 1e-12
TOL_SAT = 1e-6
DENSE_LIMIT = 512
_TINY = 1e-300


@dataclass
class FaProblem:
    R: np.ndarray
    r: int
    eps_floor: float = 1e-2
    eps_stop: float = 1e-3
    max_iter: int = 500
    # Optional Ts x d data matrix with R = O^T O / Ts; enables the thin-SVD route.
    data: Optional[np.ndarray] = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        d = self.R.shape[0]
        if self.R.ndim != 2 or self.R.shape[1] != d:
            raise ValueError(f"R must be square, got shape {self.R.shape}")
        scale = max(np.abs(self.R).max(), _TINY)
        if np.abs(self.R - self.R.T).max() > 1e-12 * scale:
            raise ValueError("R must be symmetric")
        if not 1 <= self.r < d:
            raise ValueError(f"rank bound must satisfy 1 <= r < d={d}, got {self.r}")
        if not self.eps_floor > 0:
            raise ValueError("eps_floor must be positive")
        if self.data is not None:
            self.data = np.asarray(self.data, dtype=float)
            if self.data.ndim != 2 or self.data.shape[1] != d:
                raise ValueError("data must have d columns")

    @property
    def d(self) -> int:
        return self.R.shape[0]


@dataclass
class FaSolution:
    gamma: np.ndarray
    tau: int
    objective_trace: list[float]
    iterations: int
    converged: bool
    step_norms: list[float] = field(default_factory=list)
    degenerate: bool = False

    @property
    def p(self) -> np.ndarray:
        return 1.0 / self.gamma

    def write_trace_csv(self, path) -> None:
        """Dump (iteration, objective, |delta gamma|) rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "step_norm"])
            steps = [float("nan")] + list(self.step_norms)
            for m, (obj, dn) in enumerate(zip(self.objective_trace, steps)):
                w.writerow([m, repr(float(obj)), repr(float(dn))])


def _check_gamma(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if np.any(~(gamma > 0)):
        raise ValueError("gamma entries must be strictly positive")
    return gamma


def scaled_spectrum(gamma, R, data=None):
    """Eigenpairs of G^1/2 R G^1/2, eigenvalues in descending order.

    With ``data`` (Ts x d, R = data^T data / Ts) and Ts < d, only the leading
    min(Ts, d) pairs are returned; the remaining eigenvalues are zero.
    """
    sq = np.sqrt(gamma)
    if data is not None and data.shape[0] < data.shape[1]:
        B = data * sq[None, :] / np.sqrt(data.shape[0])
        _, s, vt = np.linalg.svd(B, full_matrices=False)
        lam, U = s**2, vt.T
    else:
        M = sq[:, None] * R * sq[None, :]
        lam, U = np.linalg.eigh(M)
        lam, U = lam[::-1], U[:, ::-1]
    lam = np.where(lam < EIG_CLAMP, 0.0, lam)
    return lam, U


def _spectral_penalty(lam: np.ndarray, r: int) -> float:
    top = np.maximum(1.0, lam[:r])
    return float(np.sum(np.log(top) - top + 1.0))


def p2_objective(gamma, R, r: int, data=None) -> float:
    """Profiled negative log-likelihood in the inverse variances."""
    gamma = _check_gamma(gamma)
    R = np.asarray(R, dtype=float)
    lam, _ = scaled_spectrum(gamma, R, data)
    return float(np.sum(-np.log(gamma) + np.diag(R) * gamma)) + _spectral_penalty(lam, r)


def f2_value(gamma, R, r: int) -> float:
    gamma = _check_gamma(gamma)
    lam, _ = scaled_spectrum(gamma, np.asarray(R, dtype=float))
    return -_spectral_penalty(lam, r)


def _weights(lam: np.ndarray, r: int) -> np.ndarray:
    w = np.zeros_like(lam)
    k = min(r, lam.size)
    head = lam[:k]
    w[:k] = np.where(head > 1.0, 1.0 - 1.0 / np.where(head > 0, head, 1.0), 0.0)
    return w


def subgradient_f2(gamma, R, r: int, data=None) -> np.ndarray:
    """Subgradient of the spectral part: (1/gamma_i) sum_j w_j lam_j U_ij^2."""
    gamma = _check_gamma(gamma)
    lam, U = scaled_spectrum(gamma, np.asarray(R, dtype=float), data)
    w = _weights(lam, r)
    return (U**2 @ (w * lam)) / gamma


def subgradient_f2_matrix(gamma, R, r: int) -> np.ndarray:
    """Same subgradient via diag(G^-1/2 U D U^T G^1/2 R), kept for cross-checks."""
    gamma = _check_gamma(gamma)
    R = np.asarray(R, dtype=float)
    lam, U = scaled_spectrum(gamma, R)
    D = np.diag(_weights(lam, r))
    sq = np.sqrt(gamma)
    A = (U @ D @ U.T) / sq[:, None] * sq[None, :]
    return np.diag(A @ R).copy()


def _step(gamma, R, r, eps_floor, data=None):
    lam, U = scaled_spectrum(gamma, R, data)
    w = _weights(lam, r)
    # R_ii - grad_i computed through the spectral identity; no cancellation.
    denom = (U**2 @ ((1.0 - w) * lam)) / gamma
    cap = 1.0 / eps_floor
    degenerate = denom <= _TINY * cap
    with np.errstate(divide="ignore"):
        nxt = np.where(degenerate, cap, np.minimum(1.0 / np.where(degenerate, 1.0, denom), cap))
    return nxt, bool(degenerate.any())


def ccp_step(gamma_m, R, r: int, eps_floor: float, data=None) -> np.ndarray:
    """One convex-concave update: gamma_i = min(1 / (R_ii - grad_i), 1 / eps)."""
    gamma_m = _check_gamma(gamma_m)
    nxt, _ = _step(gamma_m, np.asarray(R, dtype=float), r, eps_floor, data)
    return nxt


def initial_gamma(R, eps_floor: float) -> np.ndarray:
    diag = np.diag(np.asarray(R, dtype=float))
    cap = 1.0 / eps_floor
    with np.errstate(divide="ignore"):
        g = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), cap)
    return np.minimum(g, cap)


def support_size(gamma, eps_floor: float) -> int:
    """Coordinates whose variance strictly exceeds the floor."""
    return int(np.count_nonzero(np.asarray(gamma) < (1.0 - TOL_SAT) / eps_floor))


def dc_solve(problem: FaProblem, gamma_init=None) -> FaSolution:
    R, r, eps = problem.R, problem.r, problem.eps_floor
    data = problem.data
    if data is None and problem.d > DENSE_LIMIT:
        raise ValueError(
            f"d={problem.d} exceeds the dense limit {DENSE_LIMIT}; pass the data matrix"
        )
    gamma = initial_gamma(R, eps) if gamma_init is None else np.minimum(
        _check_gamma(gamma_init), 1.0 / eps
    )
    trace = [p2_objective(gamma, R, r, data)]
    steps: list[float] = []
    converged = False
    degenerate = False
    it = 0
    while it < problem.max_iter:
        nxt, deg = _step(gamma, R, r, eps, data)
        degenerate |= deg
        it += 1
        dn = float(np.linalg.norm(nxt - gamma))
        steps.append(dn)
        trace.append(p2_objective(nxt, R, r, data))
        done = dn < problem.eps_stop * float(np.linalg.norm(gamma))
        gamma = nxt
        if done:
            converged = True
            break
    return FaSolution(
        gamma=gamma,
        tau=support_size(gamma, eps),
        objective_trace=trace,
        iterations=it,
        converged=converged,
        step_norms=steps,
        degenerate=degenerate,
    )


def reconstruct_covariance(gamma, R, r: int):
    """Return (V, P, Sigma) attaining the profiled objective at ``gamma``."""
    gamma = _check_gamma(gamma)
    R = np.asarray(R, dtype=float)
    lam, U = scaled_spectrum(gamma, R)
    k = min(r, lam.size)
    lengths = np.sqrt(np.maximum(1.0, lam[:k]) - 1.0)
    Vp = U[:, :k] * lengths[None, :]
    p = 1.0 / gamma
    V = np.sqrt(p)[:, None] * Vp
    P = np.diag(p)
    return V, P, V @ V.T + P


def p1_objective(Sigma, R) -> float:
    """-log det(Sigma^-1) + tr(Sigma^-1 R)."""
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise ValueError("Sigma must be positive definite")
    return float(logdet + np.trace(np.linalg.solve(Sigma, R)))


def woodbury_inverse(V, P) -> np.ndarray:
    Pinv = np.diag(1.0 / np.diag(P))
    core = np.eye(V.shape[1]) + V.T @ Pinv @ V
    return Pinv - Pinv @ V @ np.linalg.solve(core, V.T @ Pinv)


def moment_matrix(frame_real, mode: str = "slot-covariance") -> np.ndarray:
    """Second-moment matrix of a real-expanded Ts x 2N frame."""
    O = np.asarray(frame_real, dtype=float)
    if mode == "slot-covariance":
        return O.T @ O / O.shape[0]
    if mode == "vectorized":
        v = O.reshape(-1, order="F")  # coordinate-major: all slots of coordinate 0 first
        return np.outer(v, v)
    raise ValueError(f"unknown moment mode {mode!r}")
