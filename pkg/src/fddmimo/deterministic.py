"""Large-array deterministic approximation of the RZF SINR.

Given the covariance of every user's base-station estimate ``Rh_n`` and of
its true channel ``R_n`` (so that ``R_n - Rh_n`` is the error covariance),
the SINR of user ``n`` is approximated by::

    gamma_n = (e_n / (1 + e_n))^2 / (phi / P + E_n + I_n)

where ``e`` solves the coupled fixed point

    e_n = (1/M) tr(Rh_n T),   T = ((1/M) sum_j Rh_j / (1 + e_j) + alpha I)^-1

and the remaining terms come from derivatives of ``e`` obtained by solving
linear systems with the matrix ``I - J``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._linalg import hermitize
from .errors import ConditioningError, ContractError, ConvergenceError
from .precoding import RateReport, net_rate, sum_rate

__all__ = [
    "DeInput",
    "DeState",
    "solve_fixed_point",
    "de_sinr",
    "de_net_rate",
    "state_to_json",
]

# Largest condition number of I - J accepted before reporting a singular system.
MAX_CONDITION = 1e12


def _matrix(cov):
    return cov.matrix if hasattr(cov, "matrix") else np.asarray(cov)


@dataclass(frozen=True, eq=False)
class DeInput:
    """Covariances of the estimates and of the true channels, ``alpha`` and ``P``."""

    estimate_covariances: np.ndarray
    true_covariances: np.ndarray
    alpha: float
    power: float

    def __post_init__(self):
        est = np.stack([hermitize(_matrix(c)) for c in self.estimate_covariances])
        true = np.stack([hermitize(_matrix(c)) for c in self.true_covariances])
        if est.shape != true.shape:
            raise ContractError(f"estimate covariances {est.shape} != true covariances {true.shape}")
        if not self.alpha > 0:
            raise ContractError("alpha must be positive")
        if not self.power > 0:
            raise ContractError("power must be positive")
        object.__setattr__(self, "estimate_covariances", est)
        object.__setattr__(self, "true_covariances", true)

    @property
    def N(self):
        return self.estimate_covariances.shape[0]

    @property
    def M(self):
        return self.estimate_covariances.shape[1]


@dataclass(frozen=True, eq=False)
class DeState:
    """Converged fixed point and every derived quantity of the SINR formula.

    ``d[n]`` and ``f[n]`` are the vectors ``(I - J)^-1 b_n`` and
    ``(I - J)^-1 c_n``; ``b[n]`` and ``c[n]`` are the right-hand sides.
    """

    e_bar: np.ndarray
    T_matrix: np.ndarray
    e_prime: np.ndarray
    J: np.ndarray
    v: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    f: np.ndarray
    phi: float
    E: np.ndarray
    I: np.ndarray
    u: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)
    spectral_radius: float = 0.0

    @property
    def residual(self):
        return self.residuals[-1] if self.residuals else 0.0


def _resolvent(Rh, e, alpha):
    M = Rh.shape[-1]
    S = np.tensordot(1.0 / (1.0 + e), Rh, axes=1) / M + alpha * np.eye(M)
    return np.linalg.inv(hermitize(S))


def _traces(A, B):
    """``tr(A_i B)`` for a stack ``A`` and one matrix ``B``."""
    return np.einsum("nij,ji->n", A, B)


def _iterate(Rh, alpha, e, damping, tol, max_iter, log):
    M = Rh.shape[-1]
    for it in range(1, max_iter + 1):
        T = _resolvent(Rh, e, alpha)
        new = _traces(Rh, T).real / M
        res = float(np.max(np.abs(new - e), initial=0.0))
        log.append(res)
        if not np.all(np.isfinite(new)):
            return e, it, False
        e = damping * e + (1.0 - damping) * new
        if res < tol:
            return e, it, True
    return e, max_iter, False


def solve_fixed_point(inp, tol=1e-10, max_iter=1000, damping=0.5, e0=None):
    """Solve for ``e`` and assemble the full set of SINR ingredients.

    Parameters
    ----------
    inp : DeInput
    tol : float
        Stop once ``max_n |e_n(new) - e_n| < tol``.
    max_iter : int
        Iteration cap for each of the damped and the undamped pass.
    damping : float
        Weight kept on the previous iterate. If the damped pass does not
        converge, an undamped pass continues from its last iterate.
    e0 : array_like, optional
        Starting point, default ``(1/M) tr(Rh_n) / alpha``.

    Raises
    ------
    ConvergenceError
        Neither pass reached ``tol``; carries the residual trajectory.
    ConditioningError
        ``I - J`` is numerically singular.
    """
    Rh, R, alpha = inp.estimate_covariances, inp.true_covariances, inp.alpha
    N, M = inp.N, inp.M
    if e0 is None:
        e = np.trace(Rh, axis1=1, axis2=2).real / (M * alpha)
    else:
        e = np.asarray(e0, dtype=float).copy()
    log = []
    e, it, ok = _iterate(Rh, alpha, e, damping, tol, max_iter, log)
    total = it
    if not ok and damping:
        e, it, ok = _iterate(Rh, alpha, e, 0.0, tol, max_iter, log)
        total += it
    if not ok:
        raise ConvergenceError(f"fixed point not reached in {total} iterations "
                               f"(last residual {log[-1]:.2e})", log, e)

    T = _resolvent(Rh, e, alpha)
    A = Rh @ T  # A_n = Rh_n T
    w = 1.0 / (1.0 + e) ** 2
    # trAA[i, j] = tr(Rh_i T Rh_j T)
    trAA = np.einsum("iab,jba->ij", A, A).real
    J = trAA * w[None, :] / M ** 2
    v = _traces(A, T).real / M
    # b[n, i] = (1/M) tr(Rh_i T (R_n - Rh_n) T)
    Bn = (R - Rh) @ T
    b = np.einsum("iab,nba->ni", A, Bn).real / M
    c = trAA.T / M  # c[n, i] = (1/M) tr(Rh_i T Rh_n T)

    L = np.eye(N) - J
    if np.linalg.cond(L) > MAX_CONDITION:
        raise ConditioningError("I - J is numerically singular")
    e_prime = np.linalg.solve(L, v)
    d = np.linalg.solve(L, b.T).T
    f = np.linalg.solve(L, c.T).T

    phi = float(np.sum(e_prime * w) / M)
    E = np.diagonal(d) * w / M
    off = ~np.eye(N, dtype=bool)
    u = np.sum(np.where(off, f * w[None, :], 0.0), axis=1) / M
    I = u * w + np.sum(np.where(off, d * w[None, :], 0.0), axis=1) / M
    radius = float(np.max(np.abs(np.linalg.eigvals(J)), initial=0.0))
    return DeState(e, T, e_prime, J, v, b, c, d, f, phi, E, I, u, total, log, radius)


def de_sinr(state, inp):
    """Per-user deterministic SINR. Users with ``e_n = 0`` get 0."""
    e = state.e_bar
    num = (e / (1.0 + e)) ** 2
    den = state.phi / inp.power + state.E + state.I
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(num > 0, num / den, 0.0)


def de_net_rate(inp, tau, delta, T, **solver_kw):
    """Net rate at one operating point with the deterministic SINR."""
    state = solve_fixed_point(inp, **solver_kw)
    sinr = de_sinr(state, inp)
    return RateReport(
        per_user_sinr=sinr,
        gross_rate=sum_rate(sinr),
        overhead_fraction=(tau + delta) / T,
        net_rate=net_rate(sinr, tau, delta, T),
        chosen_tau=int(tau),
        chosen_B=float("nan"),
        delta=float(delta),
        M=inp.M,
        N=inp.N,
        T=int(T),
        scheme="de",
    )


def state_to_json(state, include_matrix=False):
    """JSON dump of a state, including the per-iteration residual log."""
    out = {
        "e_bar": state.e_bar.tolist(),
        "e_prime": state.e_prime.tolist(),
        "J": state.J.tolist(),
        "v": state.v.tolist(),
        "b": state.b.tolist(),
        "c": state.c.tolist(),
        "d": state.d.tolist(),
        "f": state.f.tolist(),
        "phi": state.phi,
        "E": state.E.tolist(),
        "I": state.I.tolist(),
        "u": state.u.tolist(),
        "iterations": state.iterations,
        "residuals": state.residuals,
        "spectral_radius": state.spectral_radius,
    }
    if include_matrix:
        Tm = state.T_matrix
        out["T_real"] = Tm.real.tolist()
        out["T_imag"] = Tm.imag.tolist()
    return json.dumps(out)
