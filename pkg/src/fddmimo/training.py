"""Downlink training: MMSE channel estimation and pilot design.

Every user observes ``y = X^H h + n`` with ``n ~ CN(0, I_tau)`` over a
common ``M x tau`` pilot matrix ``X`` and forms the MMSE estimate
``h_hat = R X (X^H R X + I)^-1 y``. Pilots are either the scaled
partial-unitary baseline or the output of a fixed-point iteration on the
stationarity condition of the sum conditional mutual information
``sum_n log2 det(I + X^H R_n X)``.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ._linalg import complex_normal, hermitize
from .errors import ContractError, DegenerateInputError

__all__ = [
    "TrainingDesign",
    "TrainingEstimate",
    "NonConvergenceWarning",
    "unitary_training",
    "random_orthogonal_training",
    "mmse_gain",
    "training_error_covariance",
    "mmse_estimate",
    "simulate_observation",
    "total_training_mse",
    "cmi_objective",
    "kkt_residual",
    "optimize_training",
]


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class TrainingDesign:
    """Pilot matrix with per-symbol power ``power`` (budget ``tau * power``).

    ``converged``, ``iterations`` and ``step`` are filled in by
    :func:`optimize_training`; designs built directly keep the defaults.
    """

    matrix: np.ndarray
    power: float
    converged: bool = True
    iterations: int = 0
    step: float = 0.0

    @property
    def M(self):
        return self.matrix.shape[0]

    @property
    def length(self):
        return self.matrix.shape[1]

    @property
    def power_budget(self):
        return self.length * self.power

    @property
    def energy(self):
        return float(np.sum(np.abs(self.matrix) ** 2))

    def to_dict(self):
        x = self.matrix
        return {
            "M": int(x.shape[0]),
            "tau": int(x.shape[1]),
            "power": float(self.power),
            "real": x.real.tolist(),
            "imag": x.imag.tolist(),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_dict(cls, payload):
        x = np.asarray(payload["real"]) + 1j * np.asarray(payload["imag"])
        return cls(x.reshape(payload["M"], payload["tau"]), float(payload["power"]),
                   bool(payload.get("converged", True)), int(payload.get("iterations", 0)))


@dataclass(frozen=True, eq=False)
class TrainingEstimate:
    """User-side estimate (``None`` for purely analytic use) and its error covariance."""

    estimate: np.ndarray
    error_covariance: np.ndarray


def _dft(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def unitary_training(M, tau, P):
    """Scaled partial-DFT pilots.

    ``X X^H = (tau P / M) I_M`` when ``tau >= M`` and ``X^H X = P I_tau``
    otherwise.
    """
    if tau < 1:
        raise ContractError("tau must be >= 1")
    if tau >= M:
        x = np.sqrt(tau * P / M) * _dft(tau)[:M, :]
    else:
        x = np.sqrt(P) * _dft(M)[:, :tau]
    return TrainingDesign(x, float(P))


def random_orthogonal_training(M, tau, P, rng):
    """Haar-random pilots meeting the same Gram conditions as the unitary baseline."""
    n = max(M, tau)
    q, r = np.linalg.qr(complex_normal(rng, (n, n)))
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    if tau >= M:
        x = np.sqrt(tau * P / M) * q[:M, :tau]
    else:
        x = np.sqrt(P) * q[:M, :tau]
    return TrainingDesign(x, float(P))


def _identity_start(M, tau, P):
    if tau > M:
        return unitary_training(M, tau, P).matrix
    x = np.zeros((M, tau), dtype=complex)
    x[np.arange(tau), np.arange(tau)] = np.sqrt(P)
    return x


def _matrix(cov):
    return cov.matrix if hasattr(cov, "matrix") else np.asarray(cov)


def mmse_gain(cov, design):
    """``R X (X^H R X + I)^-1``, the map from observations to the estimate."""
    R, X = _matrix(cov), design.matrix
    if X.shape[0] != R.shape[0]:
        raise ContractError(f"pilot has {X.shape[0]} rows, covariance is {R.shape[0]}x{R.shape[0]}")
    RX = R @ X
    S = X.conj().T @ RX + np.eye(X.shape[1])
    return np.linalg.solve(S.T, RX.T).T


def training_error_covariance(cov, design, method="direct"):
    """Error covariance of the MMSE estimate.

    ``method="direct"`` evaluates ``R - R X (X^H R X + I)^-1 X^H R`` and
    needs no inverse of ``R``. ``method="regularized"`` evaluates
    ``(Rbar^-1 + X X^H)^-1`` with ``Rbar = R + eps I`` and
    ``eps = 1e-9 * lambda_max``.
    """
    R, X = _matrix(cov), design.matrix
    if method == "direct":
        K = mmse_gain(R, design)
        return hermitize(R - K @ (X.conj().T @ R))
    if method == "regularized":
        M = R.shape[0]
        eps = 1e-9 * max(np.linalg.eigvalsh(hermitize(R))[-1], 1e-300)
        Rbar = R + eps * np.eye(M)
        return hermitize(np.linalg.inv(np.linalg.inv(Rbar) + X @ X.conj().T))
    raise ValueError(f"unknown method {method!r}")


def simulate_observation(h, design, rng=None, noise=None):
    """Received pilots ``y = X^H h + n`` for a channel (or rows of channels).

    The unit-variance noise is drawn from ``rng`` unless given explicitly.
    """
    h = np.asarray(h)
    if noise is None:
        noise = complex_normal(rng, h.shape[:-1] + (design.length,))
    return h @ design.matrix.conj() + noise


def mmse_estimate(cov, design, observation=None):
    """MMSE estimate of one user's channel from its pilot observation.

    ``observation`` may be ``None`` when only the error covariance is
    needed, or an array whose last axis has length ``tau``.
    """
    K = mmse_gain(cov, design)
    estimate = None
    if observation is not None:
        y = np.asarray(observation)
        if y.shape[-1] != design.length:
            raise ContractError(f"observation length {y.shape[-1]} != tau {design.length}")
        estimate = y @ K.T
    return TrainingEstimate(estimate, training_error_covariance(cov, design))


def total_training_mse(covs, design):
    return float(sum(np.trace(training_error_covariance(c, design)).real for c in covs))


def cmi_objective(covs, design):
    """``sum_n log2 det(I + X^H R_n X)`` in bits."""
    X = design.matrix
    I = np.eye(X.shape[1])
    total = 0.0
    for c in covs:
        sign, logdet = np.linalg.slogdet(I + X.conj().T @ _matrix(c) @ X)
        total += logdet
    return float(total / np.log(2.0))


def _stack(covs):
    return np.stack([_matrix(c) for c in covs])


def _fixed_point_map(R, X, with_gram=False):
    """``sum_n R_n X (I + X^H R_n X)^-1`` for a stack ``R`` of shape (N, M, M).

    With ``with_gram`` the stack of ``I + X^H R_n X`` is returned as well.
    """
    RX = R @ X
    S = X.conj().T @ RX + np.eye(X.shape[1])
    # Right division by S_n, done as a batched left solve on the transposes.
    out = np.linalg.solve(np.swapaxes(S, -1, -2), np.swapaxes(RX, -1, -2))
    F = np.swapaxes(out, -1, -2).sum(axis=0)
    return (F, S) if with_gram else F


def kkt_residual(covs, design):
    """Stationarity residual of the CMI problem at ``design``.

    Returns ``(residual, lam)`` where ``lam`` is the least-squares multiplier
    fitted to ``F(X) ~ lam X`` and ``residual = ||F(X) - lam X|| / ||X||``.
    """
    X = design.matrix
    F = _fixed_point_map(_stack(covs), X)
    nx2 = np.vdot(X, X).real
    lam = np.vdot(X, F).real / nx2
    return float(np.linalg.norm(F - lam * X) / np.sqrt(nx2)), float(lam)


def _polish(R, X, budget, tol, max_iter):
    """Quasi-Newton refinement of the CMI on the sphere ``||X||_F^2 = budget``.

    The fixed-point map slows to a sublinear crawl when the optimum leaves
    some pilot directions unused (zero singular values). L-BFGS on the
    scale-free parametrization ``X = sqrt(budget) Y / ||Y||`` gets through
    that stretch quickly; its gradient is the projected stationarity
    residual ``F(X) - lam X``.
    """
    shape = X.shape
    n = X.size

    def unpack(v):
        return (v[:n] + 1j * v[n:]).reshape(shape)

    def fun(v):
        Y = unpack(v)
        c = np.sqrt(budget / np.vdot(Y, Y).real)
        Z = c * Y
        F, S = _fixed_point_map(R, Z, with_gram=True)
        g = -2.0 * c * (F - (np.vdot(Z, F).real / budget) * Z)
        return -np.linalg.slogdet(S)[1].sum(), np.concatenate([g.real.ravel(), g.imag.ravel()])

    v0 = np.concatenate([X.real.ravel(), X.imag.ravel()])
    # The gradient norm is about 2 sqrt(budget) times the stationarity
    # residual; aim a little below ``tol`` and let the iteration finish.
    gtol = 0.1 * tol * np.sqrt(budget / (2 * n))
    res = minimize(fun, v0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 0.0, "maxcor": 30})
    Y = unpack(res.x)
    return Y * np.sqrt(budget / np.vdot(Y, Y).real)


def optimize_training(covs, tau, P, x0=None, tol=1e-8, max_iter=500, polish_after=100):
    """Pilot design by fixed-point iteration on the CMI stationarity condition.

    Each step maps ``X <- F(X) = sum_n R_n X (I + X^H R_n X)^-1`` and
    rescales so that ``||X||_F^2 = tau P``. The loop stops once the
    Frobenius step or the stationarity residual of :func:`kkt_residual` is
    below ``tol``. Hitting ``max_iter`` is reported through
    ``design.converged`` and a :class:`NonConvergenceWarning`, not an error.

    Parameters
    ----------
    covs : sequence of ChannelCovariance or arrays
        Per-user covariances.
    tau : int
        Pilot length.
    P : float
        Per-symbol pilot power.
    x0 : TrainingDesign or ndarray, optional
        Starting pilots, must be non-zero. Defaults to the first ``tau``
        columns of the identity scaled to the budget (partial DFT when
        ``tau > M``).
    tol : float
        Tolerance on the step and on the stationarity residual.
    max_iter : int
        Cap on fixed-point iterations.
    polish_after : int or None
        Every this many steps without stopping, refine the iterate with
        L-BFGS and continue. ``None`` keeps the plain iteration.
    """
    R = _stack(covs)
    M = R.shape[-1]
    if tau < 1:
        raise ContractError("tau must be >= 1")
    if x0 is None:
        X = _identity_start(M, tau, P)
    else:
        X = np.array(getattr(x0, "matrix", x0), dtype=complex)
        if X.shape != (M, tau):
            raise ContractError(f"x0 has shape {X.shape}, expected {(M, tau)}")
    budget = tau * P
    energy = np.vdot(X, X).real
    if energy == 0:
        raise ContractError("x0 must be non-zero")
    X = X * np.sqrt(budget / energy)

    step = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        F = _fixed_point_map(R, X)
        energy = np.vdot(F, F).real
        if energy == 0:
            raise DegenerateInputError("pilots fell into the common null space of all covariances")
        # Stationarity of the current iterate comes for free from F(X).
        lam = np.vdot(X, F).real / budget
        if np.linalg.norm(F - lam * X) / np.sqrt(budget) < tol:
            return TrainingDesign(X, float(P), True, it, float(step))
        # Square-root scaling: the update must meet tr(X X^H) = tau P exactly.
        Xn = F * np.sqrt(budget / energy)
        step = np.linalg.norm(Xn - X)
        X = Xn
        if step < tol:
            return TrainingDesign(X, float(P), True, it, float(step))
        if polish_after is not None and it % polish_after == 0:
            X = _polish(R, X, budget, tol, max_iter)
    warnings.warn(f"training optimizer stopped after {max_iter} iterations "
                  f"(last step {step:.2e})", NonConvergenceWarning, stacklevel=2)
    return TrainingDesign(X, float(P), False, it, float(step))
