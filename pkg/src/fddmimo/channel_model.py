"""Spatial channel covariance models for a uniform linear array.

Two geometric models are provided, the one-ring model (uniform angle of
arrival over ``[theta - Delta, theta + Delta]``) and the Laplacian angular
spectrum model. Both produce Toeplitz covariances, so only the first column
is integrated and the rest of the matrix is filled by conjugate symmetry.

Channel vectors are drawn through the Karhunen-Loeve representation
``h = U diag(sqrt(lambda)) z`` with ``z ~ CN(0, I)``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import toeplitz

from ._linalg import complex_normal, hermitize
from .errors import ContractError, ModelEvaluationError

__all__ = [
    "UserGeometry",
    "ChannelCovariance",
    "DominantRepresentation",
    "one_ring_ccm",
    "laplacian_ccm",
    "iid_ccm",
    "laplacian_diagonal",
    "effective_rank",
    "dominant_representation",
    "sample_channel",
    "covariance_to_dict",
    "covariance_from_dict",
]

# Absolute accuracy requested from the quadrature for every matrix entry.
QUAD_ABS_TOL = 1e-10


@dataclass(frozen=True)
class UserGeometry:
    """Position of a user as seen from the base-station array.

    Parameters
    ----------
    azimuth : float
        Mean angle of arrival (radians).
    angular_spread : float
        Angular spread (radians), must be positive.
    antenna_spacing : float
        Spacing between adjacent antennas, in wavelengths. Zero collapses
        the array to a single point (all-equal entries).
    """

    azimuth: float
    angular_spread: float
    antenna_spacing: float = 0.5

    def __post_init__(self):
        if not self.angular_spread > 0:
            raise ContractError("angular_spread must be positive")
        if not self.antenna_spacing >= 0:
            raise ContractError("antenna_spacing must be non-negative")


@dataclass(frozen=True, eq=False)
class ChannelCovariance:
    """Hermitian PSD covariance with its eigendecomposition.

    Eigenvalues are sorted in descending order. Equal eigenvalues keep the
    order returned by the dense solver, so the decomposition is
    deterministic for a given matrix.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, matrix):
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ContractError(f"covariance must be square, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ModelEvaluationError("covariance has non-finite entries")
        matrix = hermitize(matrix)
        w, v = np.linalg.eigh(matrix)
        order = np.argsort(-w, kind="stable")
        w = w[order]
        v = v[:, order]
        for a in (matrix, w, v):
            a.setflags(write=False)
        return cls(matrix, w, v)

    @property
    def M(self):
        return self.matrix.shape[0]

    def sqrt_factor(self):
        """``U diag(sqrt(lambda))`` with negative rounding noise clipped."""
        return self.eigenvectors * np.sqrt(np.clip(self.eigenvalues, 0.0, None))


@dataclass(frozen=True, eq=False)
class DominantRepresentation:
    """Rank-``r`` split of a covariance into dominant and residual parts."""

    rank: int
    basis: np.ndarray
    dominant_eigenvalues: np.ndarray
    residual_basis: np.ndarray
    residual_eigenvalues: np.ndarray

    @property
    def dominant_covariance(self):
        return (self.basis * self.dominant_eigenvalues) @ self.basis.conj().T

    @property
    def residual_covariance(self):
        u = self.residual_basis
        return (u * self.residual_eigenvalues) @ u.conj().T

    @property
    def projector(self):
        return self.basis @ self.basis.conj().T


def _toeplitz_from_lags(first_column):
    # R[i, j] depends on i - j; upper triangle is the conjugate mirror.
    return toeplitz(first_column, np.conj(first_column))


def _integrate_lags(weight, lags, spacing, bounds, norm, breakpoints=()):
    """Integrate weight(a) * exp(-j 2 pi D k sin a) for all lags k at once."""
    k = np.asarray(lags, dtype=float)

    def integrand(a):
        phase = 2.0 * np.pi * spacing * k * np.sin(a)
        w = weight(a)
        return np.concatenate((w * np.cos(phase), -w * np.sin(phase)))

    edges = [bounds[0], *breakpoints, bounds[1]]
    total = np.zeros(2 * len(k))
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, err = quad_vec(integrand, lo, hi, epsabs=QUAD_ABS_TOL * norm,
                            epsrel=1e-13, norm="max", limit=2000)
        total += val
    out = (total[: len(k)] + 1j * total[len(k):]) / norm
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError("quadrature returned a non-finite value")
    return out


def one_ring_ccm(geometry, M):
    """One-ring covariance of an ``M``-element uniform linear array.

    ``R[i, j] = 1/(2 Delta) * int_{theta-Delta}^{theta+Delta}
    exp(-j 2 pi D (i - j) sin(a)) da``.
    """
    if M < 1:
        raise ContractError("M must be >= 1")
    theta, spread = geometry.azimuth, geometry.angular_spread
    col = _integrate_lags(lambda a: 1.0, np.arange(M), geometry.antenna_spacing,
                          (theta - spread, theta + spread), 2.0 * spread)
    return ChannelCovariance.from_matrix(_toeplitz_from_lags(col))


def laplacian_ccm(geometry, M):
    """Laplacian angular-spectrum covariance.

    ``R[i, j] = 1/(sqrt(2) Delta) * int_{theta-pi}^{theta+pi}
    exp(-sqrt(2)/Delta |a - theta| - j 2 pi D (i - j) sin(a)) da``.
    The density is not renormalized over the finite window, so the diagonal
    equals :func:`laplacian_diagonal` rather than exactly 1.
    """
    if M < 1:
        raise ContractError("M must be >= 1")
    theta, spread = geometry.azimuth, geometry.angular_spread
    decay = np.sqrt(2.0) / spread

    def weight(a):
        return np.exp(-decay * np.abs(a - theta))

    col = _integrate_lags(weight, np.arange(M), geometry.antenna_spacing,
                          (theta - np.pi, theta + np.pi), np.sqrt(2.0) * spread,
                          breakpoints=(theta,))
    return ChannelCovariance.from_matrix(_toeplitz_from_lags(col))


def laplacian_diagonal(angular_spread):
    """Closed-form diagonal entry of the Laplacian model."""
    return 1.0 - np.exp(-np.sqrt(2.0) * np.pi / angular_spread)


def iid_ccm(M):
    """Uncorrelated channel, ``R = I_M``."""
    return ChannelCovariance.from_matrix(np.eye(M, dtype=complex))


def effective_rank(cov, threshold=None):
    """Number of eigenvalues strictly above ``threshold``.

    The default threshold is ``1e-3`` times the largest eigenvalue.
    """
    if threshold is None:
        threshold = 1e-3 * max(cov.eigenvalues[0], 0.0)
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    return int(np.count_nonzero(cov.eigenvalues > threshold))


def dominant_representation(cov, rank):
    if not 1 <= rank <= cov.M:
        raise ContractError(f"rank must lie in [1, {cov.M}], got {rank}")
    U, lam = cov.eigenvectors, cov.eigenvalues
    return DominantRepresentation(
        rank=int(rank),
        basis=U[:, :rank],
        dominant_eigenvalues=lam[:rank],
        residual_basis=U[:, rank:],
        residual_eigenvalues=lam[rank:],
    )


def sample_channel(cov, rng, size=None):
    """Draw ``h = U Sigma^(1/2) z`` with ``z ~ CN(0, I_M)``.

    Returns an array of shape ``(M,)`` or ``(*size, M)``.
    """
    shape = (cov.M,) if size is None else (*np.atleast_1d(size), cov.M)
    z = complex_normal(rng, shape)
    return z @ cov.sqrt_factor().T


def covariance_to_dict(cov):
    """Text-safe form: ``M`` plus row-major interleaved (re, im) entries."""
    flat = cov.matrix.reshape(-1)
    data = np.empty(2 * flat.size)
    data[0::2] = flat.real
    data[1::2] = flat.imag
    return {"M": cov.M, "data": data.tolist()}


def covariance_from_dict(payload):
    M = int(payload["M"])
    data = np.asarray(payload["data"], dtype=float)
    if data.size != 2 * M * M:
        raise ContractError("covariance payload has the wrong length")
    return ChannelCovariance.from_matrix((data[0::2] + 1j * data[1::2]).reshape(M, M))
