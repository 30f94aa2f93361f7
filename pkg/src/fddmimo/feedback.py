"""Uplink CSI feedback: KL-transform scalar quantization and random VQ.

Three quantizers are modelled, each returning an :class:`EstimateBundle`
that carries the base-station estimate (when simulated), the covariance of
the total error ``h - h_bs`` and the covariance of the estimate itself.

* KLSQ: scalar quantization of KL coordinates with reverse water-filling
  bit loading, ideal (rate-distortion) or with a constant shaping loss.
* Isotropic RVQ: whiten the dominant ``r``-dimensional eigenspace and
  quantize the direction with ``2^B`` uniformly drawn unit vectors.
* Skewed RVQ: the same random directions shaped by the square root of the
  dominant eigenvalues, with projection reconstruction.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln

from ._linalg import complex_normal, hermitize, min_eigenvalue, psd_projection
from .errors import ContractError, DegenerateInputError

__all__ = [
    "KLSQ",
    "ISO_RVQ",
    "SKEW_RVQ",
    "MAX_SIMULATED_BITS",
    "RwfAllocation",
    "FeedbackScheme",
    "EstimateBundle",
    "rwf_allocate",
    "rate_distortion",
    "apportion_bits",
    "klsq_feedback",
    "iso_rvq_feedback",
    "skewed_rvq_feedback",
    "apply_feedback",
    "theorem2_bound",
    "rvq_expected_distortion",
    "optimal_dominant_rank",
    "draw_codebook",
    "bundle_to_dict",
    "allocation_to_dict",
]

KLSQ = "klsq"
ISO_RVQ = "iso_rvq"
SKEW_RVQ = "skew_rvq"
KINDS = (KLSQ, ISO_RVQ, SKEW_RVQ)

# Codebooks hold 2^B vectors; beyond this the brute-force search is impractical.
MAX_SIMULATED_BITS = 20

# Negative eigenvalues of an estimate covariance below this (relative to its
# largest eigenvalue) are treated as rounding noise rather than clipped.
PSD_TOL = 1e-10

# Eigenvalues below this fraction of the largest cannot anchor a whitened
# RVQ coordinate and limit the admissible dominant rank.
EIG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class RwfAllocation:
    """Reverse water-filling solution.

    ``bits[i] = log2(variances[i] / water_level)`` on the active prefix and
    zero elsewhere; ``distortions[i] = min(water_level, variances[i])``.
    """

    water_level: float
    variances: np.ndarray
    bits: np.ndarray
    distortions: np.ndarray

    @property
    def total_bits(self):
        return float(self.bits.sum())

    @property
    def total_distortion(self):
        return float(self.distortions.sum())

    @property
    def active(self):
        return self.bits > 0


@dataclass(frozen=True)
class FeedbackScheme:
    """Quantizer selection.

    Parameters
    ----------
    kind : {"klsq", "iso_rvq", "skew_rvq"}
    bits : float
        Feedback bits per user.
    rank : int, optional
        Dominant rank for the RVQ kinds. ``None`` picks the rank that
        minimizes the analytic error trace.
    shaping_loss : float
        Bits per real dimension lost by a practical scalar quantizer (KLSQ).
    """

    kind: str
    bits: float
    rank: int = None
    shaping_loss: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown feedback kind {self.kind!r}")
        if not self.bits >= 0:
            raise ContractError("bits must be non-negative")
        if self.shaping_loss < 0:
            raise ContractError("shaping_loss must be non-negative")
        if self.kind != KLSQ and self.rank is not None and self.rank < 2:
            raise ContractError("RVQ needs a dominant rank of at least 2")

    def with_bits(self, bits):
        return FeedbackScheme(self.kind, float(bits), self.rank, self.shaping_loss)


@dataclass(frozen=True, eq=False)
class EstimateBundle:
    """Base-station view of one user's channel.

    Attributes
    ----------
    bs_estimate : ndarray or None
        Quantized estimate(s), same leading shape as the user estimate.
        ``None`` in analytic mode.
    error_covariance : ndarray
        ``Cov(h - h_bs)``, the sum of the matrices in ``terms``.
    estimate_covariance : ndarray
        ``R - error_covariance``, projected onto the PSD cone when the
        analytic error model overshoots ``R`` (flagged by ``clipped``).
    terms : dict
        Labelled PSD pieces of the error covariance: ``"training"``,
        ``"quantization"`` and, for RVQ, ``"truncation"``.
    quantization_error : ndarray or None
        Per-realization quantization error in the quantizer's coordinates
        (simulated mode only).
    """

    bs_estimate: np.ndarray
    error_covariance: np.ndarray
    estimate_covariance: np.ndarray
    terms: dict = field(default_factory=dict)
    clipped: bool = False
    rank: int = None
    quantization_error: np.ndarray = None


def _matrix(cov):
    return cov.matrix if hasattr(cov, "matrix") else np.asarray(cov)


def _bundle(R, terms, bs_estimate=None, rank=None, qerr=None):
    error = hermitize(sum(terms.values()))
    estimate_cov = hermitize(R - error)
    scale = max(np.linalg.eigvalsh(hermitize(R))[-1], 1e-300)
    clipped = False
    if min_eigenvalue(estimate_cov) < -PSD_TOL * scale:
        estimate_cov = psd_projection(estimate_cov)
        clipped = True
    return EstimateBundle(bs_estimate, error, estimate_cov, terms, clipped, rank, qerr)


# ---------------------------------------------------------------------------
# reverse water-filling


def rwf_allocate(eigenvalues, total_bits):
    """Rate-distortion optimal bit loading over independent complex Gaussians.

    Solves ``sum_i max(0, log2(lambda_i / gamma)) = B`` for the water level.
    The left side is piecewise linear in ``log2(gamma)``, so the root is
    found exactly by scanning active-set sizes.

    Parameters
    ----------
    eigenvalues : array_like
        Component variances, any order. Tiny negative rounding is clipped.
    total_bits : float
        Bit budget ``B >= 0``.

    Returns
    -------
    RwfAllocation
        Arrays are in the order of ``eigenvalues``.
    """
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    B = float(total_bits)
    if B < 0:
        raise ContractError("total_bits must be non-negative")
    if lam.size == 0:
        raise ContractError("need at least one component")
    lmax = lam.max()
    if B == 0:
        return RwfAllocation(float(lmax), lam, np.zeros_like(lam), lam.copy())
    if lmax <= 0:
        raise DegenerateInputError("all variances are zero, bits cannot be spent")

    order = np.argsort(-lam, kind="stable")
    pos = lam[order] > 0
    logs = np.log2(lam[order][pos])
    csum = np.cumsum(logs)
    k = len(logs)
    for n in range(1, len(logs) + 1):
        g = (csum[n - 1] - B) / n
        if n == len(logs) or logs[n] <= g:
            k = n
            break
    log_gamma = (csum[k - 1] - B) / k
    gamma = 2.0 ** log_gamma
    bits = np.zeros_like(lam)
    act = order[:k]
    bits[act] = np.log2(lam[act]) - log_gamma
    distortions = np.minimum(gamma, lam)
    distortions[act] = gamma
    return RwfAllocation(float(gamma), lam, bits, distortions)


def rate_distortion(variances, bits):
    """``D_i = lambda_i 2^-R_i`` for complex Gaussian components."""
    return np.asarray(variances, dtype=float) * 2.0 ** (-np.asarray(bits, dtype=float))


def apportion_bits(bits, total=None):
    """Round real bit loads to integers by largest remainder.

    The integers sum to ``floor(total)`` (default ``floor(sum(bits))``).
    """
    bits = np.asarray(bits, dtype=float)
    total = int(np.floor(bits.sum() + 1e-9 if total is None else total + 1e-9))
    base = np.floor(bits + 1e-12).astype(int)
    left = total - int(base.sum())
    if left > 0:
        rema = bits - base
        idx = np.argsort(-rema, kind="stable")[:left]
        base[idx] += 1
    elif left < 0:
        # Only possible through the 1e-12 guard; take from the smallest remainders.
        idx = np.argsort(bits - base, kind="stable")
        for i in idx:
            if left == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                left += 1
    return base


# ---------------------------------------------------------------------------
# KL-transform scalar quantization


def _estimate_arrays(training_estimate, R):
    if training_estimate is None:
        return None, np.zeros_like(R)
    return training_estimate.estimate, np.asarray(training_estimate.error_covariance)


def klsq_feedback(cov, training_estimate, bits, shaping_loss=0.0, basis="estimate",
                  mode="analytic", rng=None, integer_bits=False, noise=None):
    """KL-transform scalar quantization with reverse water-filling.

    Parameters
    ----------
    cov : ChannelCovariance or ndarray
        Channel covariance ``R``.
    training_estimate : TrainingEstimate or None
        User-side estimate and its error covariance ``C``. ``None`` means
        perfect training.
    bits : float
        Feedback bits.
    shaping_loss : float
        Bits lost per real dimension; every active component's distortion is
        multiplied by ``2^(2 shaping_loss)``, capped at its variance.
    basis : {"estimate", "channel"}
        ``"estimate"`` applies the KL transform of the estimate covariance
        ``R - C`` and water-fills its eigenvalues, so the quantization error
        is orthogonal to the reconstruction. ``"channel"`` uses the
        eigenvectors and eigenvalues of ``R`` and adds ``U D U^H`` to ``C``.
        The two coincide under perfect training.
    mode : {"analytic", "simulated"}
        Simulated mode maps each estimate through a Gaussian test channel
        with per-component distortion ``D_i``.
    integer_bits : bool
        Round the per-component loads to integers (largest remainder) and
        use ``D_i = var_i 2^-R_i``.
    noise : ndarray, optional
        Unit-variance complex noise for simulated mode, one entry per KL
        coordinate, used instead of drawing from ``rng``.
    """
    R = hermitize(_matrix(cov))
    est, C = _estimate_arrays(training_estimate, R)
    if basis == "estimate":
        w, V = np.linalg.eigh(hermitize(R - C))
    elif basis == "channel":
        w, V = np.linalg.eigh(R)
    else:
        raise ValueError(f"unknown basis {basis!r}")
    order = np.argsort(-w, kind="stable")
    var = np.clip(w[order], 0.0, None)
    V = V[:, order]

    alloc = rwf_allocate(var, bits)
    rates = apportion_bits(alloc.bits) if integer_bits else alloc.bits
    D = np.where(rates > 0, rate_distortion(var, rates), var)
    if shaping_loss:
        D = np.where(rates > 0, np.minimum(var, D * 2.0 ** (2.0 * shaping_loss)), D)

    quant = hermitize((V * D) @ V.conj().T)
    terms = {"training": hermitize(C), "quantization": quant}

    bs, qerr = None, None
    if mode == "simulated":
        if est is None:
            raise ContractError("simulated mode needs the user's estimate")
        coords = np.asarray(est) @ V.conj()
        if noise is None:
            if rng is None:
                raise ContractError("simulated mode needs an rng or noise")
            noise = complex_normal(rng, coords.shape)
        if basis == "estimate":
            # Backward test channel: reconstruction and error are uncorrelated.
            keep = np.divide(var - D, var, out=np.zeros_like(var), where=var > 0)
            rec = keep * coords + np.sqrt(keep * D) * noise
        else:
            rec = coords + np.sqrt(D) * noise
        bs = rec @ V.T
        qerr = coords - rec
    elif mode != "analytic":
        raise ValueError(f"unknown mode {mode!r}")
    return _bundle(R, terms, bs, None, qerr)


# ---------------------------------------------------------------------------
# random vector quantization


def draw_codebook(rng, size, dim):
    """``size`` independent unit vectors, uniform on the complex sphere."""
    f = complex_normal(rng, (size, dim))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _eigh_desc(R):
    w, U = np.linalg.eigh(R)
    order = np.argsort(-w, kind="stable")
    return w[order], U[:, order]


def _usable_rank(w):
    """Number of eigenvalues large enough to be whitened (``> EIG_FLOOR * max``)."""
    return int(np.count_nonzero(w > EIG_FLOOR * max(w[0], 0.0))) if w[0] > 0 else 0


def _dominant(R, rank):
    M = R.shape[0]
    if not 2 <= rank <= M:
        raise ContractError(f"RVQ rank must lie in [2, {M}], got {rank}")
    w, U = _eigh_desc(R)
    if _usable_rank(w) < rank:
        raise DegenerateInputError(f"covariance has fewer than {rank} non-negligible eigenvalues")
    return U[:, :rank], w[:rank], U[:, rank:], np.clip(w[rank:], 0.0, None)


def _beta(Ur, lam, C):
    # Diagonal of Lambda^-1/2 U^H C U Lambda^-1/2; each ratio lies in [0, 1]
    # exactly, clipping removes rounding on tiny eigenvalues.
    ratios = np.real(np.einsum("ij,ik,kj->j", Ur.conj(), C, Ur)) / lam
    return float(np.sum(1.0 - np.clip(ratios, 0.0, 1.0)))


def _rvq_terms(R, C, rank, bits, skewed):
    Ur, lam, Ub, lb = _dominant(R, rank)
    proj = Ur @ Ur.conj().T
    beta = _beta(Ur, lam, C)
    scale = 2.0 ** (-bits / (rank - 1)) * beta / rank
    if skewed:
        quant = scale * (Ur * (lam ** 2 / lam[0])) @ Ur.conj().T
    else:
        quant = scale * (Ur * lam) @ Ur.conj().T
    terms = {
        "training": hermitize(proj @ C @ proj),
        "quantization": hermitize(quant),
        "truncation": hermitize((Ub * lb) @ Ub.conj().T),
    }
    return terms, Ur, lam


def _check_sim_bits(bits):
    if bits != int(bits) or bits < 0:
        raise ContractError("simulated RVQ needs an integer number of bits")
    if bits > MAX_SIMULATED_BITS:
        raise ContractError(f"simulated RVQ is limited to {MAX_SIMULATED_BITS} bits")
    return int(bits)


def _simulate_rvq(est, Ur, lam, bits, rng, codebook, skewed):
    if est is None:
        raise ContractError("simulated mode needs the user's estimate")
    B = _check_sim_bits(bits)
    if codebook is None:
        if rng is None:
            raise ContractError("simulated mode needs an rng or a codebook")
        codebook = draw_codebook(rng, 2 ** B, len(lam))
    f = np.asarray(codebook)
    x = np.asarray(est) @ Ur.conj()  # eigen coordinates
    root = np.sqrt(lam)
    if skewed:
        d = f * root
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        proj = x @ d.conj().T
        best = np.argmax(np.abs(proj) ** 2, axis=-1)
        coeff = np.take_along_axis(proj, best[..., None], axis=-1)
        rec = coeff * d[best]
        err = x - rec
    else:
        z = x / root
        proj = z @ f.conj().T
        best = np.argmax(np.abs(proj) ** 2, axis=-1)
        coeff = np.take_along_axis(proj, best[..., None], axis=-1)
        zq = coeff * f[best]
        err = z - zq
        rec = zq * root
    return rec @ Ur.T, err


def iso_rvq_feedback(cov, training_estimate, bits, rank, mode="analytic", rng=None,
                     codebook=None):
    """Isotropic RVQ of the whitened dominant-eigenspace coordinates.

    The user forms ``z = Lambda^-1/2 U_r^H h_hat`` and sends the index of the
    codeword ``c`` maximizing ``|c^H z|``; the base station rebuilds
    ``U_r Lambda^1/2 c c^H z``. The analytic error covariance is

    ``P C P + 2^(-B/(r-1)) (beta/r) R_r + Ubar Sigmabar Ubar^H``

    with ``P = U_r U_r^H`` and ``beta = r - tr(Lambda^-1 U_r^H C U_r)``.

    In simulated mode ``quantization_error`` holds ``z - c c^H z`` per
    realization. One codebook serves the whole batch unless ``codebook`` is
    given explicitly.
    """
    R = hermitize(_matrix(cov))
    est, C = _estimate_arrays(training_estimate, R)
    terms, Ur, lam = _rvq_terms(R, C, rank, bits, skewed=False)
    bs, qerr = None, None
    if mode == "simulated":
        bs, qerr = _simulate_rvq(est, Ur, lam, bits, rng, codebook, skewed=False)
    elif mode != "analytic":
        raise ValueError(f"unknown mode {mode!r}")
    return _bundle(R, terms, bs, rank, qerr)


def skewed_rvq_feedback(cov, training_estimate, bits, rank, mode="analytic", rng=None,
                        codebook=None):
    """RVQ with codewords ``Lambda^1/2 f / ||Lambda^1/2 f||`` in eigen coordinates.

    The encoder picks the codeword with the largest ``|d^H x|`` for the
    eigen coordinates ``x = U_r^H h_hat`` and the decoder projects onto it.
    With the same ``f`` vectors this is never worse than the isotropic
    quantizer on any realization. The analytic quantization term scales the
    isotropic one by ``Lambda / lambda_1``, which reproduces the closed-form
    upper bound of :func:`theorem2_bound` under perfect training. It is a
    surrogate, not an exact covariance.

    In simulated mode ``quantization_error`` holds ``x - d d^H x``.
    """
    R = hermitize(_matrix(cov))
    est, C = _estimate_arrays(training_estimate, R)
    terms, Ur, lam = _rvq_terms(R, C, rank, bits, skewed=True)
    bs, qerr = None, None
    if mode == "simulated":
        bs, qerr = _simulate_rvq(est, Ur, lam, bits, rng, codebook, skewed=True)
    elif mode != "analytic":
        raise ValueError(f"unknown mode {mode!r}")
    return _bundle(R, terms, bs, rank, qerr)


def theorem2_bound(eigenvalues, rank, bits):
    """``sum_{i<=r} lambda_i^2 / lambda_1 * 2^(-B/(r-1)) + sum_{i>r} lambda_i``.

    ``eigenvalues`` must be sorted in descending order.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if rank < 2:
        raise ContractError("rank must be at least 2")
    if rank > lam.size:
        raise ContractError("rank exceeds the number of eigenvalues")
    top = lam[:rank]
    return float(np.sum(top ** 2) / top[0] * 2.0 ** (-bits / (rank - 1)) + np.sum(lam[rank:]))


def rvq_expected_distortion(rank, bits):
    """Exact ``E[1 - max_i |c_i^H u|^2]`` for ``2^B`` isotropic codewords in ``C^r``.

    Equals ``2^B Beta(2^B, r/(r-1))``; the usual approximation is
    ``2^(-B/(r-1))``.
    """
    if rank < 2:
        raise ContractError("rank must be at least 2")
    n = 2.0 ** bits
    return float(np.exp(np.log(n) + betaln(n, rank / (rank - 1.0))))


def _rvq_traces(R, C, bits, skewed):
    """Analytic error trace for every rank ``2..usable``, indexed by ``rank - 2``."""
    w, U = _eigh_desc(R)
    k = _usable_rank(w)
    lam = w[:k]
    cdiag = np.real(np.einsum("ij,ik,kj->j", U.conj(), C, U))
    ratios = np.clip(cdiag[:k] / lam, 0.0, 1.0)
    ranks = np.arange(2, k + 1)
    beta = np.cumsum(1.0 - ratios)[1:]
    energy = np.cumsum(lam ** 2 / lam[0] if skewed else lam)[1:]
    quant = 2.0 ** (-bits / (ranks - 1)) * beta / ranks * energy
    train = np.cumsum(cdiag[:k])[1:]
    tail = np.clip(w, 0.0, None)
    trunc = np.sum(tail) - np.cumsum(tail[:k])[1:]
    return ranks, train + quant + trunc


def optimal_dominant_rank(cov, training_estimate, bits, kind=ISO_RVQ, rtol=1e-12):
    """Rank in ``[2, M]`` minimizing the analytic error trace.

    Ranks that would whiten negligible eigenvalues are skipped. Ties within
    ``rtol`` go to the smaller rank.
    """
    R = hermitize(_matrix(cov))
    _, C = _estimate_arrays(training_estimate, R)
    ranks, vals = _rvq_traces(R, C, bits, kind == SKEW_RVQ)
    if ranks.size == 0:
        raise DegenerateInputError("covariance has fewer than two non-negligible eigenvalues")
    best = 0
    for i in range(1, len(vals)):
        if vals[i] < vals[best] - rtol * abs(vals[best]):
            best = i
    return int(ranks[best])


def apply_feedback(scheme, cov, training_estimate, mode="analytic", rng=None, basis="estimate"):
    """Dispatch on ``scheme.kind``; RVQ without a rank uses the optimal one."""
    if scheme.kind == KLSQ:
        return klsq_feedback(cov, training_estimate, scheme.bits, scheme.shaping_loss,
                             basis=basis, mode=mode, rng=rng)
    rank = scheme.rank
    if rank is None:
        rank = optimal_dominant_rank(cov, training_estimate, scheme.bits, scheme.kind)
    rank = min(rank, _matrix(cov).shape[0])
    fn = iso_rvq_feedback if scheme.kind == ISO_RVQ else skewed_rvq_feedback
    return fn(cov, training_estimate, scheme.bits, rank, mode=mode, rng=rng)


# ---------------------------------------------------------------------------
# export


def allocation_to_dict(alloc):
    return {
        "water_level": alloc.water_level,
        "total_bits": alloc.total_bits,
        "total_distortion": alloc.total_distortion,
        "variances": alloc.variances.tolist(),
        "bits": alloc.bits.tolist(),
        "distortions": alloc.distortions.tolist(),
    }


def bundle_to_dict(bundle):
    """Scalar summary of a bundle: traces of each error term and of the total."""
    out = {f"mse_{k}": float(np.trace(v).real) for k, v in bundle.terms.items()}
    out["mse_total"] = float(np.trace(bundle.error_covariance).real)
    out["estimate_power"] = float(np.trace(bundle.estimate_covariance).real)
    out["clipped"] = bool(bundle.clipped)
    if bundle.rank is not None:
        out["rank"] = int(bundle.rank)
    return out
