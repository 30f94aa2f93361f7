"""Regularized zero-forcing precoding, SINR evaluation and overhead accounting.

Channel vectors are stored as rows: ``channels[n]`` is user ``n``'s channel
``h_n`` and ``estimates[n]`` the base station's estimate. The stacked
channel matrix of the precoder formulas is the conjugate of that array.

All SINR work is done in the ``N x N`` user domain through the push-through
identity ``(H^H H + c I)^-1 H^H = H^H (H H^H + c I)^-1``, which also makes it
cheap to batch over many channel draws.
"""

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, InfeasibleScenarioError, InvalidOverheadError

__all__ = [
    "PrecoderConfig",
    "OverheadModel",
    "RateReport",
    "RATE_REPORT_FIELDS",
    "rzf_precode",
    "sinr_per_user",
    "sum_rate",
    "net_rate",
    "feedback_overhead",
    "bits_for_overhead",
    "mac_capacity",
    "grid_search",
    "tdd_error_covariance",
    "reports_to_csv",
    "config_hash",
]


@dataclass(frozen=True)
class PrecoderConfig:
    """RZF parameters: regularization ``alpha``, total power ``power``, users ``num_users``."""

    alpha: float
    power: float
    num_users: int = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError("alpha must be positive")
        if not self.power > 0:
            raise ContractError("power must be positive")


@dataclass(frozen=True)
class OverheadModel:
    """Feedback channel: multiplexing factor ``kappa``, linear uplink SNR, block length ``T``."""

    kappa: float
    uplink_snr: float
    block_length: int

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ContractError("kappa must lie in (0, 1]")
        if not self.uplink_snr > 0:
            raise ContractError("uplink_snr must be positive")
        if self.block_length < 2:
            raise ContractError("block_length must be at least 2")


RATE_REPORT_FIELDS = ["scenario", "M", "N", "T", "scheme", "tau", "B", "delta",
                      "gross", "net", "sinr"]


@dataclass(frozen=True, eq=False)
class RateReport:
    """Outcome of a rate evaluation at one ``(tau, delta)`` operating point."""

    per_user_sinr: np.ndarray
    gross_rate: float
    overhead_fraction: float
    net_rate: float
    chosen_tau: int
    chosen_B: float
    delta: float
    M: int = 0
    N: int = 0
    T: int = 0
    scheme: str = ""
    scenario: str = ""
    extra: dict = field(default_factory=dict)

    def to_row(self):
        return {
            "scenario": self.scenario,
            "M": self.M,
            "N": self.N,
            "T": self.T,
            "scheme": self.scheme,
            "tau": self.chosen_tau,
            "B": f"{self.chosen_B:.6g}",
            "delta": f"{self.delta:.6g}",
            "gross": f"{self.gross_rate:.10g}",
            "net": f"{self.net_rate:.10g}",
            "sinr": ";".join(f"{s:.10g}" for s in self.per_user_sinr),
        }


def reports_to_csv(reports, stream=None):
    """Write rate reports with the columns of :data:`RATE_REPORT_FIELDS`."""
    out = stream if stream is not None else io.StringIO()
    writer = csv.DictWriter(out, fieldnames=RATE_REPORT_FIELDS)
    writer.writeheader()
    for r in reports:
        writer.writerow(r.to_row())
    return out.getvalue() if stream is None else None


def config_hash(payload):
    """Short stable hash of a JSON-serializable mapping."""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _as_rows(a):
    a = np.asarray(a, dtype=complex)
    if a.ndim < 2:
        raise ContractError("expected an (N, M) array of channel rows")
    return a


def rzf_precode(estimates, config):
    """RZF precoder ``W = zeta (H^H H + M alpha I)^-1 H^H`` and its ``zeta``.

    ``estimates`` holds one estimated channel per row. ``zeta^2`` is
    ``N / tr(H K^2 H^H)`` so that ``(P/N) tr(W W^H) = P``.
    """
    A = _as_rows(estimates)
    if A.ndim != 2:
        raise ContractError("rzf_precode takes a single (N, M) estimate matrix")
    N, M = A.shape
    H = A.conj()
    if not np.any(H):
        raise DegenerateInputError("all channel estimates are zero")
    G = H @ H.conj().T
    Ainv = np.linalg.inv(G + M * config.alpha * np.eye(N))
    KHh = H.conj().T @ Ainv  # K H^H through the push-through identity
    t = np.trace(Ainv @ G @ Ainv).real
    if t <= 0:
        raise DegenerateInputError("precoder normalization is zero")
    zeta = np.sqrt(N / t)
    return zeta * KHh, float(zeta)


def sinr_per_user(channels, estimates, config):
    """Per-user SINR of RZF built on ``estimates`` over the true ``channels``.

    The errors are ``channels - estimates``. The signal term is the estimate
    part ``|h_hat_n^H K h_hat_n|^2``; the error part of the useful channel and
    the leakage to the other users count as interference::

        gamma_n = |h_hat_n^H K h_hat_n|^2 /
                  (N/(P zeta^2) + |eps_n^H K h_hat_n|^2
                   + sum_{j != n} |h_n^H K h_hat_j|^2)

    Both arrays may carry leading batch axes, ``(..., N, M)``.
    A batch entry with all-zero estimates gets SINR 0.
    """
    Hn = _as_rows(channels)
    Ae = _as_rows(estimates)
    if Hn.shape != Ae.shape:
        raise ContractError(f"channel shape {Hn.shape} != estimate shape {Ae.shape}")
    N, M = Ae.shape[-2:]
    H = Ae.conj()
    Htrue = Hn.conj()
    Hh = np.swapaxes(H, -1, -2).conj()
    G = H @ Hh
    Ainv = np.linalg.inv(G + M * config.alpha * np.eye(N))
    GA = G @ Ainv
    noise = np.einsum("...ij,...jk,...ki->...", Ainv, G, Ainv).real / config.power
    cross = (Htrue @ Hh) @ Ainv  # [n, j] = h_n^H K h_hat_j
    signal = np.abs(np.diagonal(GA, axis1=-2, axis2=-1)) ** 2
    err_term = np.abs(np.diagonal(cross - GA, axis1=-2, axis2=-1)) ** 2
    leak = np.sum(np.abs(cross) ** 2, axis=-1) - np.abs(np.diagonal(cross, axis1=-2, axis2=-1)) ** 2
    denom = noise[..., None] + err_term + leak
    with np.errstate(invalid="ignore", divide="ignore"):
        sinr = np.where(signal > 0, signal / denom, 0.0)
    return sinr


def sum_rate(sinr):
    return float(np.sum(np.log2(1.0 + np.asarray(sinr))))


def net_rate(sinr, tau, delta, T):
    """``(1 - (tau + delta)/T) sum_n log2(1 + gamma_n)``."""
    return (1.0 - (tau + delta) / T) * sum_rate(sinr)


def mac_capacity(overhead, M, N):
    """Uplink multiple-access capacity ``kappa min(M, N) log2(M SNR_ul)``."""
    x = M * overhead.uplink_snr
    if x <= 1:
        raise InvalidOverheadError(f"M * SNR_ul = {x:.3g} must exceed 1")
    return overhead.kappa * min(M, N) * np.log2(x)


def feedback_overhead(bits, overhead, M, N):
    """Feedback channel uses ``delta = N B / C_mac`` for ``B`` bits per user."""
    if bits < 0:
        raise ContractError("bits must be non-negative")
    return N * bits / mac_capacity(overhead, M, N)


def bits_for_overhead(delta, overhead, M, N):
    """Inverse of :func:`feedback_overhead`: bits per user carried by ``delta`` uses."""
    return delta * mac_capacity(overhead, M, N) / N


def tdd_error_covariance(R, pilot_energy):
    """MMSE error covariance after orthogonal uplink pilots of total energy ``E``.

    ``C = R - E R (I + E R)^-1 R``, the inverse-free form of
    ``(R^-1 + E I)^-1``.
    """
    R = np.asarray(R)
    I = np.eye(R.shape[0])
    C = R - pilot_energy * R @ np.linalg.solve(I + pilot_energy * R, R)
    return 0.5 * (C + C.conj().T)


def grid_search(evaluate, T, tau_grid, delta_grid=None, delta_max=20):
    """Exhaustive search of the net rate over training and feedback lengths.

    Parameters
    ----------
    evaluate : callable
        ``evaluate(tau, delta) -> per-user SINR array``.
    T : int
        Block length.
    tau_grid : iterable of int
        Candidate training lengths.
    delta_grid : iterable of float, optional
        Candidate feedback lengths; defaults to ``1..min(delta_max, T - tau)``.
        An explicit grid may contain 0 (no feedback).

    Returns
    -------
    (best, table)
        ``best`` is ``(net, tau, delta, sinr)`` for the maximizer, ties going
        to the smaller ``tau + delta``; ``table`` lists every evaluated cell.
    """
    best, table = None, []
    for tau in sorted(set(int(t) for t in tau_grid)):
        if tau < 1:
            continue
        deltas = (range(1, min(delta_max, T - tau) + 1) if delta_grid is None
                  else sorted(d for d in delta_grid if d >= 0 and tau + d <= T))
        for delta in deltas:
            sinr = np.asarray(evaluate(tau, delta))
            value = net_rate(sinr, tau, delta, T)
            table.append((tau, delta, value))
            key = (value, -(tau + delta))
            if best is None or key > (best[0], -(best[1] + best[2])):
                best = (value, tau, delta, sinr)
    if best is None:
        raise InfeasibleScenarioError(f"no (tau, delta) pair fits in a block of T={T}")
    return best, table
