"""Fast battery of model invariants, run by ``fddmimo validate``."""

import time
from dataclasses import dataclass

import numpy as np

from ._linalg import is_hermitian, min_eigenvalue
from .channel_model import (UserGeometry, dominant_representation, laplacian_ccm,
                            one_ring_ccm)
from .deterministic import DeInput, solve_fixed_point
from .feedback import (ISO_RVQ, KLSQ, SKEW_RVQ, FeedbackScheme, apply_feedback,
                       rwf_allocate)
from .precoding import (PrecoderConfig, bits_for_overhead, feedback_overhead, rzf_precode)
from .scenario import ScenarioConfig, build_covariances, simulate, user_rng
from .training import (cmi_objective, kkt_residual, mmse_estimate, optimize_training,
                       training_error_covariance, unitary_training)

__all__ = ["Check", "run_checks"]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def _covs(M=24, N=4, seed=3):
    rng = user_rng(seed, 0)
    az = rng.uniform(-np.pi / 3, np.pi / 3, N)
    return [one_ring_ccm(UserGeometry(a, np.deg2rad(10.0), 0.5), M) for a in az]


def _ccm_structure():
    worst = 0.0
    for model in (one_ring_ccm, laplacian_ccm):
        R = model(UserGeometry(0.3, np.deg2rad(15.0), 0.5), 32).matrix
        ok = is_hermitian(R) and np.allclose(np.diag(R).real, 1.0, atol=1e-9)
        ok &= np.allclose(R[1:, 1:], R[:-1, :-1], atol=1e-12)
        worst = min(worst, min_eigenvalue(R))
        if not ok:
            return False, f"{model.__name__} structure violated"
    return worst > -1e-9, f"min eigenvalue {worst:.2e}"


def _dominant_split():
    R = _covs(M=20, N=1)[0]
    dom = dominant_representation(R, 5)
    err = np.abs(dom.dominant_covariance + dom.residual_covariance - R.matrix).max()
    return err < 1e-10, f"max error {err:.2e}"


def _training():
    covs = _covs()
    P, tau = 100.0, 6
    design = optimize_training(covs, tau, P, max_iter=20000)
    X = design.matrix
    power = np.linalg.norm(X) ** 2
    ok = abs(power - tau * P) < 1e-8 * tau * P
    uni = unitary_training(covs[0].M, tau, P)
    ok &= cmi_objective(covs, design) >= cmi_objective(covs, uni) - 1e-9
    for c in covs:
        C = training_error_covariance(c, design)
        ok &= min_eigenvalue(C) > -1e-9 and min_eigenvalue(c.matrix - C) > -1e-9
    kkt, _ = kkt_residual(covs, design)
    return bool(ok and kkt < 1e-6), f"power {power:.6g}, KKT {kkt:.2e}"


def _rwf():
    lam = np.array([5.0, 3.0, 1.0, 0.2, 0.01])
    prev = None
    for B in (0.0, 1.0, 4.0, 10.0, 30.0):
        a = rwf_allocate(lam, B)
        if abs(a.total_bits - B) > 1e-9 or np.any(a.distortions > lam + 1e-12):
            return False, f"budget or cap violated at B={B}"
        if prev is not None and a.water_level > prev + 1e-12:
            return False, "water level increased with the budget"
        prev = a.water_level
    return True, ""


def _feedback():
    covs = _covs(M=20, N=3)
    design = unitary_training(20, 6, 100.0)
    worst = 0.0
    for c in covs:
        te = mmse_estimate(c, design)
        for kind in (KLSQ, ISO_RVQ, SKEW_RVQ):
            b = apply_feedback(FeedbackScheme(kind, 40.0), c, te)
            worst = min(worst, min_eigenvalue(b.error_covariance),
                        min_eigenvalue(b.estimate_covariance))
            total = b.error_covariance + b.estimate_covariance
            if not b.clipped and np.abs(total - c.matrix).max() > 1e-8:
                return False, f"{kind}: error and estimate do not add up to R"
    return worst > -1e-8, f"min eigenvalue {worst:.2e}"


def _precoder():
    rng = user_rng(1, 9)
    H = (rng.standard_normal((4, 16)) + 1j * rng.standard_normal((4, 16))) / np.sqrt(2)
    cfg = PrecoderConfig(0.05, 10.0)
    W, _ = rzf_precode(H, cfg)
    p = cfg.power / 4 * np.linalg.norm(W) ** 2
    return abs(p - cfg.power) < 1e-9 * cfg.power, f"transmit power {p:.10g}"


def _overhead():
    ov = ScenarioConfig().overhead
    d = feedback_overhead(123.0, ov, 50, 8)
    back = bits_for_overhead(d, ov, 50, 8)
    return abs(back - 123.0) < 1e-9, f"delta {d:.4g}"


def _deterministic():
    covs = _covs(M=24, N=4)
    Rh = [0.8 * c.matrix for c in covs]
    inp = DeInput(Rh, [c.matrix for c in covs], 0.01, 100.0)
    st = solve_fixed_point(inp)
    ok = st.residual < 1e-10 and np.all(st.e_bar > 0) and st.spectral_radius < 1
    return bool(ok), f"{st.iterations} iterations, spectral radius {st.spectral_radius:.3f}"


def _reproducible():
    cfg = ScenarioConfig(M=16, N=4, T=100, tau=6, delta=5, trials=64, rate_eval="mc")
    a = simulate(cfg).trial_sinr
    b = simulate(cfg.replace(workers=2)).trial_sinr
    same = np.array_equal(a, b)
    other = simulate(cfg.replace(seed=1)).trial_sinr
    return bool(same and not np.array_equal(a, other)), ""


def _geometry():
    cfg = ScenarioConfig(M=16, N=4)
    a = np.stack([c.matrix for c in build_covariances(cfg)])
    b = np.stack([c.matrix for c in build_covariances(cfg.replace(trials=10))])
    return bool(np.array_equal(a, b)), ""


CHECKS = [
    ("covariance structure", _ccm_structure),
    ("dominant plus residual equals covariance", _dominant_split),
    ("training power, MMSE order and KKT", _training),
    ("reverse water-filling budget and cap", _rwf),
    ("feedback covariances PSD and additive", _feedback),
    ("RZF power constraint", _precoder),
    ("feedback overhead round trip", _overhead),
    ("deterministic fixed point", _deterministic),
    ("geometry independent of trial count", _geometry),
    ("bit-identical with workers and seed sensitive", _reproducible),
]


def run_checks(verbose=True):
    """Run every check and return the list of :class:`Check` results."""
    out = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crash counts as a failure
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        res = Check(name, bool(passed), detail)
        out.append(res)
        if verbose:
            tag = "PASS" if res.passed else "FAIL"
            extra = f" ({detail})" if detail else ""
            print(f"{tag} {name}{extra} [{time.perf_counter() - t0:.1f}s]", flush=True)
    return out
