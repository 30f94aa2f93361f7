"""Scenario configuration and the seeded end-to-end simulation driver.

A :class:`ScenarioConfig` fixes the array, the users, the SNRs and the
training/feedback choices. :func:`run_scenario` draws the user geometry,
chooses the training and feedback lengths by exhaustive search, and
evaluates the rate by the deterministic approximation, by Monte Carlo, or
both.

Randomness is counter based. Every user in every trial owns a Philox
stream keyed by ``(seed, stream, trial, user)``, so results do not depend
on the order in which trials run or on the number of worker threads.
"""

import dataclasses
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from ._linalg import complex_normal, hermitize
from .channel_model import (UserGeometry, iid_ccm, laplacian_ccm, one_ring_ccm)
from .deterministic import DeInput, de_sinr, solve_fixed_point
from .errors import ContractError, InfeasibleScenarioError
from .feedback import (KLSQ, KINDS, FeedbackScheme, apply_feedback, klsq_feedback)
from .precoding import (OverheadModel, PrecoderConfig, RateReport, bits_for_overhead,
                        config_hash, grid_search, net_rate, sinr_per_user, sum_rate,
                        tdd_error_covariance)
from .training import (NonConvergenceWarning, TrainingEstimate, mmse_estimate, mmse_gain,
                       optimize_training, unitary_training)

__all__ = [
    "ScenarioConfig",
    "ResultRow",
    "RESULT_FIELDS",
    "Pipeline",
    "load_config",
    "user_rng",
    "draw_azimuths",
    "build_covariances",
    "run_scenario",
    "simulate",
    "ScenarioOutcome",
    "tau_grid",
    "rate_equivalent_sinr",
    "rows_to_csv",
]

CHANNEL_MODELS = ("one_ring", "laplacian", "iid")
STREAM_GEOMETRY = 0
STREAM_TRIALS = 1


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one simulated operating curve point.

    Angles are in degrees. ``azimuths`` overrides the uniform draw over
    ``[-azimuth_range, azimuth_range]``. ``tau`` and ``delta`` fix the
    operating point; when ``None`` they are found by grid search.
    ``duplex="tdd"`` replaces training and feedback with reciprocity-based
    uplink estimation.
    """

    M: int = 50
    N: int = 8
    T: int = 200
    snr_dl_db: float = 20.0
    snr_ul_db: float = 10.0
    alpha: float = 0.01
    kappa: float = 0.5
    channel_model: str = "one_ring"
    spacing: float = 0.5
    spread_deg: float = 10.0
    azimuth_range_deg: float = 60.0
    azimuths: tuple = None
    duplex: str = "fdd"
    training: str = "optimized"
    feedback: str = KLSQ
    feedback_rank: int = None
    shaping_loss: float = 0.0
    rate_eval: str = "de"
    search: str = "de"
    tau: int = None
    delta: float = None
    tau_points: int = 15
    delta_max: int = 20
    training_max_iter: int = 500
    trials: int = 2000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.T < 2:
            raise ContractError("T must be at least 2")
        if self.trials < 1:
            raise ContractError("trials must be at least 1")
        for name in ("M", "N", "alpha", "kappa", "spacing", "spread_deg"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.channel_model not in CHANNEL_MODELS:
            raise ContractError(f"channel_model must be one of {CHANNEL_MODELS}")
        if self.duplex not in ("fdd", "tdd"):
            raise ContractError("duplex must be 'fdd' or 'tdd'")
        if self.training not in ("optimized", "unitary"):
            raise ContractError("training must be 'optimized' or 'unitary'")
        if self.feedback not in KINDS:
            raise ContractError(f"feedback must be one of {KINDS}")
        if self.rate_eval not in ("mc", "de", "both"):
            raise ContractError("rate_eval must be 'mc', 'de' or 'both'")
        if self.search not in ("mc", "de"):
            raise ContractError("search must be 'mc' or 'de'")
        if self.azimuths is not None:
            az = tuple(float(a) for a in self.azimuths)
            if len(az) != self.N:
                raise ContractError(f"{len(az)} azimuths given for N={self.N} users")
            object.__setattr__(self, "azimuths", az)

    @property
    def power(self):
        return 10.0 ** (self.snr_dl_db / 10.0)

    @property
    def uplink_snr(self):
        return 10.0 ** (self.snr_ul_db / 10.0)

    @property
    def overhead(self):
        return OverheadModel(self.kappa, self.uplink_snr, self.T)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        if d["azimuths"] is not None:
            d["azimuths"] = list(d["azimuths"])
        return d

    def digest(self):
        """Hash of the fields that change results (not ``workers``)."""
        d = self.to_dict()
        d.pop("workers")
        return config_hash(d)

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)


def load_config(path=None, overrides=None):
    """Read a YAML or JSON scenario file and apply ``overrides`` on top.

    Precedence is overrides, then file, then dataclass defaults. ``None``
    override values are ignored.
    """
    data = {}
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        data = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return ScenarioConfig.from_mapping(data)


RESULT_FIELDS = ["scenario", "metric", "x", "y", "stderr", "units"]


@dataclass(frozen=True)
class ResultRow:
    """One scalar output. ``stderr`` is NaN for deterministic quantities."""

    scenario: str
    metric: str
    x: float
    y: float
    stderr: float = float("nan")
    units: str = ""

    def as_dict(self):
        return {
            "scenario": self.scenario,
            "metric": self.metric,
            "x": f"{self.x:.10g}",
            "y": f"{self.y:.10g}",
            "stderr": "" if np.isnan(self.stderr) else f"{self.stderr:.6g}",
            "units": self.units,
        }


def rows_to_csv(rows, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


# ---------------------------------------------------------------------------
# randomness and geometry


def user_rng(seed, stream, *keys):
    """Independent generator for ``(seed, stream, *keys)``."""
    ss = np.random.SeedSequence([int(seed) % 2 ** 64, int(stream), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def draw_azimuths(config):
    if config.azimuths is not None:
        return np.deg2rad(np.asarray(config.azimuths))
    rng = user_rng(config.seed, STREAM_GEOMETRY)
    lim = np.deg2rad(config.azimuth_range_deg)
    return rng.uniform(-lim, lim, config.N)


def build_covariances(config, azimuths=None):
    if config.channel_model == "iid":
        cov = iid_ccm(config.M)
        return [cov] * config.N
    model = one_ring_ccm if config.channel_model == "one_ring" else laplacian_ccm
    az = draw_azimuths(config) if azimuths is None else azimuths
    spread = np.deg2rad(config.spread_deg)
    return [model(UserGeometry(float(a), spread, config.spacing), config.M) for a in az]


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class _Point:
    tau: int
    delta: float
    bits: float
    estimate_covs: list
    design: object = None
    bundles: list = None
    error_covs: list = None


@dataclass
class Pipeline:
    """Training, feedback and rate evaluation for one set of user covariances."""

    config: ScenarioConfig
    covs: list
    _designs: dict = field(default_factory=dict)
    _estimates: dict = field(default_factory=dict)
    _e_last: np.ndarray = None
    _de_cache: dict = field(default_factory=dict)

    @property
    def R(self):
        return np.stack([c.matrix for c in self.covs])

    def rebind(self, config):
        """Pipeline for ``config`` sharing this one's caches.

        Only the block length may differ: pilots, feedback and the
        deterministic SINR at a given ``(tau, delta)`` do not depend on it.
        """
        if config.replace(T=self.config.T) != self.config:
            raise ContractError("a pipeline can only be reused for a different T")
        return Pipeline(config, self.covs, self._designs, self._estimates, self._e_last,
                        self._de_cache)

    def design(self, tau):
        if tau not in self._designs:
            cfg = self.config
            if cfg.training == "unitary":
                d = unitary_training(cfg.M, tau, cfg.power)
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", NonConvergenceWarning)
                    # Rates settle long before the stationarity residual does,
                    # so the plain capped iteration is enough here.
                    d = optimize_training(self.covs, tau, cfg.power, max_iter=cfg.training_max_iter,
                                          polish_after=None)
            self._designs[tau] = d
        return self._designs[tau]

    def scheme(self, bits):
        cfg = self.config
        return FeedbackScheme(cfg.feedback, float(bits), cfg.feedback_rank, cfg.shaping_loss)

    def point(self, tau, delta):
        """Analytic covariances at one operating point."""
        cfg = self.config
        if cfg.duplex == "tdd":
            energy = tau * cfg.uplink_snr
            errs = [tdd_error_covariance(c.matrix, energy) for c in self.covs]
            ests = [hermitize(c.matrix - e) for c, e in zip(self.covs, errs)]
            return _Point(tau, 0.0, 0.0, ests, error_covs=errs)
        bits = bits_for_overhead(delta, cfg.overhead, cfg.M, cfg.N)
        d = self.design(tau)
        if tau not in self._estimates:
            self._estimates[tau] = [mmse_estimate(c, d) for c in self.covs]
        scheme = self.scheme(bits)
        bundles = [apply_feedback(scheme, c, te) for c, te in zip(self.covs, self._estimates[tau])]
        return _Point(tau, delta, bits, [b.estimate_covariance for b in bundles], d, bundles,
                      [b.error_covariance for b in bundles])

    def search_sinr(self, tau, delta):
        """Deterministic SINR at ``(tau, delta)``, cached."""
        key = (tau, delta)
        if key not in self._de_cache:
            self._de_cache[key] = self.de_sinr(self.point(tau, delta))
        return self._de_cache[key]

    def de_sinr(self, point):
        # Neighbouring grid cells have close solutions, so the previous one
        # is a good starting point.
        inp = DeInput(point.estimate_covs, self.R, self.config.alpha, self.config.power)
        state = solve_fixed_point(inp, e0=self._e_last)
        self._e_last = state.e_bar
        return de_sinr(state, inp)

    def mc_sinr(self, point, trials=None):
        """Per-trial SINRs, shape ``(trials, N)``."""
        cfg = self.config
        trials = cfg.trials if trials is None else trials
        chunks = np.array_split(np.arange(trials), max(1, min(trials, 4 * cfg.workers)))
        work = [c for c in chunks if len(c)]
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                parts = list(pool.map(lambda idx: self._mc_chunk(point, idx), work))
        else:
            parts = [self._mc_chunk(point, idx) for idx in work]
        return np.concatenate(parts, axis=0)

    def _noise(self, trial_ids, user, sizes):
        out = [np.empty((len(trial_ids), s), dtype=complex) for s in sizes]
        for k, t in enumerate(trial_ids):
            rng = user_rng(self.config.seed, STREAM_TRIALS, t, user)
            for arr, s in zip(out, sizes):
                arr[k] = complex_normal(rng, s)
        return out

    def _mc_chunk(self, point, trial_ids):
        cfg = self.config
        M, N = cfg.M, cfg.N
        H = np.empty((len(trial_ids), N, M), dtype=complex)
        Hb = np.empty_like(H)
        for n, cov in enumerate(self.covs):
            if cfg.duplex == "tdd":
                z, w = self._noise(trial_ids, n, (M, M))
                H[:, n] = h = z @ cov.sqrt_factor().T
                # Uplink MMSE from sqrt(E) h + w with E = tau * SNR_ul.
                E = point.tau * cfg.uplink_snr
                gain = np.sqrt(E) * np.linalg.solve(E * cov.matrix + np.eye(M), cov.matrix).T
                Hb[:, n] = (np.sqrt(E) * h + w) @ gain
                continue
            d = point.design
            z, npil, nq = self._noise(trial_ids, n, (M, d.length, M))
            H[:, n] = h = z @ cov.sqrt_factor().T
            y = h @ d.matrix.conj() + npil
            if cfg.feedback == KLSQ:
                te = TrainingEstimate(y @ mmse_gain(cov, d).T, point.bundles[n].terms["training"])
                b = klsq_feedback(cov, te, point.bits, cfg.shaping_loss, mode="simulated", noise=nq)
                Hb[:, n] = b.bs_estimate
            else:
                # RVQ codebooks of this size cannot be searched; draw the estimate
                # and an independent error from the analytic covariances instead.
                Hb[:, n] = z @ _sqrt_factor(point.estimate_covs[n]).T
                H[:, n] = Hb[:, n] + nq @ _sqrt_factor(point.error_covs[n]).T
        return sinr_per_user(H, Hb, PrecoderConfig(cfg.alpha, cfg.power))


def _sqrt_factor(cov):
    w, V = np.linalg.eigh(hermitize(cov))
    return V * np.sqrt(np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# driver


def tau_grid(config):
    """Candidate training lengths searched when ``config.tau`` is unset."""
    if config.tau is not None:
        return [int(config.tau)]
    if config.duplex == "tdd":
        lo, hi = config.N, config.T - 1
        if lo > hi:
            return []
        return sorted(set(np.round(np.geomspace(lo, hi, config.tau_points)).astype(int)))
    hi = min(config.M, config.T - 2)
    return sorted(set(np.round(np.linspace(1, max(hi, 1), config.tau_points)).astype(int)))


def rate_equivalent_sinr(trial_sinr):
    """Per-user SINR whose rate equals the ergodic rate ``E[log2(1 + gamma)]``."""
    return 2.0 ** np.mean(np.log2(1.0 + trial_sinr), axis=0) - 1.0


@dataclass
class ScenarioOutcome:
    """Rows for the CSV writer plus the underlying rate reports."""

    rows: list
    reports: dict
    pipeline: Pipeline
    tau: int
    delta: float
    bits: float
    trial_sinr: np.ndarray = None


def _report(config, sinr, tau, delta, bits, scheme):
    T = config.T
    return RateReport(sinr, sum_rate(sinr), (tau + delta) / T, net_rate(sinr, tau, delta, T),
                      int(tau), float(bits), float(delta), config.M, config.N, T, scheme,
                      config.digest())


def simulate(config, x=None, pipeline=None):
    """Full run of one scenario; see :func:`run_scenario`.

    ``pipeline`` (from an earlier outcome) reuses its pilots and cached
    deterministic SINRs for a config that differs only in ``T``.
    """
    if pipeline is None:
        pipe = Pipeline(config, build_covariances(config))
    else:
        pipe = pipeline.rebind(config)
    tdd = config.duplex == "tdd"

    def evaluate(tau, delta):
        if config.search == "de":
            return pipe.search_sinr(tau, delta)
        return rate_equivalent_sinr(pipe.mc_sinr(pipe.point(tau, delta)))

    if tdd:
        best = None
        for tau in tau_grid(config):
            s = np.asarray(evaluate(tau, 0.0))
            val = net_rate(s, tau, 0.0, config.T)
            if best is None or val > best[0]:
                best = (val, tau, 0.0)
        if best is None:
            raise InfeasibleScenarioError(f"TDD needs T > N (T={config.T}, N={config.N})")
        tau, delta = best[1], best[2]
    else:
        deltas = None if config.delta is None else [config.delta]
        best, _ = grid_search(evaluate, config.T, tau_grid(config), deltas, config.delta_max)
        tau, delta = best[1], best[2]

    point = pipe.point(tau, delta)
    key = config.digest()
    x = float(config.M if x is None else x)
    scheme = "tdd" if tdd else f"fdd-{config.training}-{config.feedback}"
    rows = [
        ResultRow(key, "tau", x, tau, units="symbols"),
        ResultRow(key, "delta", x, delta, units="symbols"),
        ResultRow(key, "bits", x, point.bits, units="bits"),
        ResultRow(key, "mse_error_total", x,
                  float(sum(np.trace(e).real for e in point.error_covs)), units="power"),
    ]
    if point.bundles is not None:
        for label in ("training", "quantization", "truncation"):
            if label in point.bundles[0].terms:
                val = sum(np.trace(b.terms[label]).real for b in point.bundles)
                rows.append(ResultRow(key, f"mse_{label}", x, float(val), units="power"))
    reports = {}
    trial_sinr = None
    if config.rate_eval in ("de", "both"):
        s = pipe.de_sinr(point)
        rep = _report(config, s, tau, delta, point.bits, scheme + "-de")
        reports["de"] = rep
        rows += [
            ResultRow(key, "net_rate_de", x, rep.net_rate, units="bit/s/Hz"),
            ResultRow(key, "gross_rate_de", x, rep.gross_rate, units="bit/s/Hz"),
            ResultRow(key, "sinr_de_mean", x, float(np.mean(s)), units="linear"),
        ]
    if config.rate_eval in ("mc", "both"):
        trial_sinr = pipe.mc_sinr(point)
        n = trial_sinr.shape[0]
        per_trial = np.sum(np.log2(1.0 + trial_sinr), axis=1)
        scale = 1.0 - (tau + delta) / config.T
        s = rate_equivalent_sinr(trial_sinr)
        rep = _report(config, s, tau, delta, point.bits, scheme + "-mc")
        reports["mc"] = rep
        err = np.std(per_trial, ddof=1) / np.sqrt(n) if n > 1 else 0.0
        mean_s = np.mean(trial_sinr, axis=1)
        serr = np.std(mean_s, ddof=1) / np.sqrt(n) if n > 1 else 0.0
        rows += [
            ResultRow(key, "net_rate_mc", x, scale * per_trial.mean(), scale * err, "bit/s/Hz"),
            ResultRow(key, "gross_rate_mc", x, per_trial.mean(), err, "bit/s/Hz"),
            ResultRow(key, "sinr_mc_mean", x, float(mean_s.mean()), serr, "linear"),
        ]
    return ScenarioOutcome(rows, reports, pipe, tau, delta, point.bits, trial_sinr)


def run_scenario(config, x=None):
    """Simulate ``config`` and return its :class:`ResultRow` list.

    The operating point ``(tau, delta)`` is searched with the method in
    ``config.search`` and then evaluated according to ``config.rate_eval``.
    Monte Carlo rows carry standard errors. ``x`` labels the rows (default
    ``M``).
    """
    return simulate(config, x).rows
