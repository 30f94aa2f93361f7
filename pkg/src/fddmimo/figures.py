"""Figure recipes: each builds its parameter sweep and returns result rows.

Recipes write no plots, only rows that :func:`reproduce` saves as CSV. All
of them use N=8 users, downlink SNR 20 dB, uplink SNR 10 dB and, unless
stated otherwise, one-ring covariances with D=0.5 and a 10 degree spread.
Feedback-error recipes assume perfect training so that only the quantizer
contributes.
"""

import os
import warnings

import numpy as np

from .channel_model import effective_rank
from .feedback import ISO_RVQ, KLSQ, SKEW_RVQ, FeedbackScheme, _rvq_traces, apply_feedback
from .precoding import bits_for_overhead
from .scenario import (ResultRow, ScenarioConfig, build_covariances, rows_to_csv, simulate,
                       user_rng)
from .training import (NonConvergenceWarning, optimize_training, random_orthogonal_training, total_training_mse,
                       unitary_training)

__all__ = ["FIGURES", "reproduce", "figure_rows"]

M_SWEEP = (20, 40, 60, 80, 100)


def _base(trials, seed, **kw):
    return ScenarioConfig(trials=trials, seed=seed, **kw)


def _series(rows, name, cfg, x, rate_eval, pipeline=None):
    out = simulate(cfg.replace(rate_eval=rate_eval), x=x, pipeline=pipeline)
    for r in out.rows:
        rows.append(ResultRow(r.scenario, f"{name}:{r.metric}", r.x, r.y, r.stderr, r.units))
    return out.pipeline


def fig1_cdf(trials=2000, seed=0, rate_eval="both", **_):
    """Empirical CDF of covariance eigenvalues at M=50 for both angular models."""
    rows = []
    for model in ("one_ring", "laplacian"):
        for spread in (5.0, 10.0, 20.0):
            cfg = _base(trials, seed, M=50, channel_model=model, spread_deg=spread)
            covs = build_covariances(cfg)
            ev = np.sort(np.concatenate([c.eigenvalues for c in covs]))
            ev = np.clip(ev, 0.0, None)
            cdf = np.arange(1, ev.size + 1) / ev.size
            key = cfg.digest()
            name = f"cdf_{model}_spread{spread:g}"
            rows += [ResultRow(key, name, float(x), float(y), units="probability")
                     for x, y in zip(ev, cdf)]
            ranks = [effective_rank(c) for c in covs]
            rows.append(ResultRow(key, f"effective_rank_{model}_spread{spread:g}", 50,
                                  float(np.mean(ranks)), units="count"))
    return rows


def fig2_tdd_fdd(trials=2000, seed=0, rate_eval="both", m_values=M_SWEEP, **_):
    """Net rate versus M: FDD (correlated and i.i.d.) against TDD."""
    rows = []
    variants = {
        "fdd_one_ring": dict(),
        "fdd_laplacian": dict(channel_model="laplacian"),
        "fdd_iid": dict(channel_model="iid", training="unitary"),
        "tdd": dict(duplex="tdd"),
        "tdd_equal_snr": dict(duplex="tdd", snr_ul_db=20.0),
    }
    for M in m_values:
        for name, kw in variants.items():
            _series(rows, name, _base(trials, seed, M=M, **kw), M, rate_eval)
    return rows


def fig4_opt_vs_unitary(trials=2000, seed=0, rate_eval="both", m_values=M_SWEEP, **_):
    """Net rate versus M with optimized against unitary training, both with KLSQ."""
    rows = []
    for M in m_values:
        for training in ("optimized", "unitary"):
            _series(rows, training, _base(trials, seed, M=M, training=training), M, rate_eval)
    return rows


def fig5_training_mse(trials=2000, seed=0, taus=None, max_iter=3000, **_):
    """Total training MSE versus pilot length at M=20.

    Random orthogonal pilots are averaged over 20 draws per length.
    """
    cfg = _base(trials, seed, M=20)
    covs = build_covariances(cfg)
    key = cfg.digest()
    P = cfg.power
    rows = []
    for tau in (taus or range(1, 31)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            opt = optimize_training(covs, tau, P, max_iter=max_iter)
        uni = unitary_training(cfg.M, tau, P)
        rng = user_rng(seed, 7, tau)
        rnd = np.mean([total_training_mse(covs, random_orthogonal_training(cfg.M, tau, P, rng))
                       for _ in range(20)])
        rows += [
            ResultRow(key, "mse_optimized", tau, total_training_mse(covs, opt), units="power"),
            ResultRow(key, "mse_unitary", tau, total_training_mse(covs, uni), units="power"),
            ResultRow(key, "mse_random_orthogonal", tau, float(rnd), units="power"),
        ]
    return rows


def _feedback_symbol_bits(cfg, symbols):
    return bits_for_overhead(symbols, cfg.overhead, cfg.M, cfg.N)


def fig6_sq_vq(trials=2000, seed=0, symbols=None, **_):
    """Total feedback MSE versus feedback symbols for KLSQ and RVQ.

    KLSQ appears without and with a 0.75 bit shaping loss. RVQ appears with
    the MSE-optimal rank at each budget and with each user's rank fixed to
    its effective rank, whose truncation error sets a floor.
    """
    cfg = _base(trials, seed, M=20)
    covs = build_covariances(cfg)
    eff = [max(2, effective_rank(c)) for c in covs]
    key = cfg.digest()
    rows = []
    schemes = {
        "klsq_ideal": (KLSQ, 0.0, False),
        "klsq_practical": (KLSQ, 0.75, False),
        "iso_rvq": (ISO_RVQ, 0.0, False),
        "skew_rvq": (SKEW_RVQ, 0.0, False),
        "iso_rvq_eff_rank": (ISO_RVQ, 0.0, True),
        "skew_rvq_eff_rank": (SKEW_RVQ, 0.0, True),
    }
    for s in (symbols or range(1, 31)):
        bits = _feedback_symbol_bits(cfg, s)
        for name, (kind, sl, fixed) in schemes.items():
            mse = 0.0
            for c, r in zip(covs, eff):
                scheme = FeedbackScheme(kind, bits, r if fixed else None, sl)
                mse += np.trace(apply_feedback(scheme, c, None).error_covariance).real
            rows.append(ResultRow(key, f"mse_{name}", s, float(mse), units="power"))
    return rows


def fig7_rank_tradeoff(trials=2000, seed=0, symbols=(1, 2, 4, 8, 16), **_):
    """Total feedback MSE versus dominant rank for several feedback budgets."""
    cfg = _base(trials, seed, M=20)
    covs = build_covariances(cfg)
    key = cfg.digest()
    rows = []
    for s in symbols:
        bits = _feedback_symbol_bits(cfg, s)
        for kind in (ISO_RVQ, SKEW_RVQ):
            per_user = [_rvq_traces(c.matrix, np.zeros_like(c.matrix), bits, kind == SKEW_RVQ)
                        for c in covs]
            common = min(len(r) for r, _ in per_user)
            total = sum(v[:common] for _, v in per_user)
            ranks = per_user[0][0][:common]
            rows += [ResultRow(key, f"mse_{kind}_symbols{s}", int(r), float(v), units="power")
                     for r, v in zip(ranks, total)]
            best = int(ranks[int(np.argmin(total))])
            rows.append(ResultRow(key, f"best_rank_{kind}", s, best, units="rank"))
    return rows


def fig8_blocklength(trials=2000, seed=0, rate_eval="both", m_values=M_SWEEP,
                     blocks=(100, 200, 500), **_):
    """Net rate versus M for several block lengths, correlated against i.i.d. FDD.

    Each M shares one pipeline across block lengths, so pilots and
    deterministic SINRs are computed once.
    """
    rows = []
    for M in m_values:
        pipes = {}
        for T in blocks:
            pipes["corr"] = _series(rows, f"corr_T{T}", _base(trials, seed, M=M, T=T), M,
                                    rate_eval, pipes.get("corr"))
            iid = _base(trials, seed, M=M, T=T, channel_model="iid", training="unitary")
            pipes["iid"] = _series(rows, f"iid_T{T}", iid, M, rate_eval, pipes.get("iid"))
    return rows


FIGURES = {
    "fig1_cdf": fig1_cdf,
    "fig2_tdd_fdd": fig2_tdd_fdd,
    "fig4_opt_vs_unitary": fig4_opt_vs_unitary,
    "fig5_training_mse": fig5_training_mse,
    "fig6_sq_vq": fig6_sq_vq,
    "fig7_rank_tradeoff": fig7_rank_tradeoff,
    "fig8_blocklength": fig8_blocklength,
}


def figure_rows(figure_id, **kw):
    try:
        recipe = FIGURES[figure_id]
    except KeyError:
        raise ValueError(f"unknown figure {figure_id!r}; choose from {sorted(FIGURES)}") from None
    return recipe(**kw)


def reproduce(figure_id, out_dir=".", **kw):
    """Run a recipe and write ``<out_dir>/<figure_id>.csv``; returns the path."""
    rows = figure_rows(figure_id, **kw)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{figure_id}.csv")
    rows_to_csv(rows, path)
    return path
