import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import eigvalsh
from scipy.special import j0

from fddmimo.channel_model import (ChannelCovariance, UserGeometry, covariance_from_dict,
                                   covariance_to_dict, dominant_representation,
                                   effective_rank, iid_ccm, laplacian_ccm, laplacian_diagonal,
                                   one_ring_ccm, sample_channel)
from fddmimo.errors import ContractError

DEG = np.pi / 180


def one_ring_entry(k, theta, spread, D):
    """Lag-k entry by mpmath quadrature, independent of the vectorized code."""
    mpmath.mp.dps = 30
    f = lambda a: mpmath.exp(-2j * mpmath.pi * D * k * mpmath.sin(a))
    val = mpmath.quad(f, [theta - spread, theta + spread]) / (2 * spread)
    return complex(val)


def laplacian_entry(k, theta, spread, D):
    mpmath.mp.dps = 30
    c = mpmath.sqrt(2) / spread
    f = lambda a: mpmath.exp(-c * abs(a - theta) - 2j * mpmath.pi * D * k * mpmath.sin(a))
    val = mpmath.quad(f, [theta - mpmath.pi, theta, theta + mpmath.pi])
    return complex(val / (mpmath.sqrt(2) * spread))


def test_one_ring_entry_matches_quadrature_oracle():
    g = UserGeometry(0.0, 10 * DEG, 0.5)
    R = one_ring_ccm(g, 4).matrix
    # entry (1, 2) is lag -1, the conjugate of lag 1
    assert abs(R[0, 1] - np.conj(one_ring_entry(1, 0.0, 10 * DEG, 0.5))) < 1e-10
    for k in range(4):
        assert abs(R[k, 0] - one_ring_entry(k, 0.0, 10 * DEG, 0.5)) < 1e-10


def test_one_ring_full_circle_is_bessel():
    R = one_ring_ccm(UserGeometry(0.0, np.pi, 0.5), 12).matrix
    ref = j0(2 * np.pi * 0.5 * np.arange(12))
    assert np.allclose(R[:, 0], ref, atol=1e-10)


def test_one_ring_unit_diagonal_and_zero_spacing():
    R = one_ring_ccm(UserGeometry(0.4, 7 * DEG, 0.5), 10).matrix
    assert np.allclose(np.diag(R), 1.0, atol=1e-12)
    R0 = one_ring_ccm(UserGeometry(0.4, 7 * DEG, 0.0), 6).matrix
    assert np.allclose(R0, np.ones((6, 6)), atol=1e-12)


def test_laplacian_matches_quadrature_oracle():
    theta, spread = 30 * DEG, 15 * DEG
    R = laplacian_ccm(UserGeometry(theta, spread, 0.5), 4).matrix
    # entry (1, 3) is lag -2
    assert abs(R[0, 2] - np.conj(laplacian_entry(2, theta, spread, 0.5))) < 1e-10
    assert abs(R[3, 0] - laplacian_entry(3, theta, spread, 0.5)) < 1e-10


def test_laplacian_diagonal_and_zero_spacing():
    spread = 10 * DEG
    R = laplacian_ccm(UserGeometry(0.2, spread, 0.5), 5).matrix
    assert np.allclose(np.diag(R).real, laplacian_diagonal(spread), atol=1e-10)
    assert abs(laplacian_diagonal(spread) - laplacian_entry(0, 0.2, spread, 0.5).real) < 1e-12
    R0 = laplacian_ccm(UserGeometry(0.2, spread, 0.0), 4).matrix
    assert np.allclose(R0, laplacian_diagonal(spread), atol=1e-10)


@given(theta=st.floats(-np.pi / 2, np.pi / 2), spread=st.floats(1 * DEG, 60 * DEG),
       D=st.floats(0.1, 1.0), M=st.integers(1, 24),
       model=st.sampled_from([one_ring_ccm, laplacian_ccm]))
def test_covariance_is_hermitian_psd_toeplitz(theta, spread, D, M, model):
    R = model(UserGeometry(theta, spread, D), M).matrix
    assert np.allclose(R, R.conj().T, atol=1e-14)
    assert np.allclose(R[1:, 1:], R[:-1, :-1], atol=1e-14)
    assert eigvalsh(R)[0] > -1e-9
    assert np.all(np.abs(R) <= np.abs(R[0, 0]) + 1e-9)


def test_covariance_eigendecomposition_sorted_and_consistent():
    cov = one_ring_ccm(UserGeometry(0.1, 10 * DEG, 0.5), 16)
    assert np.all(np.diff(cov.eigenvalues) <= 1e-15)
    U, w = cov.eigenvectors, cov.eigenvalues
    assert np.allclose((U * w) @ U.conj().T, cov.matrix, atol=1e-12)


def test_from_matrix_rejects_bad_input():
    with pytest.raises(ContractError):
        ChannelCovariance.from_matrix(np.ones((2, 3)))
    with pytest.raises(Exception):
        ChannelCovariance.from_matrix(np.full((2, 2), np.nan))
    with pytest.raises(ContractError):
        UserGeometry(0.0, 0.0)


def test_effective_rank_examples():
    assert effective_rank(iid_ccm(8), 0.5) == 8
    assert effective_rank(ChannelCovariance.from_matrix(np.ones((8, 8))), 0.5) == 1
    cov = one_ring_ccm(UserGeometry(0.0, 10 * DEG, 0.5), 50)
    ref = np.sum(eigvalsh(cov.matrix) > 1e-3)
    assert effective_rank(cov, 1e-3) == ref


def test_dominant_representation():
    cov = one_ring_ccm(UserGeometry(0.3, 10 * DEG, 0.5), 20)
    full = dominant_representation(cov, 20)
    assert np.allclose(full.residual_covariance, 0.0)
    ones = dominant_representation(ChannelCovariance.from_matrix(np.ones((5, 5))), 1)
    assert abs(ones.dominant_eigenvalues[0] - 5.0) < 1e-12
    assert np.allclose(np.abs(ones.basis[:, 0]), 1 / np.sqrt(5))
    dom = dominant_representation(cov, 5)
    ref = np.sort(eigvalsh(cov.matrix))[::-1][5:].sum()
    assert abs(np.trace(dom.residual_covariance).real - ref) < 1e-12
    P = dom.projector
    assert np.allclose(P @ P, P, atol=1e-12)
    with pytest.raises(ContractError):
        dominant_representation(cov, 0)


def test_sample_channel_statistics():
    rng = np.random.default_rng(0)
    zero = ChannelCovariance.from_matrix(np.zeros((4, 4)))
    assert np.all(sample_channel(zero, rng, 3) == 0)
    h = sample_channel(iid_ccm(6), rng, 100_000)
    assert h.shape == (100_000, 6)
    assert np.allclose(np.mean(np.abs(h) ** 2, axis=0), 1.0, rtol=0.03)
    cov = one_ring_ccm(UserGeometry(-0.2, 10 * DEG, 0.5), 12)
    h = sample_channel(cov, rng, 100_000)
    emp = h.T @ h.conj() / h.shape[0]
    rel = np.linalg.norm(emp - cov.matrix) / np.linalg.norm(cov.matrix)
    assert rel < 0.05
    assert sample_channel(cov, rng).shape == (12,)


def test_covariance_dict_round_trip():
    cov = laplacian_ccm(UserGeometry(0.5, 12 * DEG, 0.5), 6)
    d = covariance_to_dict(cov)
    assert d["M"] == 6 and len(d["data"]) == 72
    back = covariance_from_dict(d)
    assert np.array_equal(back.matrix, cov.matrix)
    with pytest.raises(ContractError):
        covariance_from_dict({"M": 3, "data": [0.0] * 5})
