"""Small numerical helpers shared by the modules."""

import numpy as np


def hermitize(a):
    """Return the Hermitian part of a square matrix (or a stack of them)."""
    a = np.asarray(a)
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def is_hermitian(a, atol=1e-10):
    a = np.asarray(a)
    return bool(np.max(np.abs(a - np.conj(a.T)), initial=0.0) <= atol)


def min_eigenvalue(a):
    return float(np.linalg.eigvalsh(hermitize(a))[0])


def is_psd(a, atol=1e-10):
    return min_eigenvalue(a) >= -atol


def psd_projection(a):
    """Nearest PSD matrix in Frobenius norm (negative eigenvalues clipped)."""
    w, v = np.linalg.eigh(hermitize(a))
    w = np.clip(w, 0.0, None)
    return hermitize((v * w) @ np.conj(v.T))


def complex_normal(rng, size):
    """Draw CN(0, 1) samples: variance 1/2 on each real component."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def real_trace(a, tol=1e-10):
    """Trace of a matrix expected to be real up to rounding.

    Raises if the imaginary residue is larger than ``tol`` relative to the
    magnitude of the real part.
    """
    t = np.trace(a)
    scale = max(1.0, abs(t.real))
    if abs(t.imag) > tol * scale:
        raise ArithmeticError(f"trace has imaginary residue {t.imag:.3e}")
    return float(t.real)


def trace_of_product(a, b):
    """tr(a @ b) without forming the product."""
    return np.sum(a * b.T)
