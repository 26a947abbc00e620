"""Symmetric PSD helpers shared by the estimators and the population diagnostics.

All pseudo-inverses go through one eigendecomposition path so that closed-form
Q-MMR, FQE and the diagnostics make identical rank decisions.
"""
import numpy as np

RELATIVE_CUTOFF = 1e-10


def _eig_psd(mat):
    mat = np.asarray(mat, dtype=float)
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    top = vals.max(initial=0.0)
    keep = vals > RELATIVE_CUTOFF * top if top > 0 else np.zeros_like(vals, dtype=bool)
    return vals, vecs, keep


def pinv_psd(mat):
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix.

    Eigenvalues below ``1e-10 * lambda_max`` are treated as exact zeros.
    """
    vals, vecs, keep = _eig_psd(mat)
    v = vecs[:, keep]
    return (v / vals[keep]) @ v.T


def inv_sqrt_psd(mat):
    """Pseudo-inverse square root ``Sigma^{-1/2}`` with the same cutoff as :func:`pinv_psd`."""
    vals, vecs, keep = _eig_psd(mat)
    v = vecs[:, keep]
    return (v / np.sqrt(vals[keep])) @ v.T


def range_projector(mat):
    """Orthogonal projector onto the numerical range of a symmetric PSD matrix."""
    _, vecs, keep = _eig_psd(mat)
    v = vecs[:, keep]
    return v @ v.T


def is_singular(mat):
    _, _, keep = _eig_psd(mat)
    return bool(keep.sum() < np.asarray(mat).shape[0])


def mahalanobis(vec, mat):
    """``sqrt(v^T Sigma^+ v)``; the pseudo-inverse norm used for coverage quantities."""
    vec = np.asarray(vec, dtype=float)
    return float(np.sqrt(max(vec @ pinv_psd(mat) @ vec, 0.0)))
