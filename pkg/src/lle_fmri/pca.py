"""PCA reconstruction of a vectorised scan (the linear baseline)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ScanVolume


@dataclass
class PcaModel:
    mean: np.ndarray  # (T,)
    rotation: np.ndarray  # (T, T), columns are right singular vectors
    singular_values: np.ndarray  # (T,), non-increasing

    def scores(self, X, d=None) -> np.ndarray:
        Xc = np.asarray(X, dtype=np.float64) - self.mean
        B = self.rotation if d is None else self.rotation[:, :d]
        return Xc @ B

    def reconstruct(self, Z) -> np.ndarray:
        d = Z.shape[1]
        return Z @ self.rotation[:, :d].T + self.mean


def _fix_signs(B):
    pivot = np.argmax(np.abs(B), axis=0)
    signs = np.sign(B[pivot, np.arange(B.shape[1])])
    signs[signs == 0] = 1.0
    return B * signs


def fit_pca(X) -> PcaModel:
    """Centre the rows of ``X`` (V x T) and find its right singular vectors.

    When ``V > 4T`` the T x T Gram matrix is diagonalised instead of running
    a thin SVD on the tall matrix. Each singular vector is signed so its
    largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a (V, T) matrix, got shape {X.shape}")
    V, T = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    if V > 4 * T:
        evals, B = np.linalg.eigh(Xc.T @ Xc)
        evals, B = evals[::-1], B[:, ::-1]
        sigma = np.sqrt(np.clip(evals, 0.0, None))
    else:
        _, sigma, Bt = np.linalg.svd(Xc, full_matrices=True)
        B = Bt.T
        sigma = np.concatenate([sigma, np.zeros(T - sigma.size)])
    return PcaModel(mean, _fix_signs(B), sigma)


def pca_reconstruct(X, d: int) -> np.ndarray:
    """First ``d`` principal-component score columns of ``X`` (V x d)."""
    X = X.data if isinstance(X, ScanVolume) else np.asarray(X, dtype=np.float64)
    T = X.shape[1]
    if not 1 <= d <= T:
        raise ValueError(f"d must lie in [1, T={T}], got {d}")
    return fit_pca(X).scores(X, d)


def variance_explained(sigma, d: int) -> float:
    """Share of total variance carried by the ``d`` largest singular values."""
    lam = np.sort(np.asarray(sigma, dtype=np.float64) ** 2)[::-1]
    total = lam.sum()
    if total == 0.0:
        return 0.0
    return float(lam[:d].sum() / total)
