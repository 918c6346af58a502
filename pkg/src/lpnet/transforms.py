"""Sparsifying (sNT) and corrective (c-sNT) nonlinear transforms.

Both act columnwise on matrices with one threshold per call; vectors are
treated as single columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def linear_transform(A: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``Q = A U``."""
    if A.shape[1] != U.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, U is {U.shape}")
    return A @ U


def snt(q: np.ndarray, tau: float) -> np.ndarray:
    """Soft threshold ``sign(q) * max(|q| - tau, 0)``, the prox of ``tau*||.||_1``.

    Entries with ``|q| == tau`` map to exactly zero.
    """
    if tau < 0:
        raise ValueError(f"threshold must be nonnegative (got {tau})")
    q = np.asarray(q, dtype=np.float64)
    return np.sign(q) * np.maximum(np.abs(q) - tau, 0.0)


def csnt(q: np.ndarray, nu: np.ndarray, lam1: float) -> np.ndarray:
    """Corrective transform: ``snt(q - nu, lam1)``.

    Minimizes ``0.5*||q - y||^2 + nu^T y + lam1*||y||_1`` per column.
    """
    q = np.asarray(q, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if q.shape != nu.shape:
        raise ValueError(f"dimension mismatch: q is {q.shape}, nu is {nu.shape}")
    return snt(q - nu, lam1)


@dataclass(frozen=True)
class CorrectionParts:
    t: np.ndarray  # goal component (the ge vector)
    p: np.ndarray  # flow component
    nu: np.ndarray


def assemble_correction(ge: np.ndarray, flow: np.ndarray) -> CorrectionParts:
    if np.shape(ge) != np.shape(flow):
        raise ValueError(f"dimension mismatch: ge is {np.shape(ge)}, flow is {np.shape(flow)}")
    t = np.asarray(ge, dtype=np.float64)
    p = np.asarray(flow, dtype=np.float64)
    return CorrectionParts(t=t, p=p, nu=p + t)
