"""Independent brute-force oracles used by the tests.

These deliberately avoid the library's own code paths: the Jacobi rotation
eigensolver checks the power-iteration implementation, and the enumeration
helpers check the probability model.
"""

import numpy as np


def jacobi_eigh(a: np.ndarray, sweeps: int = 100, tol: float = 1e-14):
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors in the matching columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] ** 2
                if abs(a[p, q]) < tol:
                    continue
                # rotation angle that zeroes a[p, q]
                theta = 0.5 * (a[q, q] - a[p, p]) / a[p, q]
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
        if off < tol:
            break
    values = np.diag(a).copy()
    order = np.argsort(-values)
    return values[order], v[:, order]


def entropy_nats(p: np.ndarray) -> float:
    """Plain-sum entropy over positive entries (no epsilon tricks)."""
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum())


def kl_vs_uniform(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    mask = p > 0
    return float((p[mask] * np.log(p[mask] * n)).sum())
