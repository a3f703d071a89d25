"""Small dense linear-algebra helpers.

Matrices are plain 2-D ``numpy.ndarray`` objects of float64. Eigenvalues are
computed with a Householder reduction to upper Hessenberg form followed by
Francis double-shift QR sweeps, which is plenty for the <= 10x10 matrices that
show up in the consensus checks.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "as_matrix",
    "eigenvalues",
    "spectral_radius",
    "mat_power_sum",
    "row_sum_norm",
]

_EPS = np.finfo(float).eps


class DimensionError(ValueError):
    """Raised when operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """Raised when an iterative routine fails to converge."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def as_matrix(m, name="matrix"):
    """Coerce ``m`` to a finite 2-D float array."""
    arr = np.array(m, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _hessenberg(a):
    h = a.copy()
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(norm_x, x[0])
        v /= np.linalg.norm(v)
        h[k + 1:, :] -= 2.0 * np.outer(v, v @ h[k + 1:, :])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def _hqr(a, max_iter):
    """Eigenvalues of an upper Hessenberg matrix (destroys ``a``)."""
    n = a.shape[0]
    wr = np.zeros(n)
    wi = np.zeros(n)
    anorm = float(np.sum(np.abs(a)))
    nn = n - 1
    shift_total = 0.0
    total_its = 0
    while nn >= 0:
        its = 0
        while True:
            # deflation: find the lowest negligible subdiagonal entry
            l = nn
            while l >= 1:
                s = abs(a[l - 1, l - 1]) + abs(a[l, l])
                if s == 0.0:
                    s = anorm
                if abs(a[l, l - 1]) <= _EPS * s:
                    a[l, l - 1] = 0.0
                    break
                l -= 1
            x = a[nn, nn]
            if l == nn:
                wr[nn] = x + shift_total
                nn -= 1
                break
            y = a[nn - 1, nn - 1]
            w = a[nn, nn - 1] * a[nn - 1, nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += shift_total
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z != 0.0:
                        wr[nn] = x - w / z
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1] = -z
                    wi[nn] = z
                nn -= 2
                break
            if total_its >= max_iter:
                raise NumericError(
                    "QR iteration did not converge", residual=abs(a[nn, nn - 1])
                )
            if its in (10, 20):
                # exceptional shift to break cycles
                shift_total += x
                for i in range(nn + 1):
                    a[i, i] -= x
                s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                x = y = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            total_its += 1
            m = nn - 2
            while m >= l:
                z = a[m, m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                q = a[m + 1, m + 1] - z - r - s
                r = a[m + 2, m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                if u <= _EPS * v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                a[i, i - 2] = 0.0
                if i != m + 2:
                    a[i, i - 3] = 0.0
            k = m
            while k <= nn - 1:
                if k != m:
                    p = a[k, k - 1]
                    q = a[k + 1, k - 1]
                    r = a[k + 2, k - 1] if k != nn - 1 else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s != 0.0:
                    if k == m:
                        if l != m:
                            a[k, k - 1] = -a[k, k - 1]
                    else:
                        a[k, k - 1] = -s * x
                    p += s
                    x = p / s
                    y = q / s
                    z = r / s
                    q /= p
                    r /= p
                    for j in range(k, nn + 1):
                        p = a[k, j] + q * a[k + 1, j]
                        if k != nn - 1:
                            p += r * a[k + 2, j]
                            a[k + 2, j] -= p * z
                        a[k + 1, j] -= p * y
                        a[k, j] -= p * x
                    mmin = nn if nn < k + 3 else k + 3
                    for i in range(l, mmin + 1):
                        p = x * a[i, k] + y * a[i, k + 1]
                        if k != nn - 1:
                            p += z * a[i, k + 2]
                            a[i, k + 2] -= p * r
                        a[i, k + 1] -= p * q
                        a[i, k] -= p
                k += 1
    return wr + 1j * wi


def eigenvalues(m, max_iter=10_000):
    """All eigenvalues of a real square matrix, as a complex array."""
    a = as_matrix(m)
    n, n2 = a.shape
    if n != n2:
        raise DimensionError(f"eigenvalues need a square matrix, got {a.shape}")
    if n == 0:
        raise DimensionError("empty matrix")
    if n == 1:
        return np.array([complex(a[0, 0])])
    return _hqr(_hessenberg(a), max_iter)


def spectral_radius(m, tol=1e-10, max_iter=10_000):
    """Largest eigenvalue modulus of ``m``.

    ``tol`` is the accuracy the caller needs; it only has to be positive since
    deflation already works at machine precision.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    return float(np.max(np.abs(eigenvalues(m, max_iter=max_iter))))


def row_sum_norm(m):
    """Induced infinity norm (max absolute row sum)."""
    return float(np.max(np.sum(np.abs(as_matrix(m)), axis=1)))


def mat_power_sum(a_k, b, k_gain, n_horizon):
    """Return ``sum_{s=0}^{N} A_K^{N-s} B K`` by Horner accumulation."""
    a_k = as_matrix(a_k, "a_k")
    b = as_matrix(b, "b")
    k_gain = as_matrix(k_gain, "k_gain")
    n = a_k.shape[0]
    if a_k.shape != (n, n):
        raise DimensionError(f"a_k must be square, got {a_k.shape}")
    if b.shape[0] != n or k_gain.shape != (b.shape[1], n):
        raise DimensionError(
            f"non-conformable shapes a_k={a_k.shape}, b={b.shape}, k={k_gain.shape}"
        )
    if n_horizon < 1:
        raise ValueError("n_horizon must be >= 1")
    bk = b @ k_gain
    acc = bk.copy()
    for _ in range(n_horizon):
        acc = a_k @ acc + bk
    return acc
