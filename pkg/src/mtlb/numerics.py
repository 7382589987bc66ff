"""Seeded sampling and dense linear algebra used by every other module.

All randomness flows through :class:`Rng`. Child streams are keyed by string
labels (``"env"``, ``"policy"``, ``"task:3"``) so that a sub-computation's
stream does not depend on how much randomness its siblings consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import InvalidArgumentError

SYMMETRY_TOL = 1e-8


class Rng:
    """A seeded PCG64 stream with label-keyed child derivation.

    Attribute access falls through to the wrapped :class:`numpy.random.Generator`,
    so ``rng.standard_normal(3)`` works as expected.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def derive_child(self, label: str) -> "Rng":
        # child seed = first 8 bytes of blake2b("<seed>/<label>"), big-endian
        digest = hashlib.blake2b(f"{self.seed}/{label}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(digest, "big"))

    def __getattr__(self, name):
        return getattr(self.generator, name)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")


def sample_sphere(dim: int, radius: float, rng: Rng, size=None) -> np.ndarray:
    """Uniform draw(s) from the sphere of ``radius`` in ``R^dim``.

    With ``size=None`` a single vector of shape ``(dim,)`` is returned,
    otherwise an array of shape ``(*size, dim)``.
    """
    if dim < 1:
        raise InvalidArgumentError(f"dim must be >= 1, got {dim}")
    if not radius > 0:
        raise InvalidArgumentError(f"radius must be > 0, got {radius}")
    shape = (dim,) if size is None else (*np.atleast_1d(size), dim)
    z = rng.standard_normal(shape)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    # a Gaussian draw of exactly zero has probability zero; guard anyway
    while np.any(norms == 0):
        bad = (norms == 0)[..., 0]
        z[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return radius * (z / norms)


def sample_gaussian(mean, cov_chol, rng: Rng, size=None) -> np.ndarray:
    """Return ``mean + cov_chol @ z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=float)
    cov_chol = np.asarray(cov_chol, dtype=float)
    d = mean.shape[0]
    if mean.ndim != 1 or cov_chol.shape != (d, d):
        raise InvalidArgumentError(
            f"dimension mismatch: mean {mean.shape}, cov_chol {cov_chol.shape}"
        )
    if np.any(np.triu(cov_chol, 1) != 0):
        raise InvalidArgumentError("cov_chol must be lower-triangular")
    shape = (d,) if size is None else (*np.atleast_1d(size), d)
    z = rng.standard_normal(shape)
    return mean + z @ cov_chol.T


def sample_haar_orthonormal(d: int, k: int, rng: Rng) -> np.ndarray:
    """A d x k matrix with orthonormal columns, Haar distributed.

    QR of a Gaussian matrix, with the signs of R's diagonal folded into Q so
    the result is exactly Haar rather than biased by the QR sign convention.
    """
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
    g = rng.standard_normal((d, k))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _svd_solve(X, y, ridge):
    # X: (..., n, p), y: (..., n, m)
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    uty = np.swapaxes(u, -1, -2) @ y
    if ridge > 0:
        factor = s / (s**2 + ridge)
    else:
        n, p = X.shape[-2:]
        smax = s[..., :1] if s.shape[-1] else s
        cutoff = np.finfo(float).eps * max(n, p) * smax
        with np.errstate(divide="ignore"):
            factor = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return np.swapaxes(vt, -1, -2) @ (factor[..., None] * uty)


def least_squares(X, y, ridge: float = 0.0) -> np.ndarray:
    """Solve ``min_w ||X w - y||^2 + ridge ||w||^2`` through an SVD.

    With ``ridge == 0`` and a rank-deficient design the minimum-norm solution
    is returned. ``y`` may be a vector or an ``(n, m)`` matrix of right-hand
    sides. Leading batch dimensions on both ``X`` and ``y`` are supported, so
    ``X`` of shape ``(T, n, p)`` with ``y`` of shape ``(T, n)`` solves ``T``
    independent problems.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if ridge < 0:
        raise InvalidArgumentError(f"ridge must be nonnegative, got {ridge}")
    if X.ndim < 2 or X.shape[-2] < 1 or X.shape[-1] < 1:
        raise InvalidArgumentError(f"design must be n x p with n, p >= 1, got {X.shape}")
    _check_finite("X", X)
    _check_finite("y", y)
    vector_rhs = y.ndim == X.ndim - 1
    if vector_rhs:
        y = y[..., None]
    if y.shape[-2] != X.shape[-2]:
        raise InvalidArgumentError(f"row mismatch: X {X.shape}, y {y.shape}")
    w = _svd_solve(X, y, ridge)
    return w[..., 0] if vector_rhs else w


def top_k_eig(sym, k: int):
    """Top-``k`` eigenpairs of a symmetric matrix, eigenvalues descending."""
    sym = np.asarray(sym, dtype=float)
    if sym.ndim != 2 or sym.shape[0] != sym.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got {sym.shape}")
    d = sym.shape[0]
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
    _check_finite("sym", sym)
    scale = max(1.0, float(np.abs(sym).max()))
    if np.abs(sym - sym.T).max() > SYMMETRY_TOL * scale:
        raise InvalidArgumentError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh((sym + sym.T) / 2)
    order = np.argsort(vals)[::-1][:k]
    return vecs[:, order], vals[order]


def subspace_distance(B1, B2) -> float:
    """Sine of the largest principal angle between two column spans.

    Computed as the spectral norm of ``(I - B1 B1^T) B2``; both inputs must
    have orthonormal columns.
    """
    B1 = np.asarray(B1, dtype=float)
    B2 = np.asarray(B2, dtype=float)
    if B1.ndim == 1:
        B1 = B1[:, None]
    if B2.ndim == 1:
        B2 = B2[:, None]
    if B1.shape != B2.shape:
        raise InvalidArgumentError(f"shape mismatch: {B1.shape} vs {B2.shape}")
    resid = B2 - B1 @ (B1.T @ B2)
    return float(np.clip(np.linalg.norm(resid, 2), 0.0, 1.0))


def is_orthonormal(B, tol: float = 1e-10) -> bool:
    B = np.asarray(B, dtype=float)
    return bool(np.abs(B.T @ B - np.eye(B.shape[1])).max() <= tol)
