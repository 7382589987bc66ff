"""Pooled rank-k least squares over a shared feature extractor.

Given per-task designs ``X_t`` and rewards ``r_t`` the learner solves

    min_{B, W}  sum_t || X_t B w_t - r_t ||^2

with ``B`` of shape d x k and ``W = [w_1 .. w_T]`` of shape k x T. The
factorisation is only identified up to an invertible k x k change of basis;
we fix the gauge by keeping ``B`` column-orthonormal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalFailure, UnsupportedError
from .numerics import Rng, least_squares, sample_haar_orthonormal

DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-9
DEFAULT_RESTARTS = 4
UNDERDETERMINED_RIDGE = 1e-8
# B-step solver: SVD of the Kronecker design while it is small, normal
# equations on per-task Gram matrices up to NORMAL_BSTEP_MAX unknowns,
# warm-started conjugate gradients beyond that
DENSE_BSTEP_LIMIT = 1_000_000
DENSE_BSTEP_MAX = 64
NORMAL_BSTEP_MAX = 2048
# inner iterations per warm-started CG B-step
CG_ITERS = 30
# a loss this small relative to sum(r^2) counts as an exact fit
INTERPOLATION_TOL = 1e-14


@dataclass
class PooledBatch:
    """Per-task designs and rewards, zero-padded to a common row count.

    Padding rows are all-zero in both ``designs`` and ``rewards`` and so do
    not change the objective.
    """

    designs: np.ndarray  # (T, n_max, d)
    rewards: np.ndarray  # (T, n_max)
    counts: np.ndarray  # (T,)

    def __post_init__(self):
        self.designs = np.asarray(self.designs, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.counts = np.asarray(self.counts, dtype=int)
        if self.designs.ndim != 3:
            raise InvalidArgumentError(f"designs must be (T, n, d), got {self.designs.shape}")
        if self.rewards.shape != self.designs.shape[:2]:
            raise InvalidArgumentError(
                f"rewards shape {self.rewards.shape} does not match designs {self.designs.shape}"
            )
        if not (np.all(np.isfinite(self.designs)) and np.all(np.isfinite(self.rewards))):
            raise InvalidArgumentError("batch contains non-finite entries")

    @classmethod
    def from_tasks(cls, designs, rewards):
        """Build from ragged per-task lists of ``(n_t, d)`` arrays and ``(n_t,)`` vectors."""
        if len(designs) != len(rewards) or len(designs) == 0:
            raise InvalidArgumentError("need the same, nonzero number of designs and reward vectors")
        dims = {np.asarray(x).reshape(len(np.asarray(r)), -1).shape[1] for x, r in zip(designs, rewards)}
        if len(dims) != 1:
            raise InvalidArgumentError(f"tasks disagree on ambient dimension: {sorted(dims)}")
        d = dims.pop()
        counts = np.array([len(np.asarray(r)) for r in rewards], dtype=int)
        n_max = max(int(counts.max()), 1)
        X = np.zeros((len(designs), n_max, d))
        y = np.zeros((len(designs), n_max))
        for t, (x, r) in enumerate(zip(designs, rewards)):
            n = counts[t]
            X[t, :n] = np.asarray(x, dtype=float).reshape(n, d)
            y[t, :n] = r
        return cls(X, y, counts)

    @classmethod
    def stacked(cls, designs, rewards):
        designs = np.asarray(designs, dtype=float)
        return cls(designs, rewards, np.full(designs.shape[0], designs.shape[1]))

    @property
    def tasks(self) -> int:
        return self.designs.shape[0]

    @property
    def dim(self) -> int:
        return self.designs.shape[2]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class FactorPair:
    B_hat: np.ndarray  # (d, k), orthonormal columns
    W_hat: np.ndarray  # (k, T)


@dataclass
class FitReport:
    loss: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


def objective(batch: PooledBatch, B, W) -> float:
    """Sum of squared residuals of ``Theta = B W`` on the batch."""
    theta = np.asarray(B) @ np.asarray(W)
    resid = np.einsum("tnd,dt->tn", batch.designs, theta) - batch.rewards
    return float(np.sum(resid**2))


def coefficients(fp: FactorPair) -> np.ndarray:
    """Per-task coefficient vectors as the columns of ``B_hat @ W_hat``."""
    return fp.B_hat @ fp.W_hat


def _reduce(batch: PooledBatch):
    """Shrink the data without changing the loss as a function of ``B``.

    With fewer observed rows than dimensions the loss only sees ``B``
    through the row space ``U`` of the pooled designs, so the fit runs in
    those coordinates. Tasks with more rows than (reduced) dimensions are
    replaced by their QR factor ``R_t`` and ``z_t = Q_t^T r_t``; ``const``
    carries the residual part of ``||r||^2`` that no ``B`` can explain.
    """
    X, r = batch.designs, batch.rewards
    T, n, d = X.shape
    U = None
    rows = X.reshape(-1, d)[(np.arange(n) < batch.counts[:, None]).ravel()]
    if 0 < rows.shape[0] < d:
        U = np.linalg.qr(rows.T)[0]
        X = X @ U
    if n > X.shape[2]:
        q, R = np.linalg.qr(X)
        z = np.einsum("tnd,tn->td", q, r)
        const = np.maximum(np.sum(r**2, axis=1) - np.sum(z**2, axis=1), 0.0)
        return U, R, z, float(const.sum())
    return U, X, r, 0.0


def _loss(R, z, const, B, W):
    # W here is (T, k)
    resid = np.einsum("tmd,td->tm", R, W @ B.T) - z
    return float(np.sum(resid**2)) + const


def _b_step_dense(R, z, W, ridge):
    T, m, d = R.shape
    k = W.shape[1]
    design = np.einsum("tri,tj->trij", R, W).reshape(T * m, d * k)
    return least_squares(design, z.reshape(-1), ridge).reshape(d, k)


def _b_step_normal(gram, rz, W, ridge):
    # H[(a,i),(b,j)] = sum_t W[t,i] W[t,j] G_t[a,b]
    T, d, _ = gram.shape
    k = W.shape[1]
    ww = (W[:, :, None] * W[:, None, :]).reshape(T, k * k)
    H = (ww.T @ gram.reshape(T, d * d)).reshape(k, k, d, d).transpose(2, 0, 3, 1).reshape(d * k, d * k)
    rhs = (rz.T @ W).reshape(-1)
    H[np.diag_indices_from(H)] += ridge
    try:
        B = np.linalg.solve(H, rhs)
        if np.all(np.isfinite(B)):
            return B.reshape(d, k)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(H)
    keep = vals > np.finfo(float).eps * d * k * max(vals[-1], 0.0)
    inv = np.where(keep, 1.0 / np.where(keep, vals, 1.0), 0.0)
    return (vecs @ (inv * (vecs.T @ rhs))).reshape(d, k)


def _b_step_cg(R, z, W, B0, ridge, max_cg=None):
    # conjugate gradients on the normal equations, started at the current B,
    # so the objective can only go down
    d, k = B0.shape

    Rt = np.swapaxes(R, 1, 2)

    def apply_h(V):
        s = R @ (W @ V.T)[:, :, None]
        return (Rt @ s)[:, :, 0].T @ W + ridge * V

    rhs = (Rt @ z[:, :, None])[:, :, 0].T @ W
    B = B0.copy()
    res = rhs - apply_h(B)
    p = res.copy()
    rs = float(np.sum(res * res))
    stop = 1e-24 * max(float(np.sum(rhs * rhs)), 1e-300)
    for _ in range(max_cg or min(d * k, CG_ITERS)):
        if rs <= stop:
            break
        hp = apply_h(p)
        denom = float(np.sum(p * hp))
        if denom <= 0:
            break
        alpha = rs / denom
        B += alpha * p
        res -= alpha * hp
        rs_new = float(np.sum(res * res))
        p = res + (rs_new / rs) * p
        rs = rs_new
    return B


def _b_solver(R, z, ridge):
    T, m, d = R.shape

    def pick(k):
        if d * k <= DENSE_BSTEP_MAX and T * m * d * k <= DENSE_BSTEP_LIMIT:
            return lambda W, B: _b_step_dense(R, z, W, ridge)
        if d * k <= NORMAL_BSTEP_MAX:
            gram = np.swapaxes(R, 1, 2) @ R
            rz = np.einsum("tmd,tm->td", R, z)
            return lambda W, B: _b_step_normal(gram, rz, W, ridge)
        return lambda W, B: _b_step_cg(R, z, W, B, ridge)

    return pick


def _als_run(R, z, const, B, ridge, max_iters, tol, scale, b_step):
    W = least_squares(R @ B, z, ridge)
    prev = _loss(R, z, const, B, W)
    history = [prev]
    best = (prev, B, W)
    converged = prev <= INTERPOLATION_TOL * scale
    it = 0
    for it in range(1, max_iters + 1):
        if converged:
            it -= 1
            break
        B_new = b_step(W, B)
        # re-orthonormalising leaves span(B) unchanged, and the W-step that
        # follows absorbs the change of basis
        B = np.linalg.qr(B_new)[0]
        W = least_squares(R @ B, z, ridge)
        cur = _loss(R, z, const, B, W)
        if not math.isfinite(cur):
            raise NumericalFailure(f"non-finite loss at ALS iteration {it}")
        history.append(cur)
        if cur < best[0]:
            best = (cur, B, W)
        if prev - cur <= tol * prev or cur <= INTERPOLATION_TOL * scale:
            converged = True
            break
        prev = cur
    return best, it, converged, history


def fit_factored_erm(
    batch: PooledBatch,
    k: int,
    rng: Rng,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    restarts: int = DEFAULT_RESTARTS,
):
    """Alternating least squares for the pooled rank-``k`` fit.

    Each restart starts from a Haar-random orthonormal ``B`` drawn from its
    own child stream of ``rng``. Returns the best ``(FactorPair, FitReport)``
    over all restarts; the reported loss is re-evaluated on the raw batch.
    """
    d, T = batch.dim, batch.tasks
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
    if batch.total < 1:
        raise InvalidArgumentError("empty batch")
    if restarts < 1:
        raise InvalidArgumentError("restarts must be >= 1")
    ridge = UNDERDETERMINED_RIDGE if batch.total < d * k + k * T else 0.0
    U, R, z, const = _reduce(batch)
    dim = R.shape[2]
    # more directions than observed rows: pad the reduced basis back to rank k
    kr = min(k, dim)
    b_step = _b_solver(R, z, ridge)(kr)
    scale = float(np.sum(batch.rewards**2))

    best = None
    for i in range(restarts):
        B0 = sample_haar_orthonormal(d, k, rng.derive_child(f"restart:{i}"))
        if U is not None:
            B0 = np.linalg.qr(U.T @ B0[:, :kr])[0]
        (loss, B, W), iters, converged, history = _als_run(
            R, z, const, B0, ridge, max_iters, tol, scale, b_step
        )
        if best is None or loss < best[0]:
            best = (loss, B, W, iters, converged, history)
    _, B, W, iters, converged, history = best
    if U is not None:
        B = U @ B
        if kr < k:
            B, W = _pad_rank(B, W, k, rng.derive_child("pad"))
    fp = FactorPair(B_hat=B, W_hat=W.T.copy())
    loss = objective(batch, fp.B_hat, fp.W_hat)
    if not math.isfinite(loss):
        raise NumericalFailure("non-finite final loss")
    return fp, FitReport(loss=loss, iterations=iters, converged=converged, history=history)


def _pad_rank(B, W, k, rng):
    # extra orthonormal columns with zero weight leave every prediction unchanged
    d = B.shape[0]
    extra = sample_haar_orthonormal(d, k - B.shape[1], rng)
    extra -= B @ (B.T @ extra)
    extra = np.linalg.qr(extra)[0]
    return np.hstack([B, extra]), np.hstack([W, np.zeros((W.shape[0], k - B.shape[1]))])


def _grid_directions(d: int, grid: int) -> np.ndarray:
    # one representative per line through the origin; sign is absorbed by w
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        phi = np.pi * np.arange(grid) / grid
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    n = int(math.ceil(math.sqrt(grid)))
    polar = np.pi * np.arange(n) / (n - 1)
    azim = np.pi * np.arange(n) / n
    th, ph = np.meshgrid(polar, azim, indexing="ij")
    dirs = np.stack(
        [np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1
    ).reshape(-1, 3)
    return dirs


def brute_force_factored_erm(batch: PooledBatch, k: int, grid: int):
    """Exhaustive rank-1 search over a grid of unit directions (d <= 3).

    For each direction b the per-task coefficient has the closed form
    ``w_t = <X_t b, r_t> / ||X_t b||^2``. Used as a test oracle.
    """
    d = batch.dim
    if d > 3 or k != 1:
        raise UnsupportedError(f"brute force supports d <= 3 and k = 1 only (d={d}, k={k})")
    if grid < 100:
        raise InvalidArgumentError(f"grid must be >= 100, got {grid}")
    X, r = batch.designs, batch.rewards
    gram = np.einsum("tni,tnj->tij", X, X)
    g = np.einsum("tni,tn->ti", X, r)
    dirs = _grid_directions(d, grid)
    den = np.einsum("gi,tij,gj->gt", dirs, gram, dirs)
    num = dirs @ g.T
    safe = den > 1e-300
    gain = np.where(safe, num**2 / np.where(safe, den, 1.0), 0.0)
    losses = float(np.sum(r**2)) - gain.sum(axis=1)
    best = int(np.argmin(losses))
    b = dirs[best]
    w = np.where(safe[best], num[best] / np.where(safe[best], den[best], 1.0), 0.0)
    fp = FactorPair(B_hat=b[:, None].copy(), W_hat=w[None, :])
    return fp, objective(batch, fp.B_hat, fp.W_hat)
