"""Bandit environments: synthetic finite-action, synthetic ellipsoid-action, MNIST.

The environment owns a :class:`HiddenInstance`. Policies only ever see the
public view of :class:`RoundContexts` and the :class:`Feedback` rewards; the
regret oracle (:func:`instant_regret`) is for the harness.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConstraintViolation, InvalidArgumentError
from .numerics import Rng, sample_haar_orthonormal, sample_sphere

# spectrum of every finite-action context covariance must sit in [lo/d, hi/d]
SIGMA_C_LO = 0.1
SIGMA_C_HI = 10.0
NU_TARGET = 0.1
MAX_REDRAWS = 1000
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class HiddenInstance:
    kind: str  # "finite" | "infinite" | "mnist"
    d: int
    k: int
    T: int
    K: int = 0
    B: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    Theta: Optional[np.ndarray] = None
    cov_chol: Optional[np.ndarray] = None  # finite: (T, d, d)
    Q: Optional[np.ndarray] = None  # infinite: (T, d, d)
    lam0: float = 1.0
    noise_scale: float = 1.0
    # mnist: images grouped by digit, pool_start/pool_size indexed by digit
    images: Optional[np.ndarray] = None
    pool_start: Optional[np.ndarray] = None
    pool_size: Optional[np.ndarray] = None
    task_pairs: tuple = ()
    seed: int = 0

    @cached_property
    def Q_inv(self) -> np.ndarray:
        return np.linalg.inv(self.Q)

    @cached_property
    def best_value(self) -> np.ndarray:
        """Per-task optimal mean reward over the ellipsoid."""
        return ellipsoid_argmax_batch(self.Theta.T, self.Q)[1]

    def with_noise(self, scale: float) -> "HiddenInstance":
        """Copy with a different reward-noise scale (0 gives noiseless rewards)."""
        return replace(self, noise_scale=float(scale))

    def __repr__(self):
        return f"HiddenInstance(kind={self.kind!r}, d={self.d}, k={self.k}, T={self.T}, K={self.K})"


@dataclass(frozen=True)
class RoundContexts:
    round: int
    actions: Optional[np.ndarray] = None  # finite/mnist: (T, K, d)
    ellipsoids: Optional[np.ndarray] = None  # infinite: (T, d, d)
    labels: Optional[np.ndarray] = None  # mnist only; never shown to policies

    def public(self) -> "RoundContexts":
        return replace(self, labels=None) if self.labels is not None else self


@dataclass(frozen=True)
class Feedback:
    rewards: np.ndarray  # (T,)


class EllipsoidArgmax(NamedTuple):
    action: np.ndarray
    value: float
    degenerate: bool


def gen_finite(d: int, k: int, T: int, K: int, seed: int, cov_chol=None) -> HiddenInstance:
    """Finite-action instance with Haar ``B``, unit-sphere ``w_t`` and Gaussian contexts.

    ``cov_chol`` may be one d x d factor shared by all tasks or a (T, d, d)
    stack; the default is ``I / sqrt(d)``, i.e. covariance ``I / d``.
    """
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
    if K < 2 or T < 1:
        raise InvalidArgumentError(f"need K >= 2 and T >= 1, got K={K}, T={T}")
    rng = Rng(seed)
    B = sample_haar_orthonormal(d, k, rng.derive_child("B"))
    W = sample_sphere(k, 1.0, rng.derive_child("W"), size=T).T
    if cov_chol is None:
        L = np.broadcast_to(np.eye(d) / np.sqrt(d), (T, d, d)).copy()
    else:
        L = np.broadcast_to(np.asarray(cov_chol, dtype=float), (T, d, d)).copy()
        if np.any(np.triu(L, 1) != 0):
            raise InvalidArgumentError("cov_chol must be lower-triangular")
        eig = np.linalg.eigvalsh(L @ np.swapaxes(L, 1, 2))
        if eig.min() < SIGMA_C_LO / d or eig.max() > SIGMA_C_HI / d:
            raise InvalidArgumentError(
                f"context covariance spectrum [{eig.min():.3g}, {eig.max():.3g}] "
                f"outside [{SIGMA_C_LO}/d, {SIGMA_C_HI}/d]"
            )
    return HiddenInstance(
        kind="finite", d=d, k=k, T=T, K=K, B=B, W=W, Theta=B @ W, cov_chol=L, seed=seed
    )


def gen_infinite(
    d: int, k: int, T: int, lam0: float = 1.0, seed: int = 0, nu: float = NU_TARGET
) -> HiddenInstance:
    """Ellipsoid-action instance with ``Q_t = lam0 * I``.

    ``W`` is redrawn until ``lambda_min(W W^T / T) >= nu / k``.
    """
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
    if T < k:
        raise InvalidArgumentError(f"T={T} < k={k}: task diversity cannot hold")
    if not lam0 > 0:
        raise InvalidArgumentError(f"lam0 must be positive, got {lam0}")
    rng = Rng(seed)
    B = sample_haar_orthonormal(d, k, rng.derive_child("B"))
    w_rng = rng.derive_child("W")
    for _ in range(MAX_REDRAWS):
        W = sample_sphere(k, 1.0, w_rng, size=T).T
        if np.linalg.eigvalsh(W @ W.T / T).min() >= nu / k:
            break
    else:
        raise InvalidArgumentError(
            f"could not draw W with lambda_min(WW^T/T) >= {nu}/{k} in {MAX_REDRAWS} attempts"
        )
    Q = np.broadcast_to(lam0 * np.eye(d), (T, d, d)).copy()
    return HiddenInstance(
        kind="infinite", d=d, k=k, T=T, B=B, W=W, Theta=B @ W, Q=Q, lam0=float(lam0), seed=seed
    )


def build_mnist_tasks(images, labels, digits, seed: int = 0, pca_dim=None) -> HiddenInstance:
    """One task per unordered digit pair ``(i, j)``, ``i < j``, in lexicographic order.

    Pixels are scaled to [0, 1]. With ``pca_dim`` the images are projected on
    their top principal directions (computed on the selected digits only).
    """
    digits = sorted(set(int(x) for x in digits))
    if len(digits) < 2:
        raise InvalidArgumentError("need at least two digits")
    images = np.asarray(images)
    labels = np.asarray(labels).astype(int).ravel()
    flat = images.reshape(images.shape[0], -1)
    if flat.shape[0] != labels.shape[0]:
        raise InvalidArgumentError(f"{flat.shape[0]} images but {labels.shape[0]} labels")

    pool_start = np.zeros(10, dtype=np.int64)
    pool_size = np.zeros(10, dtype=np.int64)
    chunks = []
    offset = 0
    for digit in digits:
        idx = np.flatnonzero(labels == digit)
        if idx.size == 0:
            raise InvalidArgumentError(f"no images for digit {digit}")
        pool_start[digit], pool_size[digit] = offset, idx.size
        offset += idx.size
        chunks.append(flat[idx])
    feats = np.concatenate(chunks).astype(np.float32)
    if images.dtype == np.uint8 or feats.max() > 1.0:
        feats /= 255.0
    if pca_dim is not None:
        if not 1 <= pca_dim <= feats.shape[1]:
            raise InvalidArgumentError(f"pca_dim must be in [1, {feats.shape[1]}]")
        centred = feats - feats.mean(axis=0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        feats = (centred @ vt[:pca_dim].T).astype(np.float32)

    pairs = tuple(itertools.combinations(digits, 2))
    return HiddenInstance(
        kind="mnist",
        d=feats.shape[1],
        k=0,
        T=len(pairs),
        K=2,
        images=feats,
        pool_start=pool_start,
        pool_size=pool_size,
        task_pairs=pairs,
        seed=seed,
    )


def draw_round(inst: HiddenInstance, n: int, rng: Rng) -> RoundContexts:
    """Offer round ``n``'s action sets. Consumes ``rng`` only for finite/mnist."""
    if n < 1:
        raise InvalidArgumentError(f"round index starts at 1, got {n}")
    if inst.kind == "finite":
        z = rng.standard_normal((inst.T, inst.K, inst.d))
        return RoundContexts(round=n, actions=np.einsum("tij,tkj->tki", inst.cov_chol, z))
    if inst.kind == "infinite":
        return RoundContexts(round=n, ellipsoids=inst.Q)
    if inst.kind == "mnist":
        pairs = np.asarray(inst.task_pairs)
        lo, hi = pairs[:, 0], pairs[:, 1]
        i_lo = inst.pool_start[lo] + rng.integers(0, inst.pool_size[lo])
        i_hi = inst.pool_start[hi] + rng.integers(0, inst.pool_size[hi])
        swap = rng.random(inst.T) < 0.5
        first = np.where(swap, i_hi, i_lo)
        second = np.where(swap, i_lo, i_hi)
        actions = np.stack([inst.images[first], inst.images[second]], axis=1)
        labels = np.stack([np.where(swap, hi, lo), np.where(swap, lo, hi)], axis=1)
        return RoundContexts(round=n, actions=actions, labels=labels)
    raise InvalidArgumentError(f"unknown instance kind {inst.kind!r}")


def _chosen_indices(contexts: RoundContexts, actions) -> np.ndarray:
    actions = np.asarray(actions)
    T, K = contexts.actions.shape[:2]
    if actions.ndim == 1:
        if actions.shape[0] != T:
            raise ConstraintViolation(f"expected {T} action indices, got {actions.shape[0]}")
        idx = actions.astype(int)
        bad = np.flatnonzero((idx < 0) | (idx >= K) | (idx != actions))
        if bad.size:
            raise ConstraintViolation(f"action index out of range for task {bad[0]}", task=int(bad[0]))
        return idx
    # vectors: must coincide with one of the offered contexts
    match = np.all(contexts.actions == actions[:, None, :], axis=2)
    bad = np.flatnonzero(~match.any(axis=1))
    if bad.size:
        raise ConstraintViolation(f"chosen vector is not an offered context for task {bad[0]}", task=int(bad[0]))
    return match.argmax(axis=1)


def _check_ellipsoid(inst: HiddenInstance, actions) -> np.ndarray:
    a = np.asarray(actions, dtype=float)
    if a.shape != (inst.T, inst.d):
        raise ConstraintViolation(f"expected actions of shape {(inst.T, inst.d)}, got {a.shape}")
    slack = np.einsum("td,tde,te->t", a, inst.Q_inv, a)
    bad = np.flatnonzero(~(slack <= 1 + FEASIBILITY_TOL))
    if bad.size:
        t = int(bad[0])
        raise ConstraintViolation(f"action outside ellipsoid for task {t} (a'Q^-1a = {slack[t]:.6g})", task=t)
    return a


def pull(inst: HiddenInstance, contexts: RoundContexts, actions, rng: Rng) -> Feedback:
    """Rewards for the chosen actions.

    ``actions`` are per-task indices (or the chosen vectors themselves) for
    finite/mnist instances and ``(T, d)`` vectors for ellipsoid instances.
    """
    if inst.kind == "mnist":
        idx = _chosen_indices(contexts, actions)
        chosen = contexts.labels[np.arange(inst.T), idx]
        best = np.asarray(inst.task_pairs)[:, 1]
        return Feedback(rewards=(chosen == best).astype(float))
    if inst.kind == "finite":
        idx = _chosen_indices(contexts, actions)
        a = contexts.actions[np.arange(inst.T), idx]
    else:
        a = _check_ellipsoid(inst, actions)
    mean = np.einsum("td,dt->t", a, inst.Theta)
    noise = rng.standard_normal(inst.T)
    return Feedback(rewards=mean + inst.noise_scale * noise)


def ellipsoid_argmax(theta, Q) -> EllipsoidArgmax:
    """Maximise ``<a, theta>`` over ``{a : a^T Q^-1 a <= 1}`` in closed form.

    The maximiser is ``Q theta / sqrt(theta^T Q theta)`` with value
    ``sqrt(theta^T Q theta)``. A zero ``theta`` returns the origin, value 0,
    flagged as degenerate.
    """
    theta = np.asarray(theta, dtype=float)
    Q = np.asarray(Q, dtype=float)
    qt = Q @ theta
    quad = float(theta @ qt)
    if not np.any(theta) or quad <= 0:
        return EllipsoidArgmax(np.zeros_like(theta), 0.0, True)
    value = np.sqrt(quad)
    return EllipsoidArgmax(qt / value, float(value), False)


def ellipsoid_argmax_batch(thetas, Qs):
    """Row-wise :func:`ellipsoid_argmax` for ``(T, d)`` thetas and ``(T, d, d)`` Qs."""
    thetas = np.asarray(thetas, dtype=float)
    qt = np.einsum("tij,tj->ti", Qs, thetas)
    quad = np.einsum("ti,ti->t", thetas, qt)
    ok = quad > 0
    value = np.sqrt(np.where(ok, quad, 0.0))
    action = np.where(ok[:, None], qt / np.where(ok, value, 1.0)[:, None], 0.0)
    return action, value


def instant_regret(inst: HiddenInstance, contexts: RoundContexts, actions) -> np.ndarray:
    """Per-task gap between the best action's mean reward and the chosen one's."""
    if inst.kind == "mnist":
        idx = _chosen_indices(contexts, actions)
        chosen = contexts.labels[np.arange(inst.T), idx]
        return (chosen != np.asarray(inst.task_pairs)[:, 1]).astype(float)
    if inst.kind == "finite":
        idx = _chosen_indices(contexts, actions)
        vals = np.einsum("tkd,dt->tk", contexts.actions, inst.Theta)
        return vals.max(axis=1) - vals[np.arange(inst.T), idx]
    a = _check_ellipsoid(inst, actions)
    got = np.einsum("td,dt->t", a, inst.Theta)
    return np.maximum(inst.best_value - got, 0.0)
