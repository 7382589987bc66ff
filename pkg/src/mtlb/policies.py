"""Sequential decision policies.

Every policy exposes ``choose(contexts) -> actions`` and
``observe(contexts, actions, feedback)``, and receives only the public view
of the round contexts. Finite-action policies return per-task action
indices; ellipsoid-action policies return a ``(T, d)`` array of vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import Feedback, RoundContexts, ellipsoid_argmax_batch
from .errors import InvalidArgumentError
from .lowrank import (
    DEFAULT_MAX_ITERS,
    DEFAULT_RESTARTS,
    DEFAULT_TOL,
    PooledBatch,
    coefficients,
    fit_factored_erm,
)
from .numerics import Rng, least_squares, sample_sphere, top_k_eig


@dataclass(frozen=True)
class EpochSchedule:
    N: int
    M: int
    bounds: tuple


def _floor_root_power(N: int, m: int) -> int:
    # exact floor(N ** (1 - 2**-m)) in integer arithmetic
    q = 2**m
    target = N ** (q - 1)
    g = int(round(N ** (1 - 1 / q)))
    while g > 0 and g**q > target:
        g -= 1
    while (g + 1) ** q <= target:
        g += 1
    return g


def epoch_schedule(N: int) -> EpochSchedule:
    """Refit points ``0 = G_0 < G_1 < ... < G_M = N`` with ``G_m = floor(N^(1 - 2^-m))``."""
    if N < 4:
        raise InvalidArgumentError(f"horizon must be >= 4, got {N}")
    M = math.ceil(math.log2(math.log2(N)))
    bounds = [0] + [_floor_root_power(N, m) for m in range(1, M)] + [N]
    deduped = [bounds[0]]
    for g in bounds[1:]:
        if g > deduped[-1]:
            deduped.append(g)
    return EpochSchedule(N=N, M=len(deduped) - 1, bounds=tuple(deduped))


class Policy:
    name = "policy"

    def choose(self, contexts: RoundContexts):
        raise NotImplementedError

    def observe(self, contexts: RoundContexts, actions, feedback: Feedback):
        raise NotImplementedError

    def _advance(self, contexts):
        if contexts.round != self.round + 1:
            raise InvalidArgumentError(
                f"{self.name}: expected round {self.round + 1}, got {contexts.round}"
            )
        self.round = contexts.round


class _EpochGreedy(Policy):
    """Greedy on the current estimate, refitting at the end of each epoch
    on that epoch's data only."""

    def __init__(self, T: int, d: int, N: int):
        self.T, self.d, self.N = T, d, N
        self.schedule = epoch_schedule(N)
        self.theta_hat = np.zeros((d, T))
        self.epoch = 1
        self.round = 0
        self.refit_rounds = []
        self._alloc_buffer(None)

    def _alloc_buffer(self, dtype):
        start, end = self.schedule.bounds[self.epoch - 1], self.schedule.bounds[self.epoch]
        self._start = start
        self._designs = None if dtype is None else np.empty((self.T, end - start, self.d), dtype=dtype)
        self._rewards = np.empty((self.T, end - start))

    @property
    def buffer_size(self) -> int:
        return self.T * (self.round - self._start)

    def choose(self, contexts: RoundContexts) -> np.ndarray:
        scores = np.einsum("tkd,dt->tk", contexts.actions, self.theta_hat)
        # argmax returns the first maximiser, so ties go to the lowest index
        return scores.argmax(axis=1)

    def observe(self, contexts: RoundContexts, actions, feedback: Feedback):
        self._advance(contexts)
        if self._designs is None:
            self._alloc_buffer(np.result_type(contexts.actions.dtype, np.float32))
        pos = self.round - self._start - 1
        self._designs[:, pos] = contexts.actions[np.arange(self.T), actions]
        self._rewards[:, pos] = feedback.rewards
        if self.round == self.schedule.bounds[self.epoch]:
            batch = PooledBatch.stacked(self._designs, self._rewards)
            self.theta_hat = self._refit(batch)
            self.refit_rounds.append(self.round)
            if self.epoch < self.schedule.M:
                self.epoch += 1
                self._alloc_buffer(self._designs.dtype)
            else:
                self._designs = self._rewards = None

    def _refit(self, batch: PooledBatch) -> np.ndarray:
        raise NotImplementedError


class MLinGreedy(_EpochGreedy):
    """Multi-task greedy with a pooled rank-``k`` refit per epoch."""

    name = "mlin_greedy"

    def __init__(self, T, d, k, N, rng: Rng, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL,
                 restarts=DEFAULT_RESTARTS):
        if not 1 <= k <= d:
            raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
        super().__init__(T, d, N)
        self.k = k
        self.rng = rng
        self.als_opts = dict(max_iters=max_iters, tol=tol, restarts=restarts)
        self.last_fit = None

    def _refit(self, batch):
        fp, report = fit_factored_erm(
            batch, self.k, self.rng.derive_child(f"epoch:{self.epoch}"), **self.als_opts
        )
        self.last_fit = (fp, report)
        return coefficients(fp)


class IndependentGreedy(_EpochGreedy):
    """Baseline: per-task ordinary least squares (minimum-norm when singular)."""

    name = "independent_greedy"

    def __init__(self, T, d, N, rng: Rng = None):
        super().__init__(T, d, N)
        self.last_loss = None

    def _refit(self, batch):
        w = least_squares(batch.designs, batch.rewards, 0.0)
        resid = np.einsum("tnd,td->tn", batch.designs, w) - batch.rewards
        self.last_loss = float(np.sum(resid**2))
        return w.T.copy()


def e2tc_budgets(N, T, d, k, c1=1.0, c2=1.0, exponent_c=None):
    """Exploration budgets ``(N1, N2)``.

    ``N1 = floor(c1 * d^1.5 * k * sqrt(N / T))`` (``d^exponent_c`` when given),
    at least 1, and ``N2 = c2 * k * sqrt(N)`` rounded up to a multiple of ``k``.
    """
    if min(N, T, d, k, c1, c2) <= 0:
        raise InvalidArgumentError("all budget inputs must be positive")
    power = 1.5 if exponent_c is None else float(exponent_c)
    N1 = max(1, math.floor(c1 * d**power * k * math.sqrt(N / T)))
    N2 = k * math.ceil(c2 * k * math.sqrt(N) / k)
    if N1 > N:
        raise InvalidArgumentError(f"stage-1 budget N1={N1} exceeds horizon N={N}")
    if N1 + N2 > N:
        raise InvalidArgumentError(f"stage-2 budget N2={N2} with N1={N1} exceeds horizon N={N}")
    return N1, N2


def moment_subspace(xs, rewards, k):
    """Top-``k`` eigenspace of ``mean(r^2 x x^T)`` over all (x, r) pairs."""
    xs = np.asarray(xs, dtype=float).reshape(-1, np.shape(xs)[-1])
    r2 = np.asarray(rewards, dtype=float).reshape(-1) ** 2
    M = (xs * r2[:, None]).T @ xs / len(r2)
    basis, _ = top_k_eig(M, k)
    return basis, M


def _min_lambda(ellipsoids) -> float:
    return float(np.linalg.eigvalsh(ellipsoids).min())


class E2TC(Policy):
    """Explore (moments), explore (low-dim least squares), then commit."""

    name = "e2tc"

    def __init__(self, T, d, k, N, N1, N2, rng: Rng):
        if not 1 <= k <= d:
            raise InvalidArgumentError(f"need 1 <= k <= d, got d={d}, k={k}")
        if N2 < k or N2 % k:
            raise InvalidArgumentError(f"N2={N2} must be a positive multiple of k={k}")
        if N1 < 1 or N1 + N2 > N:
            raise InvalidArgumentError(f"budgets N1={N1}, N2={N2} do not fit horizon N={N}")
        self.T, self.d, self.k, self.N, self.N1, self.N2 = T, d, k, N, N1, N2
        self.rng = rng
        self.round = 0
        self.stage = 1
        self.moment_sum = np.zeros((d, d))
        self.B_hat = None
        self.w_hat = None
        self.theta_hat = None
        self.direction_counts = np.zeros(k, dtype=int)
        self._lam0 = None
        self._stage2_x = np.empty((N2, d))
        self._stage2_r = np.empty((N2, T))
        self._commit = None

    def choose(self, contexts: RoundContexts) -> np.ndarray:
        if self._lam0 is None:
            self._lam0 = _min_lambda(contexts.ellipsoids)
        n = contexts.round
        radius = math.sqrt(self._lam0)
        if n <= self.N1:
            return sample_sphere(self.d, radius, self.rng, size=self.T)
        if n <= self.N1 + self.N2:
            i = math.ceil((n - self.N1) * self.k / self.N2)
            return np.tile(radius * self.B_hat[:, i - 1], (self.T, 1))
        return self._commit

    def observe(self, contexts, actions, feedback: Feedback):
        self._advance(contexts)
        n = self.round
        r = feedback.rewards
        if n <= self.N1:
            self.moment_sum += (actions * (r**2)[:, None]).T @ actions
            if n == self.N1:
                M_hat = self.moment_sum / (self.N1 * self.T)
                self.B_hat, _ = top_k_eig(M_hat, self.k)
                self.stage = 2
        elif n <= self.N1 + self.N2:
            j = n - self.N1 - 1
            self._stage2_x[j] = actions[0]
            self._stage2_r[j] = r
            self.direction_counts[math.ceil((n - self.N1) * self.k / self.N2) - 1] += 1
            if n == self.N1 + self.N2:
                feats = self._stage2_x @ self.B_hat
                self.w_hat = least_squares(feats, self._stage2_r)  # (k, T)
                self.theta_hat = self.B_hat @ self.w_hat
                self._commit, _ = ellipsoid_argmax_batch(self.theta_hat.T, contexts.ellipsoids)
                self.stage = 3


class PEGE(Policy):
    """Per-task phased exploration / greedy exploitation.

    Cycle ``c`` plays the ``d`` scaled basis vectors once each, refits every
    task's estimate on all exploration data so far, then exploits for ``c``
    rounds. All tasks share the schedule, so the work is batched over tasks.
    """

    name = "pege"

    def __init__(self, T, d, N, rng: Rng = None):
        self.T, self.d, self.N = T, d, N
        self.round = 0
        self.cycle = 1
        self._pos = 0  # position within the current cycle
        self._lam0 = None
        self._xs = []
        self._rs = []
        self.theta_hat = np.zeros((d, T))
        self._exploit = None

    @staticmethod
    def rounds_after(cycles: int, d: int) -> int:
        return cycles * d + cycles * (cycles + 1) // 2

    def choose(self, contexts):
        if self._lam0 is None:
            self._lam0 = _min_lambda(contexts.ellipsoids)
        if self._pos < self.d:
            a = np.zeros(self.d)
            a[self._pos] = math.sqrt(self._lam0)
            return np.tile(a, (self.T, 1))
        return self._exploit

    def observe(self, contexts, actions, feedback):
        self._advance(contexts)
        if self._pos < self.d:
            self._xs.append(actions[0].copy())
            self._rs.append(feedback.rewards.copy())
            if self._pos == self.d - 1:
                self.theta_hat = least_squares(np.array(self._xs), np.array(self._rs))
                self._exploit, _ = ellipsoid_argmax_batch(self.theta_hat.T, contexts.ellipsoids)
        self._pos += 1
        if self._pos == self.d + self.cycle:
            self.cycle += 1
            self._pos = 0
