"""Quick numerical self-checks run by ``mtlb selftest``."""
from __future__ import annotations

import numpy as np

from .lowrank import PooledBatch, brute_force_factored_erm, fit_factored_erm
from .numerics import Rng, sample_sphere


def sphere_moment_exact(d: int, power: int) -> float:
    """E[x_1^power] for x uniform on the unit sphere in R^d (power in 2, 4, 6)."""
    return {
        2: 1.0 / d,
        4: 3.0 / (d * (d + 2)),
        6: 15.0 / (d * (d + 2) * (d + 4)),
    }[power]


def sphere_moment_check(d: int, draws: int, rng: Rng, chunk: int = 250_000):
    """Monte-Carlo z-scores of the 2nd/4th/6th first-coordinate moments.

    Returns ``{power: (estimate, exact, z)}``.
    """
    sums = {p: 0.0 for p in (2, 4, 6)}
    sq = {p: 0.0 for p in (2, 4, 6)}
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        x1 = sample_sphere(d, 1.0, rng, size=m)[:, 0]
        for p in sums:
            v = x1**p
            sums[p] += float(v.sum())
            sq[p] += float((v * v).sum())
        done += m
    out = {}
    for p in sums:
        mean = sums[p] / draws
        var = max(sq[p] / draws - mean**2, 0.0)
        se = np.sqrt(var / draws)
        exact = sphere_moment_exact(d, p)
        out[p] = (mean, exact, (mean - exact) / se if se > 0 else 0.0)
    return out


def random_rank1_instance(rng: Rng, d: int, T: int, n_range=(10, 30), noise=0.5):
    """Tasks with unrelated random coefficients and Gaussian noise, for oracle comparisons."""
    designs, rewards = [], []
    for _ in range(T):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        X = rng.standard_normal((n, d))
        theta = rng.standard_normal(d)
        designs.append(X)
        rewards.append(X @ theta + noise * rng.standard_normal(n))
    return PooledBatch.from_tasks(designs, rewards)


def als_oracle_check(instances: int, rng: Rng, grid: int = 10_000, restarts: int = 8):
    """Compare ALS against the brute-force grid on random d <= 3, k = 1 problems.

    Returns a list of ``(als_loss, brute_loss)`` pairs.
    """
    results = []
    for i in range(instances):
        sub = rng.derive_child(f"instance:{i}")
        d = int(sub.integers(2, 4))
        T = int(sub.integers(1, 4))
        batch = random_rank1_instance(sub, d, T)
        _, report = fit_factored_erm(batch, 1, sub.derive_child("als"), restarts=restarts)
        _, brute = brute_force_factored_erm(batch, 1, grid)
        results.append((report.loss, brute))
    return results


def run_selftest(draws: int = 1_000_000, instances: int = 20, seed: int = 0, echo=print) -> bool:
    rng = Rng(seed)
    ok = True
    for d in (2, 5, 10):
        for p, (est, exact, z) in sphere_moment_check(d, draws, rng.derive_child(f"sphere:{d}")).items():
            good = abs(z) <= 3
            ok &= good
            echo(f"{'PASS' if good else 'FAIL'} sphere d={d} E[x1^{p}]: {est:.6g} vs {exact:.6g} (z={z:+.2f})")
    pairs = als_oracle_check(instances, rng.derive_child("als"))
    worst = max(a - (b + 1e-4 * (1 + b)) for a, b in pairs)
    good = worst <= 0
    ok &= good
    echo(f"{'PASS' if good else 'FAIL'} ALS vs brute force on {instances} instances (worst margin {worst:+.3g})")
    return bool(ok)
