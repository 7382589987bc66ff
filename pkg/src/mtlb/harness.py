"""Experiment runner: instance + policy construction, the round loop, regret
accounting, CSV output and T x k sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import ALGO_PAIRS, ConfigError, ExperimentConfig
from .envs import build_mnist_tasks, draw_round, gen_finite, gen_infinite, instant_regret, pull
from .errors import InvalidArgumentError, MtlbError
from .idx import load_idx
from .numerics import Rng
from .policies import E2TC, PEGE, IndependentGreedy, MLinGreedy, e2tc_budgets

log = logging.getLogger(__name__)

CSV_HEADER = ["setting", "algo", "seed", "d", "k", "K", "T", "N", "round", "regret_total", "regret_per_task"]
SUMMARY_HEADER = ["setting", "algo", "seed", "d", "k", "K", "T", "N",
                  "final_regret_total", "final_regret_per_task", "wall_time", "status"]
MAX_LOGGED_ROUNDS = 10_000


class RunError(MtlbError):
    """A module error raised mid-run, tagged with where it happened."""

    def __init__(self, round, task, cause):
        where = f"round {round}" + (f", task {task}" if task is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.round, self.task, self.cause = round, task, cause


class OutputError(MtlbError):
    pass


@dataclass
class RegretLedger:
    setting: str
    algo: str
    seed: int
    d: int
    k: int
    K: int
    instant: np.ndarray  # (N, T) per-round, per-task regret

    @property
    def N(self) -> int:
        return self.instant.shape[0]

    @property
    def T(self) -> int:
        return self.instant.shape[1]

    @property
    def total(self) -> np.ndarray:
        return self.instant.sum(axis=1)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.total)

    @property
    def per_task(self) -> np.ndarray:
        return self.cumulative / self.T


@dataclass
class RunSummary:
    config: dict
    seed: int
    final_regret_total: float
    final_regret_per_task: float
    wall_time: float


@lru_cache(maxsize=4)
def _load_mnist(images_path: str, labels_path: str):
    return load_idx(images_path), load_idx(labels_path)


def build_instance(config: ExperimentConfig, seed: int):
    if config.setting == "finite":
        return gen_finite(config.d, config.k, config.T, config.K, seed)
    if config.setting == "infinite":
        return gen_infinite(config.d, config.k, config.T, 1.0, seed)
    images, labels = _load_mnist(config.mnist.images, config.mnist.labels)
    inst = build_mnist_tasks(images, labels, config.mnist.digits, seed, config.mnist.pca_dim)
    if config.T is not None and config.T != inst.T:
        raise ConfigError(f"config T={config.T} but digits {config.mnist.digits} give T={inst.T}")
    if config.d is not None and config.d != inst.d:
        raise ConfigError(f"config d={config.d} but the MNIST features have d={inst.d}")
    if config.k > inst.d:
        raise ConfigError(f"k={config.k} exceeds d={inst.d}")
    return inst


def make_policy(config: ExperimentConfig, inst, rng: Rng):
    T, d, N, k = inst.T, inst.d, config.N, config.k
    if config.algo == "mlin_greedy":
        return MLinGreedy(T, d, k, N, rng, **config.als.model_dump())
    if config.algo == "independent_greedy":
        return IndependentGreedy(T, d, N, rng)
    if config.algo == "e2tc":
        p = config.e2tc
        N1, N2 = e2tc_budgets(N, T, d, k, p.c1, p.c2, p.exponent_c)
        return E2TC(T, d, k, N, N1, N2, rng)
    return PEGE(T, d, N, rng)


def run(config: ExperimentConfig, seed: int, policy_factory=None):
    """Play one seeded run and return ``(RegretLedger, RunSummary)``.

    The run seed splits into ``instance``, ``env`` and ``policy`` child
    streams, so changing the policy alone never changes the offered contexts.
    ``policy_factory(config, inst, rng)`` overrides the configured algorithm.
    """
    start = time.perf_counter()
    root = Rng(seed)
    try:
        inst = build_instance(config, root.derive_child("instance").seed)
        policy = (policy_factory or make_policy)(config, inst, root.derive_child("policy"))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    env_rng = root.derive_child("env")
    instant = np.empty((config.N, inst.T))
    for n in range(1, config.N + 1):
        try:
            contexts = draw_round(inst, n, env_rng)
            public = contexts.public()
            actions = policy.choose(public)
            feedback = pull(inst, contexts, actions, env_rng)
            instant[n - 1] = instant_regret(inst, contexts, actions)
            policy.observe(public, actions, feedback)
        except MtlbError as exc:
            raise RunError(n, getattr(exc, "task", None), exc) from exc
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            raise RunError(n, None, exc) from exc
    ledger = RegretLedger(config.setting, config.algo, seed, inst.d, config.k, inst.K, instant)
    cumulative = ledger.cumulative
    summary = RunSummary(
        config=config.model_dump(),
        seed=seed,
        final_regret_total=float(cumulative[-1]),
        final_regret_per_task=float(cumulative[-1] / inst.T),
        wall_time=time.perf_counter() - start,
    )
    log.info("%s seed=%d T=%d: per-task regret %.4g (%.1fs)", config.algo, seed, inst.T,
             summary.final_regret_per_task, summary.wall_time)
    return ledger, summary


def logged_rounds(N: int) -> np.ndarray:
    if N <= MAX_LOGGED_ROUNDS:
        return np.arange(1, N + 1)
    step = math.ceil(N / MAX_LOGGED_ROUNDS)
    rounds = np.arange(step, N + 1, step)
    return rounds if rounds[-1] == N else np.append(rounds, N)


def _fmt(x) -> str:
    # shortest string that round-trips to the same double
    return repr(float(x))


def ledger_rows(ledger: RegretLedger):
    cumulative = ledger.cumulative
    fixed = [ledger.setting, ledger.algo, ledger.seed, ledger.d, ledger.k, ledger.K, ledger.T, ledger.N]
    for n in logged_rounds(ledger.N):
        total = cumulative[n - 1]
        yield fixed + [int(n), _fmt(total), _fmt(total / ledger.T)]


def _write(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    try:
        path = Path(path)
        if path.parent != Path("."):
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def write_csv(ledgers, path):
    """Write one ledger, or several in long format, with the standard header."""
    if isinstance(ledgers, RegretLedger):
        ledgers = [ledgers]
    _write(path, CSV_HEADER, (row for ledger in ledgers for row in ledger_rows(ledger)))


def write_summary(table, path):
    _write(path, SUMMARY_HEADER, ([row[h] for h in SUMMARY_HEADER] for row in table))


def _summary_row(config: ExperimentConfig, seed, summary=None, ledger=None, status="ok"):
    return {
        "setting": config.setting, "algo": config.algo, "seed": seed,
        "d": ledger.d if ledger else config.d, "k": config.k,
        "K": ledger.K if ledger else (config.K if config.setting != "infinite" else 0),
        "T": ledger.T if ledger else config.T, "N": config.N,
        "final_regret_total": _fmt(summary.final_regret_total) if summary else "",
        "final_regret_per_task": _fmt(summary.final_regret_per_task) if summary else "",
        "wall_time": f"{summary.wall_time:.3f}" if summary else "",
        "status": status,
    }


def cell_key(config: ExperimentConfig, seed: int) -> str:
    """Content address of one (config, seed) run."""
    payload = json.dumps({"config": config.model_dump(exclude={"out_path", "seeds"}), "seed": seed},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def _run_cell(args):
    config, seed, run_dir = args
    key = cell_key(config, seed)
    done = None if run_dir is None else Path(run_dir) / f"{key}.json"
    if done is not None and done.exists():
        return json.loads(done.read_text())
    try:
        ledger, summary = run(config, seed)
    except MtlbError as exc:
        return _summary_row(config, seed, status=f"error: {exc}")
    row = _summary_row(config, seed, summary, ledger)
    if run_dir is not None:
        write_csv(ledger, Path(run_dir) / f"{key}.csv")
        done.write_text(json.dumps(row))
    return row


def sweep_threads() -> int:
    raw = os.environ.get("MTLB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"MTLB_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def sweep(base: ExperimentConfig, T_values, k_values, seeds, out_dir=None, threads=None):
    """Run treatment and baseline over every (T, k, seed) cell.

    ``T_values=None`` keeps the configured ``T`` (the only option for MNIST).
    Returns the summary table (one dict per run). With ``out_dir`` each run
    is stored under a content-addressed name, so repeating a sweep reuses
    finished cells; ``sweep.csv`` (long format) and ``summary.csv`` are
    rebuilt from them at the end.
    """
    if T_values is None:
        T_values = [base.T]
    elif base.setting == "mnist" and any(T is not None for T in T_values):
        raise ConfigError("the number of MNIST tasks is fixed by the digit set; sweep over T is undefined")
    cells, invalid = [], {}
    for i, (T, k, algo, seed) in enumerate(product(T_values, k_values, ALGO_PAIRS[base.setting], seeds)):
        fields = {**base.model_dump(), "T": T, "k": k, "algo": algo, "seeds": [seed]}
        try:
            cells.append((ExperimentConfig.model_validate(fields), seed))
        except ValidationError as exc:
            cells.append((None, seed))
            invalid[i] = _summary_row(base.model_copy(update=fields), seed,
                                      status=f"error: invalid cell: {exc.errors()[0]['msg']}")
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir) / "runs"
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputError(f"cannot create {run_dir}: {exc}") from exc
    jobs = [(cfg, seed, run_dir) for cfg, seed in cells if cfg is not None]
    threads = threads or sweep_threads()
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            done = iter(pool.map(_run_cell, jobs))
    else:
        done = (_run_cell(job) for job in jobs)
    table = [invalid[i] if i in invalid else next(done) for i in range(len(cells))]
    if out_dir is not None:
        _assemble(Path(out_dir), cells, table)
    return table


def _assemble(out_dir: Path, cells, table):
    try:
        with open(out_dir / "sweep.csv", "w", newline="") as out:
            out.write(",".join(CSV_HEADER) + "\n")
            for (cfg, seed), row in zip(cells, table):
                if row["status"] != "ok":
                    continue
                with open(out_dir / "runs" / f"{cell_key(cfg, seed)}.csv") as fh:
                    next(fh)
                    out.writelines(fh)
    except OSError as exc:
        raise OutputError(f"cannot assemble sweep output in {out_dir}: {exc}") from exc
    write_summary(table, out_dir / "summary.csv")
