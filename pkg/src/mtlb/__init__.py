"""Multi-task linear bandits with a shared low-dimensional representation."""
from .envs import (
    Feedback,
    HiddenInstance,
    RoundContexts,
    build_mnist_tasks,
    draw_round,
    ellipsoid_argmax,
    gen_finite,
    gen_infinite,
    instant_regret,
    pull,
)
from .harness import RegretLedger, RunSummary, run, sweep, write_csv
from .config import ExperimentConfig, load_config, parse_config
from .lowrank import FactorPair, FitReport, PooledBatch, brute_force_factored_erm, coefficients, fit_factored_erm
from .numerics import Rng, least_squares, sample_gaussian, sample_haar_orthonormal, sample_sphere, subspace_distance, top_k_eig
from .policies import E2TC, PEGE, IndependentGreedy, MLinGreedy, e2tc_budgets, epoch_schedule

__version__ = "0.1.0"
