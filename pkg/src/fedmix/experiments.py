"""Replication sweeps over the four estimators and CSV emission.

Every run is deterministic given the plan and the master seed: replication
data comes from counter-based streams, initializer seeds come from a
disjoint auxiliary stream, workers only change scheduling (results are
reordered by replication index before writing), and floats are written as
shortest round-trip decimals, so reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .baselines import average_estimator, local_em
from .errors import ContractViolation, DegenerateClassError, DegenerateTiltError
from .federation import Federation
from .metrics import (
    ReplicationSummary,
    aggregate,
    approximation_error,
    initialization_radius_check,
    snr,
    summarize_estimate,
)
from .model import Covariance, ModelParams
from .pooled import EmConfig, run_pooled_em
from .simgen import StudyConfig, aux_rng, generate_study
from .surrogate import initial_params, run_distributed_em

FIG1_COLUMNS = ("sigma2", "a", "K", "n", "rep", "iter", "rel_error")
BIAS_MSE_COLUMNS = ("sigma2", "a", "K", "n", "estimator", "bias", "variance", "mse", "reps")
FAILURE_COLUMNS = ("sigma2", "a", "K", "n", "rep", "stage", "error")


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid of simulation cells plus replication and output settings."""

    sites: tuple = (10,)
    site_sizes: tuple = (1000,)
    noise_variances: tuple = (2.5, 5.0)
    heterogeneities: tuple = (0.1, 0.3)
    replications: int = 200
    estimators: tuple = ("local", "average", "pooled", "distributed")
    out_dir: str = "results"
    seed: int = 0
    workers: int = 1
    iterations: int = 50  # fixed trace length for the approximation-error sweep

    def __post_init__(self):
        for name in ("sites", "site_sizes", "noise_variances", "heterogeneities",
                     "estimators"):
            value = tuple(getattr(self, name))
            if not value:
                raise ContractViolation(f"{name} must be a nonempty sequence")
            object.__setattr__(self, name, value)
        if self.replications < 1:
            raise ContractViolation("replications must be >= 1")
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")

    def cells(self):
        """StudyConfigs for every (K, n, sigma^2, a) grid point, seeded per cell."""
        out = []
        for k, n, var, het in product(
            self.sites, self.site_sizes, self.noise_variances, self.heterogeneities
        ):
            ss = np.random.SeedSequence(
                self.seed,
                spawn_key=(
                    int(round(1000 * var)),
                    int(round(1000 * het)),
                    int(k),
                    int(n),
                ),
            )
            cell_seed = int(ss.generate_state(1, np.uint64)[0])
            out.append(
                StudyConfig(
                    n_sites=k,
                    site_size=n,
                    noise_variance=var,
                    heterogeneity=het,
                    seed=cell_seed,
                    replications=self.replications,
                )
            )
        return out


def _init_seeds(cfg: StudyConfig, replication: int):
    """Per-site k-means seeds from the auxiliary stream (seeds[0] is the lead's)."""
    rng = aux_rng(cfg, replication, 0)
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=cfg.n_sites)]


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else str(v) for v in row]
            )
    return path


# ---------------------------------------------------------------------------
# Approximation-error traces (pooled vs distributed from a shared init)
# ---------------------------------------------------------------------------


def fig1_replication(cfg_dict: dict, replication: int, iterations: int):
    """Rows of per-iteration relative distance for one replication.

    Returns (rows, failure) where exactly one of the two is non-empty.
    """
    cfg = StudyConfig(**cfg_dict)
    cell = (cfg.noise_variance, cfg.heterogeneity, cfg.n_sites, cfg.site_size)
    try:
        datasets, _ = generate_study(cfg, replication)
        cov = cfg.covariance()
        seeds = _init_seeds(cfg, replication)
        lead_fit = local_em(datasets[0], cov, EmConfig(seed=cfg.seed), seed=seeds[0])
        mu0 = lead_fit.params.means
        theta0 = initial_params(datasets, mu0, cov)
        fixed = EmConfig(max_iterations=iterations, tolerance=0.0)
        pooled_trace = run_pooled_em(datasets, theta0, cov, fixed)
        dist_trace = run_distributed_em(Federation(datasets, cov), mu0, fixed)
    except (DegenerateClassError, DegenerateTiltError, np.linalg.LinAlgError) as exc:
        return [], (*cell, replication, "fit", f"{type(exc).__name__}: {exc}")
    rows = []
    for t in range(iterations + 1):
        rel = approximation_error(
            dist_trace.records[t].params.means, pooled_trace.records[t].params.means
        )
        rows.append((*cell, replication, t, rel))
    return rows, None


def run_fig1(plan: ExperimentPlan):
    """Approximation-error sweep; writes fig1_traces.csv (+ failures.csv if any)."""
    jobs = [
        (asdict(cfg), rep, plan.iterations)
        for cfg in plan.cells()
        for rep in range(plan.replications)
    ]
    results = _run_jobs(fig1_replication, jobs, plan.workers)
    rows, failures = [], []
    for row_chunk, failure in results:
        rows.extend(row_chunk)
        if failure is not None:
            failures.append(failure)
    out = Path(plan.out_dir)
    trace_path = write_csv(out / "fig1_traces.csv", FIG1_COLUMNS, rows)
    if failures:
        write_csv(out / "failures.csv", FAILURE_COLUMNS, failures)
    return trace_path


# ---------------------------------------------------------------------------
# Bias / variance / MSE sweep
# ---------------------------------------------------------------------------


def bias_mse_replication(cfg_dict: dict, replication: int, estimators: tuple):
    """One replication of the estimator comparison; returns (summary, failure)."""
    cfg = StudyConfig(**cfg_dict)
    cell = (cfg.noise_variance, cfg.heterogeneity, cfg.n_sites, cfg.site_size)
    try:
        datasets, truth = generate_study(cfg, replication)
        cov = cfg.covariance()
        seeds = _init_seeds(cfg, replication)
        config = EmConfig(seed=cfg.seed)

        need_all_local = "average" in estimators
        local_fits = {}
        for data in datasets:
            if data.site_id == 0 or need_all_local:
                local_fits[data.site_id] = local_em(
                    data, cov, config, seed=seeds[data.site_id]
                )
        records = {}
        if "local" in estimators:
            records["local"] = summarize_estimate(local_fits[0].params.means, truth)
        if "average" in estimators:
            fits = [local_fits[j] for j in sorted(local_fits)]
            records["average"] = summarize_estimate(average_estimator(fits), truth)
        mu0 = local_fits[0].params.means
        if "pooled" in estimators:
            theta0 = initial_params(datasets, mu0, cov)
            trace = run_pooled_em(datasets, theta0, cov, config)
            records["pooled"] = summarize_estimate(
                trace.final_params.means, truth, trace.final_params
            )
        if "distributed" in estimators:
            trace = run_distributed_em(Federation(datasets, cov), mu0, config)
            records["distributed"] = summarize_estimate(
                trace.final_params.means, truth, trace.final_params
            )
        return ReplicationSummary(replication, records), None
    except (DegenerateClassError, DegenerateTiltError, np.linalg.LinAlgError) as exc:
        return None, (*cell, replication, "fit", f"{type(exc).__name__}: {exc}")


def run_bias_mse(plan: ExperimentPlan):
    """Estimator-comparison sweep; writes bias_mse_summary.csv per-cell rows."""
    rows, failures = [], []
    for cfg in plan.cells():
        jobs = [
            (asdict(cfg), rep, tuple(plan.estimators))
            for rep in range(plan.replications)
        ]
        results = _run_jobs(bias_mse_replication, jobs, plan.workers)
        summaries = []
        for summary, failure in results:
            if failure is not None:
                failures.append(failure)
            else:
                summaries.append(summary)
        if len(summaries) < 2:
            continue
        stats = aggregate(summaries)
        for name in plan.estimators:
            st = stats[name]
            rows.append(
                (
                    cfg.noise_variance,
                    cfg.heterogeneity,
                    cfg.n_sites,
                    cfg.site_size,
                    name,
                    st.bias,
                    st.variance,
                    st.mse,
                    st.replications,
                )
            )
    out = Path(plan.out_dir)
    path = write_csv(out / "bias_mse_summary.csv", BIAS_MSE_COLUMNS, rows)
    if failures:
        write_csv(out / "failures.csv", FAILURE_COLUMNS, failures)
    return path


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Single fits on provided data (the `fit` subcommand) and diagnostics
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    estimator: str
    means: np.ndarray
    params: ModelParams | None = None
    trace: object = None
    ledger: object = None
    site_mixing: dict | None = None  # per-site local weights (average estimator)


def fit_single(datasets, cov: Covariance, estimator: str,
               config: EmConfig | None = None, restarts: int = 5) -> FitResult:
    """Run one named estimator on user-provided site datasets."""
    config = config or EmConfig()
    datasets = sorted(datasets, key=lambda d: d.site_id)
    seeds = [config.seed + j for j in range(len(datasets))]
    if estimator == "local":
        fit = local_em(datasets[0], cov, config, restarts=restarts, seed=seeds[0])
        return FitResult("local", fit.params.means, fit.params, fit.trace)
    if estimator == "average":
        fits = [
            local_em(d, cov, config, restarts=restarts, seed=seeds[d.site_id])
            for d in datasets
        ]
        means = average_estimator(fits)
        mixing = {f.site_id: float(f.params.lam[0]) for f in fits}
        return FitResult("average", means, site_mixing=mixing)
    lead_fit = local_em(datasets[0], cov, config, restarts=restarts, seed=seeds[0])
    mu0 = lead_fit.params.means
    if estimator == "pooled":
        theta0 = initial_params(datasets, mu0, cov)
        trace = run_pooled_em(datasets, theta0, cov, config)
        return FitResult("pooled", trace.final_params.means, trace.final_params, trace)
    if estimator == "distributed":
        federation = Federation(datasets, cov)
        trace = run_distributed_em(federation, mu0, config)
        return FitResult(
            "distributed",
            trace.final_params.means,
            trace.final_params,
            trace,
            ledger=federation.ledger,
        )
    raise ContractViolation(f"unknown estimator {estimator!r}")


def diagnose_study(cfg: StudyConfig, replication: int = 0, c0: float = 0.1,
                   c1: float = 0.75, cw: float = 0.1):
    """Separation and initialization-radius report for one simulated replication."""
    datasets, truth = generate_study(cfg, replication)
    cov = cfg.covariance()
    seeds = _init_seeds(cfg, replication)
    lead_fit = local_em(datasets[0], cov, EmConfig(seed=cfg.seed), seed=seeds[0])
    theta0 = initial_params(datasets, lead_fit.params.means, cov)
    report = initialization_radius_check(
        theta0, truth, cfg.sigma(), c0=c0, c1=c1, cw=cw
    )
    return {
        "snr": snr(np.array(cfg.mean1), np.array(cfg.mean0), cfg.sigma()),
        "report": report,
        "theta0": theta0,
        "truth": truth,
    }
