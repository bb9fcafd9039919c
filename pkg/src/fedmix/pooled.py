"""EM on the union of all site data: the gold-standard estimator.

Each step evaluates responsibilities per site at the current parameters,
refreshes every site's mixing row from its own responsibility means, and
solves the per-component precision-weighted normal equations pooled over
all sites:

    A_c = sum_j Omega_j * (sum_i w_icj),   b_c = sum_j Omega_j (sum_i w_icj y_ij)

with mu_c the solution of A_c mu_c = b_c.  The observed-data log
likelihood is recorded at every iterate; it must be non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation, DegenerateClassError
from .metrics import param_distance
from .model import (
    Covariance,
    GaussianSiteWorkspace,
    ModelParams,
    SiteDataset,
    _logsumexp_rows,
    clamp_mixing_rows,
    first_non_spd_component,
    mixture_log_likelihood,
    solve_mean_systems,
    weighted_class_sums,
)

# A component whose pooled responsibility mass drops below this fraction of the
# total sample count has effectively vanished; abort rather than regularize.
DEGENERATE_MASS_FRACTION = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """Iteration budget and convergence rule shared by every EM-style fit.

    ``tolerance`` is a threshold on the parameter distance between
    successive iterates; 0 disables early stopping so the fit runs exactly
    ``max_iterations`` steps (used for fixed-length iteration traces).
    """

    max_iterations: int = 500
    tolerance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be >= 1")
        if not (self.tolerance >= 0.0):
            raise ContractViolation("tolerance must be >= 0")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    params: ModelParams
    log_likelihood: float
    step_distance: float  # distance to the previous iterate; nan for iteration 0


@dataclass
class FitTrace:
    """Per-iteration record of an EM-style fit."""

    records: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    comm: object = None  # CommLedger for distributed fits, None otherwise

    @property
    def final_params(self) -> ModelParams:
        return self.records[-1].params

    @property
    def n_iterations(self) -> int:
        return len(self.records) - 1

    def params_sequence(self):
        return [r.params for r in self.records]

    def log_likelihoods(self):
        return np.array([r.log_likelihood for r in self.records])


def _check_panel(datasets: Sequence[SiteDataset], params: ModelParams, cov: Covariance):
    if not datasets:
        raise ContractViolation("need at least one dataset")
    if len(datasets) != params.n_sites or cov.n_sites != params.n_sites:
        raise ContractViolation(
            f"{len(datasets)} datasets, {params.n_sites} mixing rows and "
            f"{cov.n_sites} covariances must all agree"
        )
    for data in datasets:
        if data.dim != params.dim:
            raise ContractViolation(
                f"site {data.site_id} has dim {data.dim}, model has dim {params.dim}"
            )
        if not (0 <= data.site_id < params.n_sites):
            raise ContractViolation(f"site_id {data.site_id} out of range")


def _estep_stats(datasets, params: ModelParams, cov: Covariance):
    """One E-step pass: refreshed mixing, normal-equation pieces, and the
    observed log likelihood at ``params`` (the responsibility normalizer).

    Returns (new_mixing, masses, a_mats, b_vecs, loglik) with a_mats and
    b_vecs already divided by the total sample count.
    """
    s, d = params.n_components, params.dim
    total_n = sum(data.n for data in datasets)
    a_mats = np.zeros((s, d, d))
    b_vecs = np.zeros((s, d))
    new_mixing = np.array(params.mixing, copy=True)

    if cov.is_shared and len(datasets) > 1:
        weighted, sizes = _stacked_weighted_log_densities(datasets, params, cov)
        lse = _logsumexp_rows(weighted)
        loglik = float(lse.sum())
        resp_all = np.exp(weighted - lse[:, None])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        site_sums = np.add.reduceat(resp_all, starts, axis=0)
        rows = site_sums / np.asarray(sizes, dtype=float)[:, None]
        for data, row in zip(datasets, clamp_mixing_rows(rows)):
            new_mixing[data.site_id] = row
        stacked = np.vstack([data.observations for data in datasets])
        counts, moments = weighted_class_sums(stacked, resp_all)
        masses = counts.copy()
        prec = cov.precision(datasets[0].site_id)
        for c in range(s):
            a_mats[c] = counts[c] * prec
            b_vecs[c] = prec @ moments[c]
    else:
        loglik = 0.0
        masses = np.zeros(s)
        for data in datasets:
            j = data.site_id
            log_dens = component_log_densities(data.observations, params.means, cov, j)
            weighted = log_dens + np.log(params.mixing[j])
            lse = _logsumexp_rows(weighted)
            loglik += float(np.sum(lse))
            resp = np.exp(weighted - lse[:, None])
            new_mixing[j] = clamp_mixing_rows(resp.mean(axis=0))[0]
            counts, moments = weighted_class_sums(data.observations, resp)
            masses += counts
            prec = cov.precision(j)
            for c in range(s):
                a_mats[c] += counts[c] * prec
                b_vecs[c] += prec @ moments[c]

    a_mats /= float(total_n)
    b_vecs /= float(total_n)
    return new_mixing, masses, a_mats, b_vecs, loglik


def _solve_mstep(masses, a_mats, b_vecs, total_n: int):
    for c, mass in enumerate(masses):
        if mass < DEGENERATE_MASS_FRACTION * total_n:
            raise DegenerateClassError(
                f"component {c} responsibility mass {mass:.3e} vanished "
                f"(threshold {DEGENERATE_MASS_FRACTION * total_n:.3e})",
                component=c,
            )
    try:
        return solve_mean_systems(a_mats, b_vecs)
    except np.linalg.LinAlgError as exc:
        culprit = first_non_spd_component(a_mats)
        raise DegenerateClassError(
            f"weighted-precision matrix of component {culprit} is singular",
            component=culprit,
        ) from exc


def pooled_em_step(datasets: Sequence[SiteDataset], params: ModelParams,
                   cov: Covariance) -> ModelParams:
    """One EM step on the pooled data.

    Raises
    ------
    DegenerateClassError
        If a component's total responsibility mass vanishes or its
        weighted-precision matrix is singular.
    """
    _check_panel(datasets, params, cov)
    total_n = sum(data.n for data in datasets)
    new_mixing, masses, a_mats, b_vecs, _ = _estep_stats(datasets, params, cov)
    new_means = _solve_mstep(masses, a_mats, b_vecs, total_n)
    return ModelParams(new_means, new_mixing)


def run_pooled_em(datasets: Sequence[SiteDataset], init: ModelParams,
                  cov: Covariance, config: EmConfig | None = None) -> FitTrace:
    """Iterate pooled EM steps until the step distance drops below tolerance.

    The trace records every iterate including the initializer (iteration 0).
    Each iterate's log likelihood is the responsibility normalizer of the
    following E-step (the final iterate gets one dedicated evaluation).  A
    degenerate component aborts the fit with the offending iteration index
    attached to the raised error.
    """
    config = config or EmConfig()
    _check_panel(datasets, init, cov)
    total_n = sum(data.n for data in datasets)
    iterates = [(0, init, float("nan"))]
    logliks = []
    params = init
    converged = False
    reason = f"reached max_iterations={config.max_iterations}"
    for t in range(1, config.max_iterations + 1):
        try:
            new_mixing, masses, a_mats, b_vecs, loglik = _estep_stats(
                datasets, params, cov
            )
            new_means = _solve_mstep(masses, a_mats, b_vecs, total_n)
        except DegenerateClassError as exc:
            raise DegenerateClassError(
                f"iteration {t}: {exc}", component=exc.component, iteration=t
            ) from exc
        logliks.append(loglik)
        new_params = ModelParams(new_means, new_mixing)
        step = param_distance(new_params, params)
        iterates.append((t, new_params, step))
        params = new_params
        if config.tolerance > 0.0 and step < config.tolerance:
            converged = True
            reason = f"step distance {step:.3e} < tolerance at iteration {t}"
            break
    logliks.append(mixture_log_likelihood(datasets, params, cov))
    trace = FitTrace(converged=converged, reason=reason)
    for (t, p, step), ll in zip(iterates, logliks):
        trace.records.append(IterationRecord(t, p, ll, step))
    return trace
