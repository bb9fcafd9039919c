"""Evaluation quantities: parameter distances, approximation error, SNR,
the initialization-radius diagnostic, and replication aggregation.

The parameter distance combines the per-site mixing discrepancies with the
component-mean discrepancies:

    d(theta, theta') = sqrt(sum_j |lam_j - lam_j'|^2) + sum_c ||mu_c - mu_c'||_2

for two-component models (implemented through an S-general form that reduces
to this exactly at S = 2).  Estimated parameters are identifiable only up to
a component relabeling, so the distance ops first align the estimate's labels
to the reference via the binary matching rule; without that step a perfectly
correct estimator would show an O(separation) error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .model import ModelParams

ESTIMATOR_NAMES = ("local", "average", "pooled", "distributed")


# ---------------------------------------------------------------------------
# Label alignment
# ---------------------------------------------------------------------------


def _vec_norm(v):
    return math.sqrt(float(v @ v))


def match_two_component(est_means, ref_means):
    """Binary label matching: keep when the same-label distance sum is
    strictly smaller than the crossed one, swap otherwise (ties swap)."""
    est = np.atleast_2d(np.asarray(est_means, dtype=float))
    ref = np.atleast_2d(np.asarray(ref_means, dtype=float))
    if est.shape != ref.shape or est.shape[0] != 2:
        raise ContractViolation("binary matching needs two (2, d) mean stacks")
    same = _vec_norm(est[0] - ref[0]) + _vec_norm(est[1] - ref[1])
    cross = _vec_norm(est[0] - ref[1]) + _vec_norm(est[1] - ref[0])
    return (0, 1) if same < cross else (1, 0)


def align_means(est_means, ref_means):
    """Means with labels matched to the reference (two components only)."""
    order = match_two_component(est_means, ref_means)
    return np.atleast_2d(np.asarray(est_means, dtype=float))[list(order)]


def align_params(params: ModelParams, ref: ModelParams) -> ModelParams:
    """Relabel ``params`` to match ``ref``.  Identity for S != 2."""
    if params.n_components != 2:
        return params
    order = match_two_component(params.means, ref.means)
    return params if order == (0, 1) else params.permuted(list(order))


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def _check_same_shape(theta: ModelParams, ref: ModelParams):
    if (theta.n_components, theta.dim, theta.n_sites) != (
        ref.n_components,
        ref.dim,
        ref.n_sites,
    ):
        raise ContractViolation("parameter shapes do not match")


def _mean_term(theta: ModelParams, ref: ModelParams) -> float:
    diff = theta.means - ref.means
    return float(sum(_vec_norm(row) for row in diff))


def param_distance(theta: ModelParams, ref: ModelParams) -> float:
    """Full-parameter distance with labels aligned to the reference."""
    _check_same_shape(theta, ref)
    theta = align_params(theta, ref)
    d = theta.mixing - ref.mixing
    mix_term = math.sqrt(0.5 * float(np.einsum("ks,ks->", d, d)))
    return mix_term + _mean_term(theta, ref)


def site_param_distance(theta: ModelParams, ref: ModelParams, site: int) -> float:
    """Single-site distance: that site's mixing discrepancy plus the mean term."""
    _check_same_shape(theta, ref)
    theta = align_params(theta, ref)
    d = theta.mixing[site] - ref.mixing[site]
    mix_term = math.sqrt(0.5 * float(d @ d))
    return mix_term + _mean_term(theta, ref)


def approximation_error(means_est, means_ref) -> float:
    """Relative distance between two mean stacks: ||est - ref|| / ||ref||.

    Norms are taken on the stacked S*d vectors.  No label alignment is
    applied; callers compare iterates that share an initialization.
    """
    est = np.asarray(means_est, dtype=float).reshape(-1)
    ref = np.asarray(means_ref, dtype=float).reshape(-1)
    if est.shape != ref.shape:
        raise ContractViolation("mean stacks must have identical shapes")
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ContractViolation("reference mean stack has zero norm")
    return float(np.linalg.norm(est - ref)) / denom


def snr(mean1, mean0, sigma) -> float:
    """Mahalanobis separation sqrt((mu1 - mu0)^T Sigma^{-1} (mu1 - mu0))."""
    diff = np.asarray(mean1, dtype=float) - np.asarray(mean0, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return float(np.sqrt(diff @ np.linalg.solve(sigma, diff)))


# ---------------------------------------------------------------------------
# Initialization-radius diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitializationReport:
    """Outcome of the initialization-radius check (a logged diagnostic)."""

    passed: bool
    distance: float
    radius: float
    separation: float
    terms: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        terms = ", ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        return (
            f"initialization radius check: {status} "
            f"(d={self.distance:.6g}, r*Delta={self.radius * self.separation:.6g}, "
            f"Delta={self.separation:.6g}; {terms})"
        )


def initialization_radius_check(theta0: ModelParams, theta_star: ModelParams,
                                sigma, c0: float = 0.1, c1: float = 0.75,
                                cw: float = 0.1,
                                bound: float | None = None) -> InitializationReport:
    """Check that the initializer sits within the separation-scaled radius.

    The admissible radius ``r`` is the minimum of four expressions in the
    constants (c0, c1, cw) and the spectral bound M of the covariance; the
    check reports whether the aligned distance d(theta0, theta*) is at most
    r * Delta.  Constants must satisfy 0 < c0 <= cw < 1/2 < c1 < 1.
    """
    if not (0.0 < c0 <= cw < 0.5 < c1 < 1.0):
        raise ContractViolation(
            f"constants must satisfy 0 < c0 <= cw < 1/2 < c1 < 1, got "
            f"c0={c0}, cw={cw}, c1={c1}"
        )
    sigma = np.asarray(sigma, dtype=float)
    if bound is None:
        eigs = np.linalg.eigvalsh(sigma)
        if eigs[0] <= 0:
            raise ContractViolation("sigma must be positive definite")
        m = float(max(eigs[-1], 1.0 / eigs[0]))
    else:
        m = float(bound)
        if m <= 0:
            raise ContractViolation("bound must be positive")

    if theta_star.n_components != 2:
        raise ContractViolation("the radius check is defined for two components")
    delta = snr(theta_star.means[0], theta_star.means[1], sigma)
    dist = param_distance(theta0, theta_star)

    terms = {
        "quarter_m": m ** 1.5 / 4.0,
        "constant_gap": abs(c0 - cw) / delta,
        "upper_slack": math.sqrt((2.0 * c1 - 1.0) / m + 4.0 / m) - 2.0 / math.sqrt(m),
        "lower_slack": math.sqrt(c1 / m + (m + 1.0 / m + 2.0) / 4.0)
        - 0.5 * (math.sqrt(m) + 1.0 / math.sqrt(m)),
    }
    radius = min(terms.values())
    return InitializationReport(
        passed=bool(dist <= radius * delta),
        distance=dist,
        radius=radius,
        separation=delta,
        terms=terms,
        constants={"c0": c0, "c1": c1, "cw": cw, "M": m},
    )


# ---------------------------------------------------------------------------
# Replication summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorRecord:
    """One estimator's outcome in one replication."""

    bias: float            # tracked coordinate: aligned mu0[0] minus the truth
    squared_error: float   # ||aligned means - true means||^2 / (2 d)
    means: np.ndarray      # aligned (S, d) snapshot
    distance_to_truth: float = float("nan")  # full aligned parameter distance


@dataclass(frozen=True)
class ReplicationSummary:
    replication: int
    records: dict  # estimator name -> EstimatorRecord


@dataclass(frozen=True)
class AggregateStats:
    bias: float       # mean of per-replication biases
    variance: float   # unbiased variance of the tracked coordinate
    mse: float        # mean of per-replication squared errors
    replications: int


def summarize_estimate(means_est, true_params: ModelParams,
                       params_est: ModelParams | None = None) -> EstimatorRecord:
    """Align an estimate to the truth and extract the tracked quantities.

    The tracked coordinate is the first coordinate of the class-0 mean
    (component row 1).  When the full estimated parameters are supplied the
    aligned parameter distance to the truth is recorded as well.
    """
    aligned = align_means(means_est, true_params.means)
    true_means = true_params.means
    d = true_params.dim
    bias = float(aligned[1, 0] - true_means[1, 0])
    sq = float(np.sum((aligned - true_means) ** 2) / (2.0 * d))
    dist = float("nan")
    if params_est is not None:
        dist = param_distance(params_est, true_params)
    frozen = np.array(aligned, copy=True)
    frozen.setflags(write=False)
    return EstimatorRecord(bias=bias, squared_error=sq, means=frozen,
                           distance_to_truth=dist)


def aggregate(summaries) -> dict:
    """Per-estimator mean bias, unbiased tracked-coordinate variance, and MSE."""
    summaries = list(summaries)
    if len(summaries) < 2:
        raise ContractViolation("aggregation needs at least two replications")
    names = summaries[0].records.keys()
    out = {}
    for name in names:
        biases = np.array([s.records[name].bias for s in summaries])
        sqs = np.array([s.records[name].squared_error for s in summaries])
        out[name] = AggregateStats(
            bias=float(biases.mean()),
            variance=float(biases.var(ddof=1)),
            mse=float(sqs.mean()),
            replications=len(summaries),
        )
    return out
