"""Comparison estimators: per-site local EM and the matching-based average.

The average estimator fits a two-component model in every site separately,
anchors on the first site's labels, relabels each other site by whichever
pairing of centroids has the smaller summed distance to the anchor (ties
swap), and averages.  Its accuracy therefore hinges on every local fit
being good enough to match correctly, which is exactly what degrades under
low separation or strong site heterogeneity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, UnsupportedConfigurationError
from .model import Covariance, ModelParams, SiteDataset
from .pooled import EmConfig, FitTrace, run_pooled_em


@dataclass(frozen=True)
class LocalFit:
    """A single site's two-component fit."""

    site_id: int
    params: ModelParams  # K = 1 view: one mixing row
    trace: FitTrace


def _lloyd(data, centroids, max_iterations):
    """Lloyd iterations from given centroids; empty clusters reseed from the
    point currently farthest from its assigned centroid."""
    k = centroids.shape[0]
    for _ in range(max_iterations):
        dists = np.linalg.norm(data[:, None, :] - centroids[None, :, :], axis=2)
        labels = np.argmin(dists, axis=1)
        new_centroids = np.empty_like(centroids)
        reseeded = False
        for c in range(k):
            members = data[labels == c]
            if len(members) == 0:
                farthest = int(np.argmax(dists[np.arange(len(data)), labels]))
                new_centroids[c] = data[farthest]
                reseeded = True
            else:
                new_centroids[c] = members.mean(axis=0)
        if not reseeded and np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    dists = np.linalg.norm(data[:, None, :] - centroids[None, :, :], axis=2)
    labels = np.argmin(dists, axis=1)
    wcss = float(np.sum(np.min(dists, axis=1) ** 2))
    return centroids, labels, wcss


def kmeans_init(data, n_clusters: int, restarts: int = 5, seed: int = 0,
                max_iterations: int = 300):
    """Best-of-``restarts`` Lloyd's k-means, deterministic given ``seed``.

    Each restart seeds the centroids by sampling ``n_clusters`` distinct
    data rows (distinct as values, so duplicated points cannot collapse two
    centroids).  Restarts consume one shared random stream, so the run with
    ``restarts = 1`` is the first candidate of any larger restart count and
    the winning within-cluster sum of squares can only improve.

    Returns the (n_clusters, d) centroid array of the lowest-WCSS run.
    """
    y = data.observations if isinstance(data, SiteDataset) else np.atleast_2d(
        np.asarray(data, dtype=float)
    )
    if n_clusters < 1:
        raise ContractViolation("n_clusters must be >= 1")
    if y.shape[0] < n_clusters:
        raise ContractViolation("need at least n_clusters observations")
    if restarts < 1:
        raise ContractViolation("restarts must be >= 1")
    unique_rows = np.unique(y, axis=0)
    if unique_rows.shape[0] < n_clusters:
        raise ContractViolation(
            f"only {unique_rows.shape[0]} distinct rows for {n_clusters} clusters"
        )
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        picks = rng.choice(unique_rows.shape[0], size=n_clusters, replace=False)
        centroids, _, wcss = _lloyd(y, unique_rows[picks].copy(), max_iterations)
        if best is None or wcss < best[1]:
            best = (centroids, wcss)
    return best[0]


def local_em(site: SiteDataset, cov: Covariance, config: EmConfig | None = None,
             restarts: int = 5, seed: int | None = None) -> LocalFit:
    """Two-component EM on one site's data alone.

    Initialized from k-means centroids with a uniform starting weight; the
    first E-step then plays the role of the plug-in weight refresh.  ``cov``
    may be the full multi-site covariance (the site's matrix is extracted)
    or a single-site one.
    """
    config = config or EmConfig()
    if seed is None:
        seed = config.seed
    local_cov = cov if cov.n_sites == 1 else cov.site_view(site.site_id)
    centroids = kmeans_init(site, 2, restarts=restarts, seed=seed)
    init = ModelParams.two_component(centroids[0], centroids[1], [0.5])
    local_data = SiteDataset(0, site.observations)
    trace = run_pooled_em([local_data], init, local_cov, config)
    return LocalFit(site_id=site.site_id, params=trace.final_params, trace=trace)


def average_estimator(fits: Sequence[LocalFit], weights=None):
    """Label-matched weighted average of per-site two-component fits.

    ``fits[0]`` anchors the labels.  For every other site the same-label
    distance sum is compared against the crossed one; the crossed pairing is
    used whenever it is at least as small.  Returns the (2, d) averaged
    means; per-site mixing estimates stay in the individual fits.
    """
    fits = list(fits)
    if not fits:
        raise ContractViolation("need at least one local fit")
    k = len(fits)
    if weights is None:
        weights = np.full(k, 1.0 / k)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (k,):
            raise ContractViolation(f"weights must have shape ({k},)")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ContractViolation("weights must sum to one")
    for fit in fits:
        if fit.params.n_components != 2:
            raise UnsupportedConfigurationError(
                "the binary matching rule only supports two components"
            )
    anchor = fits[0].params.means
    total = weights[0] * anchor
    for w, fit in zip(weights[1:], fits[1:]):
        means = fit.params.means
        same = np.linalg.norm(means[0] - anchor[0]) + np.linalg.norm(means[1] - anchor[1])
        cross = np.linalg.norm(means[0] - anchor[1]) + np.linalg.norm(means[1] - anchor[0])
        matched = means if same < cross else means[::-1]
        total = total + w * matched
    return total
