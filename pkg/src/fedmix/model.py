"""Heterogeneous Gaussian mixture model core.

A shared set of S Gaussian components (class centroids) is mixed with
site-specific proportions at each of K sites.  Everything downstream
(pooled EM, the tilted surrogate objective, the baselines) is built from
the primitives here: per-observation responsibilities, site mixture
densities, the density ratio between two sites' mixtures, and the
per-site gradient of the expected complete-data log-likelihood.

All densities and posteriors are evaluated in log space so observations
dozens of standard deviations from the centroids stay finite.

Component ordering convention: component 0 carries the site weight
(``lam``) and component 1 carries its complement, i.e. for two-component
fits row 0 of ``means`` is the class-1 centroid and row 1 the class-0
centroid.  Stacked S*d vectors (gradients, broadcast payloads) follow
the same row order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractViolation, NumericalOverflowError

# Mixing proportions live in the clamped open interval [MIXING_FLOOR, 1 - MIXING_FLOOR].
MIXING_FLOOR = 1e-6

# Absolute slack when validating clamped mixing entries and row sums; covers the
# rounding introduced by renormalizing a clipped row.
_MIXING_SLACK = 1e-9

_LOG_2PI = np.log(2.0 * np.pi)


def _as_readonly(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class SiteDataset:
    """Observations held by a single site; never serialized across sites.

    Parameters
    ----------
    site_id : int
        Zero-based site index; site 0 is the lead site by convention.
    observations : (n, d) array_like
        One row per observation.
    """

    __slots__ = ("site_id", "observations")

    def __init__(self, site_id: int, observations):
        obs = _as_readonly(observations)
        if obs.ndim != 2:
            raise ContractViolation(
                f"observations must be a 2-D (n, d) array, got ndim={obs.ndim}"
            )
        if obs.shape[0] < 1:
            raise ContractViolation("a site must hold at least one observation")
        if not np.all(np.isfinite(obs)):
            raise ContractViolation("observations must be finite")
        object.__setattr__(self, "site_id", int(site_id))
        object.__setattr__(self, "observations", obs)

    def __setattr__(self, name, value):
        raise AttributeError("SiteDataset is immutable")

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def __repr__(self):
        return f"SiteDataset(site_id={self.site_id}, n={self.n}, dim={self.dim})"


class Covariance:
    """Known per-site covariance matrices with cached factorizations.

    Validates that every matrix is symmetric positive definite and, when a
    spectral bound ``eigenvalue_bound`` (M) is supplied, that all eigenvalues
    lie in [1/M, M].  Without a supplied bound, the tightest such M is
    computed from the matrices themselves.
    """

    def __init__(self, matrices: Sequence, eigenvalue_bound: float | None = None):
        mats = [np.array(m, dtype=float, copy=True) for m in matrices]
        if not mats:
            raise ContractViolation("need at least one covariance matrix")
        dim = mats[0].shape[0]
        eig_lo, eig_hi = np.inf, 0.0
        for j, sigma in enumerate(mats):
            if sigma.shape != (dim, dim):
                raise ContractViolation(
                    f"covariance {j} has shape {sigma.shape}, expected ({dim}, {dim})"
                )
            if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
                raise ContractViolation(f"covariance {j} is not symmetric")
            eigs = np.linalg.eigvalsh(sigma)
            if eigs[0] <= 0.0:
                raise ContractViolation(
                    f"covariance {j} is not positive definite (min eigenvalue {eigs[0]:.3e})"
                )
            eig_lo = min(eig_lo, eigs[0])
            eig_hi = max(eig_hi, eigs[-1])
        if eigenvalue_bound is not None:
            m = float(eigenvalue_bound)
            if m <= 0:
                raise ContractViolation("eigenvalue bound must be positive")
            if eig_hi > m * (1 + 1e-12) or eig_lo < (1.0 / m) * (1 - 1e-12):
                raise ContractViolation(
                    f"eigenvalues [{eig_lo:.6g}, {eig_hi:.6g}] escape [1/M, M] for M={m:.6g}"
                )
            self._bound = m
        else:
            self._bound = max(eig_hi, 1.0 / eig_lo)

        self._dim = dim
        self._mats = tuple(_as_readonly(m) for m in mats)
        self._shared = len(mats) == 1 or all(np.array_equal(mats[0], m) for m in mats[1:])
        # With a shared matrix, factor once and alias so lookups are bitwise equal.
        if self._shared:
            chol = np.linalg.cholesky(mats[0])
            prec = cho_solve((chol, True), np.eye(dim))
            prec = _as_readonly((prec + prec.T) / 2.0)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            self._chols = tuple(_as_readonly(chol) for _ in mats)
            self._precisions = tuple(prec for _ in mats)
            self._log_dets = tuple(logdet for _ in mats)
        else:
            chols, precs, logdets = [], [], []
            for sigma in mats:
                chol = np.linalg.cholesky(sigma)
                prec = cho_solve((chol, True), np.eye(dim))
                chols.append(_as_readonly(chol))
                precs.append(_as_readonly((prec + prec.T) / 2.0))
                logdets.append(2.0 * float(np.sum(np.log(np.diag(chol)))))
            self._chols = tuple(chols)
            self._precisions = tuple(precs)
            self._log_dets = tuple(logdets)

    @classmethod
    def shared(cls, sigma, n_sites: int, eigenvalue_bound: float | None = None) -> "Covariance":
        """One matrix used by all ``n_sites`` sites."""
        if n_sites < 1:
            raise ContractViolation("n_sites must be >= 1")
        return cls([sigma] * n_sites, eigenvalue_bound=eigenvalue_bound)

    @classmethod
    def isotropic(cls, variance: float, dim: int, n_sites: int) -> "Covariance":
        """Shared sigma^2 * I covariance."""
        if variance <= 0:
            raise ContractViolation("variance must be positive")
        return cls.shared(float(variance) * np.eye(dim), n_sites)

    @property
    def n_sites(self) -> int:
        return len(self._mats)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def is_shared(self) -> bool:
        return self._shared

    @property
    def eigenvalue_bound(self) -> float:
        return self._bound

    def sigma(self, site: int):
        return self._mats[site]

    def precision(self, site: int):
        return self._precisions[site]

    def log_det(self, site: int) -> float:
        return self._log_dets[site]

    def site_view(self, site: int) -> "Covariance":
        """Single-site Covariance holding only site's matrix (for local fits)."""
        return Covariance([self._mats[site]])


def clamp_mixing_rows(rows):
    """Clip mixing entries to the clamped interval, renormalizing rows the clip touched."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    clipped = np.clip(rows, MIXING_FLOOR, 1.0 - MIXING_FLOOR)
    touched = np.any(clipped != rows, axis=1)
    if np.any(touched):
        clipped = clipped.copy()
        clipped[touched] /= clipped[touched].sum(axis=1, keepdims=True)
    return clipped


class ModelParams:
    """Shared component means plus per-site mixing proportions.

    Parameters
    ----------
    means : (S, d) array_like
        Component centroids, S >= 2.
    mixing : (K, S) array_like
        Per-site component probabilities; every entry must already lie in
        the clamped interval and every row must sum to one.
    """

    __slots__ = ("means", "mixing")

    def __init__(self, means, mixing):
        means = _as_readonly(np.atleast_2d(means))
        mixing = _as_readonly(np.atleast_2d(mixing))
        if means.ndim != 2 or means.shape[0] < 2 or means.shape[1] < 1:
            raise ContractViolation(
                f"means must be (S>=2, d>=1), got shape {means.shape}"
            )
        if not np.all(np.isfinite(means)):
            raise ContractViolation("means must be finite")
        if mixing.ndim != 2 or mixing.shape[0] < 1 or mixing.shape[1] != means.shape[0]:
            raise ContractViolation(
                f"mixing must be (K>=1, S={means.shape[0]}), got shape {mixing.shape}"
            )
        if (mixing.min() < MIXING_FLOOR - _MIXING_SLACK
                or mixing.max() > 1.0 - MIXING_FLOOR + _MIXING_SLACK):
            raise ContractViolation(
                "mixing entries must lie in the clamped interval "
                f"[{MIXING_FLOOR}, 1 - {MIXING_FLOOR}]"
            )
        if np.abs(mixing.sum(axis=1) - 1.0).max() > _MIXING_SLACK:
            raise ContractViolation("each mixing row must sum to one")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "mixing", mixing)

    def __setattr__(self, name, value):
        raise AttributeError("ModelParams is immutable")

    @classmethod
    def two_component(cls, mean1, mean0, lam) -> "ModelParams":
        """Build from the two-component parametrization (mu1, mu0, per-site lam).

        ``lam`` is the per-site probability of the class-1 component (a
        scalar or a length-K vector); it is clamped before construction.
        """
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        lam = np.clip(lam, MIXING_FLOOR, 1.0 - MIXING_FLOOR)
        mixing = np.column_stack([lam, 1.0 - lam])
        return cls(np.vstack([mean1, mean0]), mixing)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_sites(self) -> int:
        return self.mixing.shape[0]

    @property
    def lam(self):
        """Per-site class-1 probability (two-component models only)."""
        if self.n_components != 2:
            raise ContractViolation("lam is only defined for two-component models")
        return self.mixing[:, 0]

    def stacked_means(self):
        """Means flattened to an S*d vector in component order."""
        return self.means.reshape(-1).copy()

    def permuted(self, order) -> "ModelParams":
        """Relabel components by ``order`` (exact column/row permutation)."""
        order = list(order)
        if sorted(order) != list(range(self.n_components)):
            raise ContractViolation(f"not a component permutation: {order}")
        return ModelParams(self.means[order], self.mixing[:, order])

    def label_swapped(self) -> "ModelParams":
        """Two-component label swap; bit-exact permutation of the stored arrays."""
        if self.n_components != 2:
            raise ContractViolation("label_swapped is only defined for two components")
        return self.permuted([1, 0])

    def __repr__(self):
        return (
            f"ModelParams(S={self.n_components}, d={self.dim}, K={self.n_sites})"
        )


def validate_responsibilities(resp, atol: float = 1e-12):
    """Check the responsibility contract: entries in [0, 1], rows sum to one."""
    resp = np.asarray(resp)
    if np.any(resp < 0.0) or np.any(resp > 1.0):
        raise ContractViolation("responsibilities must lie in [0, 1]")
    if np.any(np.abs(resp.sum(axis=-1) - 1.0) > atol):
        raise ContractViolation("responsibility rows must sum to 1")
    return resp


# ---------------------------------------------------------------------------
# Densities and posteriors
# ---------------------------------------------------------------------------


def _logsumexp_rows(a):
    """Stable row-wise logsumexp for a (n, S) array of finite entries."""
    m = np.max(a, axis=1)
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


class GaussianSiteWorkspace:
    """Data-dependent pieces of the Gaussian quadratic, computed once.

    The expanded quadratic (y - mu)' P (y - mu) = y'Py - 2 (Py)'mu + mu'P mu
    splits into terms that depend only on the data (computed here, once per
    fit) and terms involving the current means (recomputed per iteration).
    Every density evaluation in the package flows through this class, so
    iterating with a cached workspace is bit-identical to one-shot calls.
    Per-component columns stay independent, which keeps label permutations
    commuting with the computation bit-for-bit.
    """

    __slots__ = ("y", "n", "prec", "const", "gy", "point_quad")

    def __init__(self, y, cov: Covariance, site: int):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != cov.dim:
            raise ContractViolation(
                f"observation dim {y.shape[1]} != covariance dim {cov.dim}"
            )
        self.y = y
        self.n = y.shape[0]
        self.prec = cov.precision(site)
        self.const = -0.5 * (cov.dim * _LOG_2PI + cov.log_det(site))
        self.gy = y @ self.prec
        self.point_quad = np.einsum("nd,nd->n", self.gy, y)

    def log_densities(self, means):
        """(n, S) log N(y_i; mu_c, Sigma_site) for the given component means."""
        means = np.atleast_2d(np.asarray(means, dtype=float))
        if means.shape[1] != self.y.shape[1]:
            raise ContractViolation(
                f"mean dim {means.shape[1]} != observation dim {self.y.shape[1]}"
            )
        cross = self.gy @ means.T
        mean_quad = np.einsum("sd,de,se->s", means, self.prec, means)
        quad = self.point_quad[:, None] - 2.0 * cross + mean_quad[None, :]
        return self.const - 0.5 * quad

    def estep(self, mix_row, means):
        """Responsibilities and per-row log density under one mixing row."""
        weighted = self.log_densities(means) + np.log(mix_row)
        lse = _logsumexp_rows(weighted)
        return np.exp(weighted - lse[:, None]), lse


def component_log_densities(y, means, cov: Covariance, site: int):
    """Per-component Gaussian log densities under site's covariance.

    Parameters
    ----------
    y : (n, d) or (d,) array_like
    means : (S, d) array_like
    cov : Covariance
    site : int
        Which site's covariance to evaluate under.

    Returns
    -------
    (n, S) ndarray of log N(y_i; mu_c, Sigma_site).
    """
    return GaussianSiteWorkspace(y, cov, site).log_densities(means)


def _resp_from_log_densities(log_dens, mix_row):
    weighted = log_dens + np.log(mix_row)
    return np.exp(weighted - _logsumexp_rows(weighted)[:, None])


def responsibilities(y, mix_row, means, cov: Covariance, site: int):
    """Posterior component probabilities for each row of ``y``.

    ``mix_row`` is the site's mixing vector (length S).  Computed in log
    space; each returned row sums to one within 1e-12.

    Returns
    -------
    (n, S) ndarray, or (S,) when ``y`` is a single vector.
    """
    single = np.asarray(y).ndim == 1
    mix_row = np.asarray(mix_row, dtype=float)
    log_dens = component_log_densities(y, means, cov, site)
    if mix_row.shape != (log_dens.shape[1],):
        raise ContractViolation(
            f"mixing row has shape {mix_row.shape}, expected ({log_dens.shape[1]},)"
        )
    resp = _resp_from_log_densities(log_dens, mix_row)
    return resp[0] if single else resp


def site_log_density(y, mix_row, means, cov: Covariance, site: int):
    """Log mixture density of one site evaluated at rows of ``y``."""
    log_dens = component_log_densities(y, means, cov, site)
    return _logsumexp_rows(log_dens + np.log(np.asarray(mix_row, dtype=float)))


def _ratio_from_log_densities(lf_num, mix_num, lf_den, mix_den):
    # Normalize both mixtures by the pointwise max component log density so the
    # exponentials never overflow and the two exact-ratio-one cases (equal
    # mixing rows, coincident means) reduce to bitwise-identical arithmetic.
    anchor = np.maximum(lf_num.max(axis=1), lf_den.max(axis=1))
    num = np.exp(lf_num - anchor[:, None]) @ np.asarray(mix_num, dtype=float)
    den = np.exp(lf_den - anchor[:, None]) @ np.asarray(mix_den, dtype=float)
    ratio = num / den
    if not np.all(np.isfinite(ratio)) or np.any(ratio <= 0.0):
        raise NumericalOverflowError("density ratio evaluated to a non-finite value")
    return ratio


def density_ratio(y, means, lead_mixing, site_mixing, cov: Covariance,
                  lead: int = 0, site: int = 0):
    """Ratio of one site's mixture density to the lead site's, at rows of ``y``.

    Both mixtures share the component means; they differ in the mixing row
    and (when covariances are heterogeneous) in the site covariance.
    Strictly positive; exactly 1.0 when the two mixtures coincide.
    """
    single = np.asarray(y).ndim == 1
    lf_den = component_log_densities(y, means, cov, lead)
    lf_num = lf_den if (cov.is_shared or site == lead) else component_log_densities(
        y, means, cov, site
    )
    ratio = _ratio_from_log_densities(lf_num, site_mixing, lf_den, lead_mixing)
    return float(ratio[0]) if single else ratio


def _stacked_weighted_log_densities(datasets, params: ModelParams, cov: Covariance):
    """Shared-covariance fast path: one density evaluation over all rows.

    Returns (weighted, sizes) where ``weighted`` stacks every site's
    log(mix_c) + log N(y; mu_c) rows in site order.
    """
    stacked = np.vstack([d.observations for d in datasets])
    log_dens = component_log_densities(stacked, params.means, cov, datasets[0].site_id)
    sizes = [d.n for d in datasets]
    log_mix = np.repeat(np.log(params.mixing[[d.site_id for d in datasets]]), sizes, axis=0)
    return log_dens + log_mix, sizes


def mixture_log_likelihood(datasets: Sequence[SiteDataset], params: ModelParams,
                           cov: Covariance) -> float:
    """Observed-data log likelihood summed over all sites and observations."""
    if not datasets:
        raise ContractViolation("need at least one dataset")
    for data in datasets:
        if data.dim != params.dim:
            raise ContractViolation(
                f"site {data.site_id} has dim {data.dim}, model has dim {params.dim}"
            )
    if cov.is_shared:
        weighted, _ = _stacked_weighted_log_densities(datasets, params, cov)
        return float(np.sum(_logsumexp_rows(weighted)))
    total = 0.0
    for data in datasets:
        j = data.site_id
        total += float(
            np.sum(site_log_density(data.observations, params.mixing[j], params.means, cov, j))
        )
    return total


def panel_responsibilities(datasets: Sequence[SiteDataset], params: ModelParams,
                           cov: Covariance):
    """Responsibilities for every site at the current parameters.

    Returns a list aligned with ``datasets``.  With a shared covariance all
    rows go through a single batched density evaluation.
    """
    if cov.is_shared and len(datasets) > 1:
        weighted, sizes = _stacked_weighted_log_densities(datasets, params, cov)
        resp_all = np.exp(weighted - _logsumexp_rows(weighted)[:, None])
        return list(np.split(resp_all, np.cumsum(sizes)[:-1]))
    return [
        responsibilities(
            d.observations, params.mixing[d.site_id], params.means, cov, d.site_id
        )
        for d in datasets
    ]


# ---------------------------------------------------------------------------
# Q-function pieces
# ---------------------------------------------------------------------------


def weighted_class_sums(y, weights):
    """Per-component weight totals and weighted observation sums.

    Returns ``(counts, moments)`` with counts[c] = sum_i W[i, c] and
    moments[c] = sum_i W[i, c] * y_i.  Both pooled EM and the surrogate
    build their normal equations from these sums, which keeps the two
    code paths arithmetically identical in the K = 1 case.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    return weights.sum(axis=0), weights.T @ y


def weighted_mean_gradient(y, weights, means, cov: Covariance, site: int):
    """Stacked gradient (1/n) sum_i W[i, c] * Omega_site (y_i - mu_c).

    With ``weights`` equal to the responsibilities this is the per-site
    gradient of the expected complete-data objective with respect to the
    component means; with tilted weights it is the lead-site surrogate's
    gradient contribution for one site.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    if weights.shape[0] != y.shape[0]:
        raise ContractViolation("one weight row per observation required")
    means = np.atleast_2d(np.asarray(means, dtype=float))
    prec = cov.precision(site)
    n = y.shape[0]
    counts, moments = weighted_class_sums(y, weights)
    centered = moments - counts[:, None] * means
    return (centered @ prec / n).reshape(-1)


def local_q_gradient(data, mix_row, means, cov: Covariance, site: int):
    """Per-site mean-gradient of the expected complete-data objective.

    Responsibilities are evaluated at ``(mix_row, means)`` and the gradient
    is taken at the same means, matching what a site transmits each round.
    This S*d vector is the only per-site quantity that ever leaves a site.
    """
    y = data.observations if isinstance(data, SiteDataset) else data
    resp = responsibilities(y, mix_row, means, cov, site)
    return weighted_mean_gradient(y, resp, means, cov, site)


def local_q_value(y, resp, mix_row, means, cov: Covariance, site: int) -> float:
    """Scalar per-site expected complete-data objective at fixed responsibilities.

    (1/n) sum_i sum_c resp[i, c] * (log mix_row[c] + log N(y_i; means[c])).
    Used as the differentiation target for finite-difference checks of
    :func:`local_q_gradient`.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    resp = np.atleast_2d(np.asarray(resp, dtype=float))
    log_dens = component_log_densities(y, means, cov, site)
    terms = resp * (log_dens + np.log(np.asarray(mix_row, dtype=float)))
    return float(terms.sum() / y.shape[0])


def solve_mean_system(precision_matrix, rhs):
    """Solve A mu = rhs for one component via Cholesky; raises on non-PD A."""
    factor = cho_factor(precision_matrix, lower=True)
    return cho_solve(factor, rhs)


def solve_mean_systems(matrices, rhs):
    """Batched per-component solve of A_c mu_c = rhs_c with a PD check.

    ``matrices`` is (S, d, d), ``rhs`` is (S, d).  The Cholesky pass raises
    numpy.linalg.LinAlgError when any A_c is not positive definite; callers
    identify the offending component with :func:`first_non_spd_component`.
    Both the pooled M-step and the surrogate maximizer run through this
    helper, so identical inputs produce bitwise identical solutions.
    """
    np.linalg.cholesky(matrices)  # PD gate for the whole batch
    return np.linalg.solve(matrices, rhs[..., None])[..., 0]


def first_non_spd_component(matrices) -> int | None:
    """Index of the first non-positive-definite matrix in a stack, if any."""
    for c, mat in enumerate(np.asarray(matrices)):
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            return c
    return None
