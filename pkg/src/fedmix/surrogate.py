"""Lead-site surrogate objective and the distributed EM driver.

Each round, every site sends its refreshed mixing weight and the gradient
of its local expected complete-data objective, both evaluated at the
current parameters.  The lead site reweights its own observations by the
density ratio between each remote site's mixture and its own, so the
tilted local objective mimics the pooled one in expectation, and then adds
a linear correction that makes the surrogate's gradient at the current
means equal the pooled gradient exactly:

    surrogate(mu) = tilted_local(mu) + <pooled_grad - tilted_local_grad, mu>

evaluated at the anchor.  For Gaussian components the tilted objective is
an exact quadratic in the means, so the maximizer is one positive-definite
linear solve per component, entirely at the lead site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateTiltError, NumericalOverflowError
from .metrics import param_distance
from .model import (
    Covariance,
    ModelParams,
    SiteDataset,
    clamp_mixing_rows,
    component_log_densities,
    first_non_spd_component,
    responsibilities,
    site_log_density,
    solve_mean_systems,
    weighted_class_sums,
    weighted_mean_gradient,
    _ratio_from_log_densities,
    _resp_from_log_densities,
)
from .pooled import EmConfig, FitTrace, IterationRecord


@dataclass(frozen=True)
class RoundInputs:
    """Everything the lead site needs to build one round's surrogate."""

    lead_data: SiteDataset
    params: ModelParams
    reports: tuple

    def __post_init__(self):
        reports = tuple(self.reports)
        object.__setattr__(self, "reports", reports)
        k = self.params.n_sites
        if {r.site_id for r in reports} != set(range(k)):
            raise ContractViolation(
                f"need exactly one report per site 0..{k - 1}"
            )
        rounds = {r.round_index for r in reports}
        if len(rounds) != 1:
            raise ContractViolation(f"reports span rounds {sorted(rounds)}")
        expected = self.params.n_components * self.params.dim
        for r in reports:
            if r.grad_mu.size != expected:
                raise ContractViolation(
                    f"site {r.site_id} gradient has {r.grad_mu.size} entries, "
                    f"expected {expected}"
                )
        if self.lead_data.dim != self.params.dim:
            raise ContractViolation("lead data dimension does not match the model")

    def sorted_reports(self):
        return sorted(self.reports, key=lambda r: r.site_id)


class SurrogateObjective:
    """Exact quadratic in the component means, assembled at the lead site.

    Stores per-component tilted weight-precision matrices A_c, tilted
    moment vectors b_c, the gradient correction, and the anchor means.
    The objective is

        value(mu) = const + sum_c (b_c . mu_c - 0.5 mu_c^T A_c mu_c)
                    + correction . stacked(mu)

    so gradient blocks are b_c - A_c mu_c + correction_c and the Hessian
    is the constant block diagonal of -A_c.
    """

    def __init__(self, anchor_means, precision_weights, moments, correction,
                 weight_sums, value_constant):
        self.anchor_means = np.array(anchor_means, copy=True)
        self.precision_weights = np.array(precision_weights, copy=True)
        self.moments = np.array(moments, copy=True)
        self.correction = np.array(correction, copy=True)
        self.weight_sums = np.array(weight_sums, copy=True)
        self.value_constant = float(value_constant)
        for arr in (self.anchor_means, self.precision_weights, self.moments,
                    self.correction, self.weight_sums):
            arr.setflags(write=False)

    @property
    def n_components(self) -> int:
        return self.anchor_means.shape[0]

    @property
    def dim(self) -> int:
        return self.anchor_means.shape[1]

    def value(self, means) -> float:
        means = np.atleast_2d(np.asarray(means, dtype=float))
        total = self.value_constant
        for c in range(self.n_components):
            mu = means[c]
            total += float(self.moments[c] @ mu - 0.5 * mu @ self.precision_weights[c] @ mu)
        total += float(self.correction @ means.reshape(-1))
        return total

    def gradient(self, means):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        blocks = [
            self.moments[c] - self.precision_weights[c] @ means[c]
            for c in range(self.n_components)
        ]
        return np.concatenate(blocks) + self.correction

    def hessian(self):
        s, d = self.n_components, self.dim
        out = np.zeros((s * d, s * d))
        for c in range(s):
            out[c * d:(c + 1) * d, c * d:(c + 1) * d] = -self.precision_weights[c]
        return out


def update_mixing(data, mix_row, means, cov: Covariance, site: int):
    """Refreshed mixing row: clamped mean responsibility over the site's data.

    This is the same formula a pooled EM step applies per site; sites run
    it locally each round and transmit only the leading entry.
    """
    y = data.observations if isinstance(data, SiteDataset) else data
    resp = responsibilities(y, mix_row, means, cov, site)
    return clamp_mixing_rows(np.atleast_2d(resp).mean(axis=0))[0]


def build_surrogate(inputs: RoundInputs, cov: Covariance) -> SurrogateObjective:
    """Assemble the tilted surrogate for one round.

    The tilted statistics come from lead-site data only; the correction is
    the mean of the reported per-site gradients minus the tilted
    objective's own gradient at the anchor means, which makes the
    surrogate's gradient at the anchor match the pooled one by
    construction.
    """
    params = inputs.params
    lead = inputs.lead_data
    y = lead.observations
    k = params.n_sites
    s, d = params.n_components, params.dim
    n = lead.n
    norm = float(k * n)

    lf_lead = component_log_densities(y, params.means, cov, lead.site_id)
    a_mats = np.zeros((s, d, d))
    b_vecs = np.zeros((s, d))

    if cov.is_shared:
        # All per-site tilts and responsibilities derive from one density
        # evaluation, so the K-site accumulation collapses to a single
        # combined weight matrix sum_j tilt_j * resp_j.
        log_mix = np.log(params.mixing)                      # (K, S)
        weighted = lf_lead[None, :, :] + log_mix[:, None, :]  # (K, n, S)
        lse = np.max(weighted, axis=2)
        lse += np.log(np.sum(np.exp(weighted - lse[:, :, None]), axis=2))
        resp = np.exp(weighted - lse[:, :, None])
        anchored = np.exp(lf_lead - lf_lead.max(axis=1)[:, None])  # (n, S)
        mix_dens = anchored @ params.mixing.T                # (n, K)
        tilt = (mix_dens / mix_dens[:, [lead.site_id]]).T    # (K, n); lead row exactly 1
        if not np.all(np.isfinite(tilt)) or np.any(tilt <= 0.0):
            raise NumericalOverflowError("density ratio evaluated to a non-finite value")
        combined = np.sum(tilt[:, :, None] * resp, axis=0)    # (n, S)
        counts, moments = weighted_class_sums(y, combined)
        weight_sums = counts.copy()
        prec = cov.precision(lead.site_id)
        for c in range(s):
            a_mats[c] = counts[c] * prec
            b_vecs[c] = prec @ moments[c]
        grad_check = weighted_mean_gradient(y, combined, params.means, cov, lead.site_id)
        tilted_value = float((combined * lf_lead).sum())
    else:
        weight_sums = np.zeros(s)
        grad_check = np.zeros(s * d)
        tilted_value = 0.0
        for j in range(k):
            lf_j = lf_lead if j == lead.site_id else component_log_densities(
                y, params.means, cov, j
            )
            resp_j = _resp_from_log_densities(lf_j, params.mixing[j])
            tilt_j = _ratio_from_log_densities(
                lf_j, params.mixing[j], lf_lead, params.mixing[lead.site_id]
            )
            weights = tilt_j[:, None] * resp_j
            counts, moments = weighted_class_sums(y, weights)
            weight_sums += counts
            prec = cov.precision(j)
            for c in range(s):
                a_mats[c] += counts[c] * prec
                b_vecs[c] += prec @ moments[c]
            grad_check += weighted_mean_gradient(y, weights, params.means, cov, j)
            tilted_value += float((weights * lf_j).sum())

    a_mats /= norm
    b_vecs /= norm
    grad_check /= k
    tilted_value /= norm

    stacked = np.stack([r.grad_mu for r in inputs.sorted_reports()])
    pooled_grad = stacked.sum(axis=0) / k
    correction = pooled_grad - grad_check

    # Fix the constant so value(anchor) equals the tilted objective's true value.
    anchor = params.means
    quad_at_anchor = sum(
        float(b_vecs[c] @ anchor[c] - 0.5 * anchor[c] @ a_mats[c] @ anchor[c])
        for c in range(s)
    )
    value_constant = tilted_value - quad_at_anchor

    return SurrogateObjective(
        anchor_means=anchor,
        precision_weights=a_mats,
        moments=b_vecs,
        correction=correction,
        weight_sums=weight_sums,
        value_constant=value_constant,
    )


def maximize_surrogate(sq: SurrogateObjective):
    """Unique stationary point of the surrogate: one SPD solve per component.

    Raises
    ------
    DegenerateTiltError
        If a component's tilted weight-precision matrix is not positive
        definite (the quadratic is then unbounded above).
    NumericalOverflowError
        If the residual gradient at the solution is not negligible.
    """
    s, d = sq.n_components, sq.dim
    rhs = sq.moments + sq.correction.reshape(s, d)
    try:
        solution = solve_mean_systems(sq.precision_weights, rhs)
    except np.linalg.LinAlgError as exc:
        culprit = first_non_spd_component(sq.precision_weights)
        raise DegenerateTiltError(
            f"tilted weight-precision matrix of component {culprit} "
            "is not positive definite",
            component=culprit,
        ) from exc
    residual = np.linalg.norm(sq.gradient(solution))
    scale = 1.0 + np.linalg.norm(sq.gradient(sq.anchor_means))
    if not residual < 1e-10 * scale:
        raise NumericalOverflowError(
            f"surrogate maximizer residual {residual:.3e} exceeds 1e-10 * {scale:.3e}"
        )
    return solution


def initial_params(datasets, init_means, cov: Covariance) -> ModelParams:
    """Initial parameters from given means: plug-in mixing at a uniform prior.

    Applies the same refresh every site performs in the initialization
    round, so an in-process pooled fit and a federated fit started from the
    same means share a bit-identical starting point.
    """
    init_means = np.atleast_2d(np.asarray(init_means, dtype=float))
    s = init_means.shape[0]
    uniform = np.full(s, 1.0 / s)
    rows = [
        update_mixing(data, uniform, init_means, cov, data.site_id)
        for data in sorted(datasets, key=lambda d: d.site_id)
    ]
    return ModelParams(init_means, np.vstack(rows))


def _lead_log_likelihood(lead: SiteDataset, params: ModelParams, cov: Covariance) -> float:
    return float(
        np.sum(
            site_log_density(
                lead.observations, params.mixing[lead.site_id], params.means, cov,
                lead.site_id,
            )
        )
    )


def run_distributed_em(federation, init, config: EmConfig | None = None) -> FitTrace:
    """Run the full federated iteration from initial means.

    ``init`` may be an (S, d) array or a ModelParams; only its means are
    used, because the per-site mixing weights are always derived at the
    sites via the uniform-prior plug-in during the initialization round.

    Round structure: an initialization broadcast+collect at round 0 fixes
    the starting parameters; each subsequent round collects refreshed
    mixing weights and gradients at the current parameters, assembles and
    maximizes the surrogate at the lead site, and broadcasts the new
    means.  The trace's log likelihood is the lead site's own (the pooled
    one would require raw data the lead must not see); its ``comm`` field
    carries the federation's ledger.
    """
    config = config or EmConfig()
    init_means = init.means if isinstance(init, ModelParams) else np.atleast_2d(
        np.asarray(init, dtype=float)
    )
    cov = federation.cov
    lead = federation.lead_data

    federation.broadcast_means(0, init_means)
    init_reports = sorted(federation.collect_reports(0), key=lambda r: r.site_id)
    mixing = np.array(
        [[r.lambda_update, 1.0 - r.lambda_update] for r in init_reports]
    )
    params = ModelParams(init_means, mixing)

    trace = FitTrace()
    trace.comm = federation.ledger
    trace.records.append(
        IterationRecord(0, params, _lead_log_likelihood(lead, params, cov), float("nan"))
    )

    for t in range(1, config.max_iterations + 1):
        reports = sorted(federation.collect_reports(t), key=lambda r: r.site_id)
        inputs = RoundInputs(lead, params, tuple(reports))
        sq = build_surrogate(inputs, cov)
        new_means = maximize_surrogate(sq)
        new_mixing = np.array(
            [[r.lambda_update, 1.0 - r.lambda_update] for r in reports]
        )
        new_params = ModelParams(new_means, new_mixing)
        federation.broadcast_means(t, new_means)

        step = param_distance(new_params, params)
        trace.records.append(
            IterationRecord(
                t, new_params, _lead_log_likelihood(lead, new_params, cov), step
            )
        )
        params = new_params
        if config.tolerance > 0.0 and step < config.tolerance:
            trace.converged = True
            trace.reason = f"step distance {step:.3e} < tolerance at round {t}"
            return trace
    trace.converged = False
    trace.reason = f"reached max_iterations={config.max_iterations}"
    return trace
