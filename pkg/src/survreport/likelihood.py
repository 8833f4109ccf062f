"""Log-likelihood machinery for error-prone panel outcome data.

The observed-data likelihood for one subject is a mixture over the J+1
intervals that could contain the latent event time:

    L_i = sum_j theta_j * C_ij,    theta_j = S_j - S_{j+1},

where C_ij multiplies the per-visit report probabilities given the event
lies in interval j.  With proportional hazards the subject-specific
survival is S_j^(i) = S_j ** exp(z_i' beta); with a time-varying
covariate path it is built from per-interval cumulative hazard
increments.  Baseline misclassification mixes in a prevalent-case term
weighted by 1 - eta.

Values are evaluated in the survival-difference (theta) form, whose terms
are all non-negative; the equivalent coefficient transform D = C @ T_r is
exposed for callers who want the compact linear form.
"""

from __future__ import annotations

import math

import numpy as np

from .panel import Dataset, ErrorModel

BEFORE_EVENT_INTERVAL = "before_event_interval"
AFTER_EVENT_INTERVAL = "after_event_interval"

# exp(z'beta) is clamped to this range during optimization so that wild
# line-search points cannot overflow; converged solutions are unaffected.
LINEAR_PREDICTOR_CLAMP = 50.0


class NonPositiveLikelihoodError(ValueError):
    """A subject's likelihood is non-positive: the observed pattern is
    impossible under the supplied error model and parameters."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"subject row {row} has non-positive likelihood")


def report_probability(result: int, relation: str, error_model: ErrorModel) -> float:
    """Probability of one report given the visit's relation to the event.

    ``after_event_interval`` means the visit time is at or past the right
    end of the interval containing the event (the event has occurred by
    the visit); ``before_event_interval`` means the visit is at or before
    the interval's left end.
    """
    if relation == AFTER_EVENT_INTERVAL:
        p_pos = error_model.phi1
    elif relation == BEFORE_EVENT_INTERVAL:
        p_pos = 1.0 - error_model.phi0
    else:
        raise ValueError(f"unknown relation {relation!r}")
    return p_pos if result == 1 else 1.0 - p_pos


def transform_matrix(J: int) -> np.ndarray:
    """(J+1)x(J+1) matrix T with theta = T @ S: +1 diagonal, -1 superdiagonal."""
    if J < 1:
        raise ValueError("J must be at least 1")
    t = np.eye(J + 1)
    idx = np.arange(J)
    t[idx, idx + 1] = -1.0
    return t


def to_d_matrix(c: np.ndarray) -> np.ndarray:
    """Transformed coefficients D with sum_j C_ij theta_j == sum_j D_ij S_j."""
    c = np.asarray(c, dtype=float)
    d = c.copy()
    d[:, 1:] -= c[:, :-1]
    return d


def build_c_matrix(dataset: Dataset, error_model: ErrorModel) -> np.ndarray:
    """N x (J+1) coefficient matrix of per-interval report probabilities.

    Row i, column j is the probability of subject i's report vector given
    the event time falls in interval j; column J+1 corresponds to the
    event never occurring.
    """
    grid = dataset.grid
    J = grid.J
    c = np.empty((dataset.n, J + 1))
    phi1, phi0 = error_model.phi1, error_model.phi0
    for i, subj in enumerate(dataset.subjects):
        m = np.array([grid.interval_index(t) for t in subj.times])
        r = np.asarray(subj.results)
        a = np.where(r == 1, phi1, 1.0 - phi1)        # visit after the event
        b = np.where(r == 1, 1.0 - phi0, phi0)        # visit before the event
        # visits are sorted, so for column j the first searchsorted(m, j)
        # visits precede the event interval and the rest follow it
        prefix_b = np.concatenate(([1.0], np.cumprod(b)))
        suffix_a = np.concatenate((np.cumprod(a[::-1])[::-1], [1.0]))
        split = np.searchsorted(m, np.arange(1, J + 2), side="left")
        c[i] = prefix_b[split] * suffix_a[split]
    return c


def survival_from_increments(lambdas: np.ndarray) -> np.ndarray:
    """Baseline survival (S_1=1, ..., S_{J+1}) from cumulative-hazard increments."""
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValueError("hazard increments must be non-negative")
    return np.exp(-np.concatenate(([0.0], np.cumsum(lambdas))))


def _clamped_exp_lp(z: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp of the clamped linear predictor plus the not-clamped mask."""
    u = np.asarray(z, dtype=float) @ np.asarray(beta, dtype=float)
    mask = np.abs(u) < LINEAR_PREDICTOR_CLAMP
    return np.exp(np.clip(u, -LINEAR_PREDICTOR_CLAMP, LINEAR_PREDICTOR_CLAMP)), mask


def _row_mixture(c, subject_survival, eta):
    """Per-subject likelihood eta * sum_j C_ij theta_j^(i) + (1-eta) C_i1."""
    theta = subject_survival - np.concatenate(
        (subject_survival[:, 1:], np.zeros((subject_survival.shape[0], 1))), axis=1
    )
    row = np.einsum("ij,ij->i", c, theta)
    if eta != 1.0:
        row = eta * row + (1.0 - eta) * c[:, 0]
    return row


def _sum_log_rows(rows: np.ndarray, weights) -> float:
    bad = np.flatnonzero(rows <= 0.0)
    if bad.size:
        raise NonPositiveLikelihoodError(int(bad[0]))
    logs = np.log(rows)
    if weights is not None:
        logs = logs * np.asarray(weights, dtype=float)
    # compensated summation keeps the total stable for very large N
    return math.fsum(logs.tolist())


def loglik_onesample(c: np.ndarray, s: np.ndarray, weights=None) -> float:
    """One-sample log-likelihood sum_i log(sum_j C_ij theta_j)."""
    c = np.asarray(c, dtype=float)
    s = np.asarray(s, dtype=float)
    # materialized (not a stride-0 view) so the row reduction uses the same
    # summation order as the covariate variants, keeping beta = 0 an exact
    # reduction of those likelihoods
    rows = _row_mixture(c, np.broadcast_to(s, (c.shape[0], s.size)).copy(), 1.0)
    return _sum_log_rows(rows, weights)


def loglik_cov(c: np.ndarray, s: np.ndarray, beta, z, weights=None) -> float:
    """Proportional-hazards log-likelihood with time-fixed covariates."""
    return loglik_entry_misclass(c, s, beta, z, eta=1.0, weights=weights)


def loglik_entry_misclass(c, s, beta, z, eta: float, weights=None) -> float:
    """Covariate log-likelihood with baseline misclassification weight eta."""
    if not (0.0 < eta <= 1.0):
        raise ValueError(f"eta must lie in (0, 1], got {eta!r}")
    c = np.asarray(c, dtype=float)
    s = np.asarray(s, dtype=float)
    e, _ = _clamped_exp_lp(z, beta)
    subject_survival = s[None, :] ** e[:, None]
    rows = _row_mixture(c, subject_survival, eta)
    return _sum_log_rows(rows, weights)


def loglik_timevarying(c, lambdas, beta, z_intervals, eta: float = 1.0, weights=None) -> float:
    """Log-likelihood with piecewise-constant covariates per grid interval.

    ``z_intervals`` has shape (N, J, P): the covariate vector in effect on
    interval k (between tau_{k-1} and tau_k) for each subject.
    """
    if not (0.0 < eta <= 1.0):
        raise ValueError(f"eta must lie in (0, 1], got {eta!r}")
    c = np.asarray(c, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValueError("hazard increments must be non-negative")
    w, _ = _clamped_exp_lp(z_intervals, beta)  # (N, J)
    cum = np.cumsum(lambdas[None, :] * w, axis=1)
    subject_survival = np.exp(-np.concatenate((np.zeros((c.shape[0], 1)), cum), axis=1))
    rows = _row_mixture(c, subject_survival, eta)
    return _sum_log_rows(rows, weights)


def _reverse_cumsum_tail(q: np.ndarray) -> np.ndarray:
    """R[:, k] = sum_{j > k} q[:, j] for k = 0..J-1 (0-based columns)."""
    rev = np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
    return rev[:, 1:]


def loglik_and_gradient(
    c,
    lambdas,
    beta,
    z=None,
    z_intervals=None,
    eta: float = 1.0,
    weights=None,
):
    """Log-likelihood and its gradient w.r.t. (lambda, beta).

    Covers every variant: pass ``z`` (N x P) for time-fixed covariates,
    ``z_intervals`` (N x J x P) for time-varying ones, neither for the
    one-sample model, and ``eta < 1`` for baseline misclassification.
    Returns ``(loglik, grad_lambda, grad_beta)``.
    """
    if z is not None and z_intervals is not None:
        raise ValueError("pass either z or z_intervals, not both")
    if not (0.0 < eta <= 1.0):
        raise ValueError(f"eta must lie in (0, 1], got {eta!r}")
    c = np.asarray(c, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValueError("hazard increments must be non-negative")
    n, jp1 = c.shape
    J = jp1 - 1
    beta = np.asarray(beta, dtype=float) if beta is not None else np.zeros(0)
    p = beta.size

    if z_intervals is not None:
        w, mask = _clamped_exp_lp(z_intervals, beta)  # (N, J)
        incr = lambdas[None, :] * w
        cum = np.cumsum(incr, axis=1)
        ss = np.exp(-np.concatenate((np.zeros((n, 1)), cum), axis=1))
    else:
        if p:
            e, mask = _clamped_exp_lp(z, beta)  # (N,)
        else:
            e = np.ones(n)
            mask = np.ones(n, dtype=bool)
        h = np.concatenate(([0.0], np.cumsum(lambdas)))
        ss = np.exp(-np.outer(e, h))

    rows = _row_mixture(c, ss, eta)
    ll = _sum_log_rows(rows, weights)

    d = to_d_matrix(c)
    q = d * ss  # (N, J+1); sum_j q_ij == rows pre-mixture
    scale = eta / rows
    if weights is not None:
        scale = scale * np.asarray(weights, dtype=float)
    tail = _reverse_cumsum_tail(q)  # (N, J)

    if z_intervals is not None:
        grad_lambda = -(scale[:, None] * w * tail).sum(axis=0)
        if p:
            # d w_ik / d beta_p = w_ik z_ikp (zero where clamped)
            effect = scale[:, None] * incr * mask * tail  # (N, J)
            grad_beta = -np.einsum("ik,ikp->p", effect, np.asarray(z_intervals, dtype=float))
        else:
            grad_beta = np.zeros(0)
    else:
        grad_lambda = -((scale * e)[:, None] * tail).sum(axis=0)
        if p:
            hdot = q @ h  # sum_j q_ij H_j
            grad_beta = -np.asarray(z, dtype=float).T @ (scale * e * mask * hdot)
        else:
            grad_beta = np.zeros(0)
    return ll, grad_lambda, grad_beta
