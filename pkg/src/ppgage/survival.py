"""Survival and association statistics.

Implements the analysis toolkit used downstream of age prediction: Cox
proportional hazards (Newton-Raphson on the partial likelihood, Efron or
Breslow ties), Kaplan-Meier curves with Greenwood variance, two-group
log-rank tests, restricted cubic spline bases and hazard-ratio curves,
logistic regression, prediction-gap stratification, serial two-visit
grouping, and Pearson/MAE agreement metrics.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .errors import (
    CollinearityError,
    InvalidInputError,
    NoEventsError,
    UndefinedStatisticError,
)

Z95 = 1.959963984540054  # norm.ppf(0.975)


@dataclass(frozen=True)
class SurvivalRecord:
    time: float  # years, > 0
    event: int  # 1 observed, 0 censored
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.time) and self.time > 0):
            raise InvalidInputError(f"time must be finite and positive, got {self.time}")
        if self.event not in (0, 1):
            raise InvalidInputError(f"event must be 0 or 1, got {self.event}")


def _design_matrix(records, names):
    times = np.asarray([r.time for r in records], dtype=float)
    events = np.asarray([r.event for r in records], dtype=int)
    try:
        x = np.asarray([[r.covariates[n] for n in names] for r in records], dtype=float)
    except KeyError as err:
        raise InvalidInputError(f"covariate {err.args[0]!r} missing from a record")
    return times, events, x


def _check_full_rank(x: np.ndarray, names) -> None:
    centered = x - x.mean(axis=0)
    scale = np.maximum(np.abs(centered).max(axis=0), 1e-30)
    rank = np.linalg.matrix_rank(centered / scale, tol=1e-8)
    if rank < x.shape[1]:
        raise CollinearityError(
            f"covariates {list(names)} are collinear (rank {rank} < {x.shape[1]})"
        )


@dataclass
class CoxFit:
    covariate_names: list[str]
    coefficients: np.ndarray  # log-hazard units
    covariance: np.ndarray
    hazard_ratios: np.ndarray
    ci95: np.ndarray  # (p, 2) lower/upper on the HR scale
    p_values: np.ndarray
    n_events: int
    converged: bool
    iterations: int
    log_likelihood: float
    max_score: float  # infinity norm of the score at the solution
    ties: str

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def cox_log_partial_likelihood(records, covariate_names, beta, ties="efron") -> float:
    """Log partial likelihood at ``beta`` (same tie handling as cox_fit)."""
    times, events, x = _design_matrix(records, covariate_names)
    ll, _, _ = _cox_pass(times, events, x, np.asarray(beta, dtype=float), ties)
    return ll


def _cox_pass(times, events, x, beta, ties):
    """One evaluation of (log-lik, score, information) at beta."""
    order = np.argsort(times, kind="stable")
    times, events, x = times[order], events[order], x[order]
    n, p = x.shape

    # Clip keeps exp finite when a divergent (separated) fit is probed; any
    # realistic hazard fit stays far inside this range.
    eta = np.clip(x @ beta, -500.0, 500.0)
    phi = np.exp(eta)
    phi_x = phi[:, None] * x
    phi_xx = np.einsum("ni,nj->nij", phi_x, x)

    # Suffix sums: risk set at a time is everyone with an equal or later time.
    risk_phi = np.cumsum(phi[::-1])[::-1]
    risk_phi_x = np.cumsum(phi_x[::-1], axis=0)[::-1]
    risk_phi_xx = np.cumsum(phi_xx[::-1], axis=0)[::-1]

    ll = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))

    # Fast path for event times that are not tied to another event: their
    # contribution needs no Efron correction and vectorizes outright.
    block_start = np.searchsorted(times, times, side="left")
    event_idx = np.flatnonzero(events == 1)
    events_per_block = np.bincount(block_start[event_idx], minlength=n)
    single = event_idx[events_per_block[block_start[event_idx]] == 1]
    if single.size:
        starts = block_start[single]
        denoms = risk_phi[starts]
        u = risk_phi_x[starts] / denoms[:, None]
        ll += float(eta[single].sum() - np.log(denoms).sum())
        score += (x[single] - u).sum(axis=0)
        info += np.einsum("l,lij->ij", 1.0 / denoms, risk_phi_xx[starts]) - u.T @ u

    for start in np.flatnonzero(events_per_block >= 2):
        stop = int(np.searchsorted(times, times[start], side="right"))
        block = slice(start, stop)
        dead = events[block] == 1
        d = int(dead.sum())
        xd = x[block][dead]
        tie_phi = phi[block][dead].sum()
        tie_phi_x = phi_x[block][dead].sum(axis=0)
        tie_phi_xx = phi_xx[block][dead].sum(axis=0)

        if ties == "efron":
            frac = np.arange(d) / d
        else:  # breslow
            frac = np.zeros(d)
        denoms = risk_phi[start] - frac * tie_phi
        nums = risk_phi_x[start][None, :] - frac[:, None] * tie_phi_x
        sq = risk_phi_xx[start][None] - frac[:, None, None] * tie_phi_xx

        ll += float(eta[block][dead].sum() - np.log(denoms).sum())
        u = nums / denoms[:, None]
        score += xd.sum(axis=0) - u.sum(axis=0)
        info += np.einsum("l,lij->ij", 1.0 / denoms, sq) - u.T @ u
    return ll, score, info


def cox_fit(records, covariate_names, ties: str = "efron") -> CoxFit:
    """Newton-Raphson maximization of the Cox partial likelihood.

    Converges when the score's infinity norm drops below 1e-8 (at most 50
    iterations, with step halving); a fit that stops early is returned with
    ``converged=False`` rather than raised.
    """
    if ties not in ("efron", "breslow"):
        raise InvalidInputError(f"unknown tie method {ties!r}")
    names = list(covariate_names)
    if not names:
        raise InvalidInputError("need at least one covariate")
    times, events, x = _design_matrix(records, names)
    n_events = int(events.sum())
    if n_events == 0:
        raise NoEventsError("no observed events; partial likelihood is undefined")
    _check_full_rank(x, names)

    beta = np.zeros(len(names))
    ll, score, info = _cox_pass(times, events, x, beta, ties)
    converged = False
    iterations = 0
    for iterations in range(1, 51):
        if np.max(np.abs(score)) < 1e-8:
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise CollinearityError("singular information matrix") from None
        # Step halving keeps the likelihood non-decreasing.
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            new_ll, new_score, new_info = _cox_pass(times, events, x, candidate, ties)
            if np.isfinite(new_ll) and new_ll >= ll - 1e-12:
                break
            scale /= 2
        beta, ll, score, info = candidate, new_ll, new_score, new_info
    else:
        iterations = 50
    if np.max(np.abs(score)) < 1e-8:
        converged = True

    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        if converged:
            raise CollinearityError("information matrix not invertible at the optimum")
        covariance = np.linalg.pinv(info)  # divergent fit stays inspectable
    se = np.sqrt(np.maximum(np.diag(covariance), 0.0))
    z = np.divide(beta, se, out=np.zeros_like(beta), where=se > 0)
    p_values = 2.0 * norm.sf(np.abs(z))
    with np.errstate(over="ignore"):
        ci = np.stack([np.exp(beta - Z95 * se), np.exp(beta + Z95 * se)], axis=1)
    with np.errstate(over="ignore"):
        hazard_ratios = np.exp(beta)
    return CoxFit(
        covariate_names=names,
        coefficients=beta,
        covariance=covariance,
        hazard_ratios=hazard_ratios,
        ci95=ci,
        p_values=p_values,
        n_events=n_events,
        converged=converged,
        iterations=iterations,
        log_likelihood=ll,
        max_score=float(np.max(np.abs(score))),
        ties=ties,
    )


@dataclass
class KmCurve:
    times: np.ndarray  # distinct event times, ascending
    survival: np.ndarray  # product-limit estimate, non-increasing from 1
    at_risk: np.ndarray
    n_events: np.ndarray
    greenwood_var: np.ndarray

    def confidence_band(self, z: float = Z95):
        se = np.sqrt(self.greenwood_var)
        return (
            np.clip(self.survival - z * se, 0.0, 1.0),
            np.clip(self.survival + z * se, 0.0, 1.0),
        )


def km_estimate(records) -> KmCurve:
    """Kaplan-Meier product-limit estimator with Greenwood variance."""
    if not records:
        raise InvalidInputError("cannot estimate survival from an empty dataset")
    times = np.asarray([r.time for r in records], dtype=float)
    events = np.asarray([r.event for r in records], dtype=int)
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]
    n = times.size

    out_times, out_surv, out_risk, out_events, out_var = [], [], [], [], []
    surv = 1.0
    greenwood_sum = 0.0
    start = 0
    while start < n:
        stop = start
        while stop < n and times[stop] == times[start]:
            stop += 1
        d = int(events[start:stop].sum())
        at_risk = n - start
        if d:
            surv *= 1.0 - d / at_risk
            if at_risk > d:
                greenwood_sum += d / (at_risk * (at_risk - d))
                var = surv * surv * greenwood_sum
            else:
                var = 0.0  # curve hit zero; variance degenerates
            out_times.append(times[start])
            out_surv.append(surv)
            out_risk.append(at_risk)
            out_events.append(d)
            out_var.append(var)
        start = stop
    return KmCurve(
        times=np.asarray(out_times),
        survival=np.asarray(out_surv),
        at_risk=np.asarray(out_risk, dtype=int),
        n_events=np.asarray(out_events, dtype=int),
        greenwood_var=np.asarray(out_var),
    )


def log_rank(group_a, group_b) -> tuple[float, float]:
    """Two-group log-rank test: (chi-square statistic, 1-df p-value)."""
    if not group_a or not group_b:
        raise InvalidInputError("both groups must be non-empty")
    t_a = np.asarray([r.time for r in group_a])
    e_a = np.asarray([r.event for r in group_a])
    t_b = np.asarray([r.time for r in group_b])
    e_b = np.asarray([r.event for r in group_b])
    if e_a.sum() + e_b.sum() == 0:
        raise UndefinedStatisticError("no events in either group")

    event_times = np.unique(np.concatenate([t_a[e_a == 1], t_b[e_b == 1]]))
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        n1 = int((t_a >= t).sum())
        n2 = int((t_b >= t).sum())
        d1 = int(((t_a == t) & (e_a == 1)).sum())
        d2 = int(((t_b == t) & (e_b == 1)).sum())
        n = n1 + n2
        d = d1 + d2
        if n < 2:
            continue
        observed_minus_expected += d1 - d * n1 / n
        variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance <= 0:
        raise UndefinedStatisticError("log-rank variance is zero")
    statistic = observed_minus_expected**2 / variance
    return float(statistic), float(chi2.sf(statistic, df=1))


# Harrell's default knot quantiles per knot count.
_RCS_QUANTILES = {
    3: (0.10, 0.50, 0.90),
    4: (0.05, 0.35, 0.65, 0.95),
    5: (0.05, 0.275, 0.50, 0.725, 0.95),
    6: (0.05, 0.23, 0.41, 0.59, 0.77, 0.95),
    7: (0.025, 0.1833, 0.3417, 0.50, 0.6583, 0.8167, 0.975),
}


def rcs_knots(x: np.ndarray, n_knots: int) -> np.ndarray:
    if n_knots not in _RCS_QUANTILES:
        raise InvalidInputError("n_knots must be between 3 and 7")
    x = np.asarray(x, dtype=float)
    knots = np.quantile(x, _RCS_QUANTILES[n_knots])
    if np.unique(knots).size != n_knots:
        raise InvalidInputError(
            f"too few distinct values for {n_knots} knots (got knots {knots})"
        )
    return knots


def rcs_basis(x: np.ndarray, n_knots: int, knots: np.ndarray | None = None):
    """Restricted (natural) cubic spline design matrix.

    Columns: x itself plus n_knots - 2 truncated-cubic terms constrained to
    be linear beyond the boundary knots, normalized by the squared knot
    span. Returns (design (n, n_knots - 1), knots).
    """
    x = np.asarray(x, dtype=float)
    if knots is None:
        knots = rcs_knots(x, n_knots)
    else:
        knots = np.asarray(knots, dtype=float)
        if knots.size != n_knots or np.any(np.diff(knots) <= 0):
            raise InvalidInputError("knots must be strictly increasing, length n_knots")

    t = knots
    k = n_knots
    span_sq = (t[-1] - t[0]) ** 2

    def plus_cubed(v):
        return np.maximum(v, 0.0) ** 3

    columns = [x]
    for j in range(k - 2):
        term = (
            plus_cubed(x - t[j])
            - plus_cubed(x - t[k - 2]) * (t[k - 1] - t[j]) / (t[k - 1] - t[k - 2])
            + plus_cubed(x - t[k - 1]) * (t[k - 2] - t[j]) / (t[k - 1] - t[k - 2])
        )
        columns.append(term / span_sq)
    return np.column_stack(columns), knots


@dataclass
class HrCurve:
    gaps: np.ndarray
    hazard_ratio: np.ndarray  # referenced to gap 0
    ci_low: np.ndarray
    ci_high: np.ndarray
    knots: np.ndarray
    fit: CoxFit


def hr_curve(
    records,
    gaps: np.ndarray,
    eval_gaps: np.ndarray,
    n_knots: int = 4,
    adjust: tuple[str, ...] = (),
    ties: str = "efron",
) -> HrCurve:
    """Spline hazard-ratio curve HR(gap) = exp(f(gap) - f(0)), CI by delta method."""
    gaps = np.asarray(gaps, dtype=float)
    if len(records) != gaps.size:
        raise InvalidInputError("records and gaps must align")
    basis, knots = rcs_basis(gaps, n_knots)
    spline_names = [f"gap_s{j}" for j in range(basis.shape[1])]
    augmented = []
    for record, row in zip(records, basis):
        cov = dict(record.covariates)
        cov.update({name: float(v) for name, v in zip(spline_names, row)})
        augmented.append(SurvivalRecord(record.time, record.event, cov))

    fit = cox_fit(augmented, spline_names + list(adjust), ties=ties)
    spline_idx = np.arange(len(spline_names))
    beta = fit.coefficients[spline_idx]
    cov = fit.covariance[np.ix_(spline_idx, spline_idx)]

    eval_gaps = np.asarray(eval_gaps, dtype=float)
    basis_eval, _ = rcs_basis(eval_gaps, n_knots, knots=knots)
    basis_zero, _ = rcs_basis(np.zeros(1), n_knots, knots=knots)
    delta = basis_eval - basis_zero
    log_hr = delta @ beta
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", delta, cov, delta), 0.0))
    with np.errstate(over="ignore"):
        return HrCurve(
            gaps=eval_gaps,
            hazard_ratio=np.exp(log_hr),
            ci_low=np.exp(log_hr - Z95 * se),
            ci_high=np.exp(log_hr + Z95 * se),
            knots=knots,
            fit=fit,
        )


@dataclass
class LogisticFit:
    covariate_names: list[str]  # includes "intercept" first
    coefficients: np.ndarray
    covariance: np.ndarray
    odds_ratios: np.ndarray
    ci95: np.ndarray
    p_values: np.ndarray
    converged: bool
    separated: bool
    iterations: int
    log_likelihood: float


def logistic_fit(outcomes, covariates, names=None, max_iter: int = 50) -> LogisticFit:
    """Newton-Raphson (IRLS) logistic regression with an intercept.

    Quasi-separation is flagged (diverging coefficients), not raised.
    """
    y = np.asarray(outcomes, dtype=float).ravel()
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise InvalidInputError("outcomes and covariates must align")
    if not ((y == 0) | (y == 1)).all():
        raise InvalidInputError("outcomes must be 0/1")
    if y.min() == y.max():
        raise InvalidInputError("both outcome classes must be present")
    if names is None:
        names = [f"x{j}" for j in range(x.shape[1])]
    names = ["intercept"] + list(names)
    design = np.column_stack([np.ones(y.size), x])
    if x.shape[1]:
        _check_full_rank(x, names[1:])

    beta = np.zeros(design.shape[1])
    converged = False
    separated = False
    ll = -np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = design @ beta
        prob = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
        score = design.T @ (y - prob)
        if np.max(np.abs(score)) < 1e-8:
            converged = True
            break
        w = np.maximum(prob * (1.0 - prob), 1e-12)
        info = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise CollinearityError("singular information matrix") from None
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            eta_c = np.clip(design @ candidate, -700, 700)
            new_ll = float(y @ eta_c - np.logaddexp(0.0, eta_c).sum())
            if np.isfinite(new_ll) and new_ll >= ll - 1e-12:
                break
            scale /= 2
        beta, ll = candidate, new_ll
        if np.max(np.abs(beta)) > 30:
            break

    # Quasi-separation drives coefficients toward infinity; the score can
    # still vanish once the probabilities saturate, so flag on magnitude.
    if np.max(np.abs(beta)) > 15:
        separated = True
        converged = False

    eta = design @ beta
    prob = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
    w = np.maximum(prob * (1.0 - prob), 1e-12)
    info = design.T @ (design * w[:, None])
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise CollinearityError("information matrix not invertible") from None
    se = np.sqrt(np.maximum(np.diag(covariance), 0.0))
    z = np.divide(beta, se, out=np.zeros_like(beta), where=se > 0)
    with np.errstate(over="ignore"):
        odds_ratios = np.exp(beta)
        ci95 = np.stack([np.exp(beta - Z95 * se), np.exp(beta + Z95 * se)], axis=1)
    return LogisticFit(
        covariate_names=names,
        coefficients=beta,
        covariance=covariance,
        odds_ratios=odds_ratios,
        ci95=ci95,
        p_values=2.0 * norm.sf(np.abs(z)),
        converged=converged,
        separated=separated,
        iterations=iterations,
        log_likelihood=float(y @ eta - np.logaddexp(0.0, eta).sum()),
    )


class GapStratum(enum.Enum):
    """Three-way classification of the predicted-minus-calendar age gap."""

    UNDERESTIMATION = "underestimation"
    CORRECT = "correct"
    OVERESTIMATION = "overestimation"


def stratify_gap(gaps, threshold: float) -> list[GapStratum]:
    """Classify each gap; the correct band is the closed interval [-t, t]."""
    if not threshold > 0:
        raise InvalidInputError("threshold must be positive")
    out = []
    for gap in np.asarray(gaps, dtype=float).ravel():
        if gap < -threshold:
            out.append(GapStratum.UNDERESTIMATION)
        elif gap > threshold:
            out.append(GapStratum.OVERESTIMATION)
        else:
            out.append(GapStratum.CORRECT)
    return out


class SerialGroup(enum.Enum):
    """Two-visit trajectory of the overestimation flag.

    G1: overestimation at both visits; G2: overestimation only at the
    second; G3: only at the first; G4: at neither (the reference group).
    """

    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    G4 = "G4"


def serial_groups(
    first_gaps, second_gaps, threshold: float
) -> tuple[list[SerialGroup | None], int]:
    """Group subjects by their visit-pair strata; NaN pairs are excluded.

    Returns the per-subject groups (None where a visit is missing) and the
    count of excluded subjects.
    """
    first = np.asarray(first_gaps, dtype=float).ravel()
    second = np.asarray(second_gaps, dtype=float).ravel()
    if first.shape != second.shape:
        raise InvalidInputError("paired visits required (equal-length gap arrays)")
    groups: list[SerialGroup | None] = []
    excluded = 0
    for g1, g2 in zip(first, second):
        if not (np.isfinite(g1) and np.isfinite(g2)):
            groups.append(None)
            excluded += 1
            continue
        over_first = g1 > threshold
        over_second = g2 > threshold
        if over_first and over_second:
            groups.append(SerialGroup.G1)
        elif over_second:
            groups.append(SerialGroup.G2)
        elif over_first:
            groups.append(SerialGroup.G3)
        else:
            groups.append(SerialGroup.G4)
    return groups, excluded


def agreement_metrics(predictions, labels) -> tuple[float, float]:
    """(Pearson correlation, MAE in years)."""
    predictions = np.asarray(predictions, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if predictions.shape != labels.shape or predictions.size < 2:
        raise InvalidInputError("need two aligned samples or more")
    mae = float(np.mean(np.abs(predictions - labels)))
    dp = predictions - predictions.mean()
    dl = labels - labels.mean()
    denom = np.sqrt((dp * dp).sum() * (dl * dl).sum())
    if denom == 0:
        raise UndefinedStatisticError("correlation undefined for zero variance")
    return float((dp * dl).sum() / denom), mae
