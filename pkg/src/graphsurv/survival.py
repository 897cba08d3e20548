"""Survival statistics: discrete-time hazard loss, concordance, Kaplan-Meier,
log-rank, and a Newton-Raphson Cox proportional-hazards fitter.

The chi-square tail probability is computed from the regularized upper
incomplete gamma function (series for the lower tail, modified Lentz
continued fraction for the upper) so p-values need no stats dependency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .common import DataError, NumericError
from .ingest import SurvivalLabel, TimeBins

COX_SEPARATION_BOUND = 50.0


# ---------------------------------------------------------------------------
# discrete-time hazard loss
# ---------------------------------------------------------------------------

def nll_survival_loss(slide_risk: ad.Tensor, bin_offsets: ad.Tensor,
                      label: SurvivalLabel, bins: TimeBins) -> ad.Tensor:
    """Negative log-likelihood of one slide under per-bin logistic hazards.

    The hazard in bin t is sigmoid(slide_risk + offset_t). An event in bin
    k contributes -log h_k - sum_{t<k} log(1 - h_t); a censored slide
    contributes -sum_{t<=k} log(1 - h_t). Both are assembled from
    softplus so no probability is ever materialized near 0 or 1.
    """
    n_bins = bins.n_bins
    if slide_risk.shape != (1, 1):
        raise ValueError(f"slide risk must be 1x1, got {slide_risk.shape}")
    if bin_offsets.shape != (1, n_bins):
        raise ValueError(f"bin offsets must be 1x{n_bins}, got {bin_offsets.shape}")
    k = bins.bin_index(label.time_months)
    z = ad.add(ad.matmul(slide_risk, ad.constant(np.ones((1, n_bins)))), bin_offsets)
    event_mask = np.zeros((1, n_bins))
    survive_mask = np.zeros((1, n_bins))
    if label.event == 1:
        event_mask[0, k] = 1.0
        survive_mask[0, :k] = 1.0
    else:
        survive_mask[0, :k + 1] = 1.0
    # -log h = softplus(-z), -log(1-h) = softplus(z)
    return ad.sum_all(ad.add(
        ad.mul(ad.softplus(z), ad.constant(survive_mask)),
        ad.mul(ad.softplus(ad.scalar_mul(z, -1.0)), ad.constant(event_mask))))


# ---------------------------------------------------------------------------
# concordance
# ---------------------------------------------------------------------------

def concordance_index(times, events, risks) -> float:
    """Harrell's C: P(higher risk | earlier event) over comparable pairs.

    A pair (i, j) is comparable iff t_i < t_j and subject i had the event;
    tied risks count one half.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    r = np.asarray(risks, dtype=np.float64)
    if not (t.shape == e.shape == r.shape) or t.ndim != 1:
        raise DataError("concordance_index: times/events/risks must be equal-length vectors")
    comparable = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise NumericError("concordance_index: no comparable pairs")
    concordant = int(((r[:, None] > r[None, :]) & comparable).sum())
    tied = int(((r[:, None] == r[None, :]) & comparable).sum())
    return (concordant + 0.5 * tied) / n_pairs


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank
# ---------------------------------------------------------------------------

@dataclass
class KMCurve:
    times: np.ndarray     # distinct event times, ascending
    survival: np.ndarray  # product-limit estimate after each event time
    at_risk: np.ndarray
    events: np.ndarray


def kaplan_meier(times, events) -> KMCurve:
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if t.size == 0:
        raise DataError("kaplan_meier: empty sample")
    event_times = np.unique(t[e == 1])
    surv = 1.0
    survival, at_risk, n_events = [], [], []
    for et in event_times:
        n = int((t >= et).sum())
        d = int(((t == et) & (e == 1)).sum())
        surv *= 1.0 - d / n
        survival.append(surv)
        at_risk.append(n)
        n_events.append(d)
    return KMCurve(times=event_times, survival=np.array(survival),
                   at_risk=np.array(at_risk, dtype=np.int64),
                   events=np.array(n_events, dtype=np.int64))


def log_rank_test(times_a, events_a, times_b, events_b) -> tuple[float, float]:
    """Two-group log-rank statistic and its chi-square(1) p-value.

    Degenerate tables with zero total variance return (0.0, 1.0).
    """
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=np.int64)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=np.int64)
    if ta.size == 0 or tb.size == 0:
        raise DataError("log_rank_test: both groups must be non-empty")
    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    o_minus_e = 0.0
    var = 0.0
    for et in event_times:
        na = int((ta >= et).sum())
        nb = int((tb >= et).sum())
        n = na + nb
        da = int(((ta == et) & (ea == 1)).sum())
        db = int(((tb == et) & (eb == 1)).sum())
        d = da + db
        o_minus_e += da - d * na / n
        if n > 1:
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if var == 0.0:
        return 0.0, 1.0
    chi2 = o_minus_e * o_minus_e / var
    return chi2, chi2_sf(chi2, 1)


# ---------------------------------------------------------------------------
# chi-square survival function
# ---------------------------------------------------------------------------

def _lower_gamma_series(a: float, s: float) -> float:
    """Regularized lower incomplete gamma P(a, s) by its power series."""
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(500):
        denom += 1.0
        term *= s / denom
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-s + a * math.log(s) - math.lgamma(a))


def _upper_gamma_cf(a: float, s: float) -> float:
    """Regularized upper incomplete gamma Q(a, s) by modified Lentz continued fraction."""
    tiny = 1e-300
    b = s + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0 else 1.0 / tiny
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-s + a * math.log(s) - math.lgamma(a))


def chi2_sf(x: float, k: int) -> float:
    """P(X >= x) for X ~ chi-square with k degrees of freedom."""
    if k < 1:
        raise DataError(f"chi2_sf: degrees of freedom must be >= 1, got {k}")
    if not np.isfinite(x):
        raise NumericError(f"chi2_sf: non-finite statistic {x}")
    if x < 0:
        raise DataError(f"chi2_sf: statistic must be non-negative, got {x}")
    if x == 0.0:
        return 1.0
    a = k / 2.0
    s = x / 2.0
    if s < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _lower_gamma_series(a, s)))
    return min(1.0, max(0.0, _upper_gamma_cf(a, s)))


# ---------------------------------------------------------------------------
# Cox proportional hazards (Breslow ties)
# ---------------------------------------------------------------------------

@dataclass
class CoxModel:
    gammas: np.ndarray
    ses: np.ndarray
    zs: np.ndarray
    ps: np.ndarray
    loglik: float
    converged: bool
    n_events: int


def _breslow_terms(xs: np.ndarray, first_eq: np.ndarray, e: np.ndarray, beta: np.ndarray):
    """Log partial likelihood, gradient and Hessian at beta (sorted inputs)."""
    n, p = xs.shape
    eta = xs @ beta
    eta = eta - eta.max()  # common shift cancels in every ratio and log-difference
    w = np.exp(eta)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * xs)[::-1], axis=0)[::-1]
    outer = w[:, None, None] * (xs[:, :, None] * xs[:, None, :])
    s2 = np.cumsum(outer[::-1], axis=0)[::-1]
    ev = np.flatnonzero(e == 1)
    f = first_eq[ev]
    xbar = s1[f] / s0[f, None]
    loglik = float(np.sum(eta[ev] - np.log(s0[f])))
    grad = (xs[ev] - xbar).sum(axis=0)
    hess = -(s2[f] / s0[f, None, None] - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
    return loglik, grad, hess


def cox_fit(x, times, events, max_iter: int = 60, tol: float = 1e-10) -> CoxModel:
    """Newton-Raphson Breslow partial-likelihood fit with step halving.

    Features are standardized internally; coefficients and standard errors
    are reported on the original scale. A fit whose standardized
    coefficient magnitude exceeds COX_SEPARATION_BOUND is flagged as not
    converged (monotone likelihood / separation).
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != t.size or t.shape != e.shape:
        raise DataError("cox_fit: x must be (n, p) aligned with times/events")
    n, p = x.shape
    if p == 0:
        raise DataError("cox_fit: need at least one feature")
    n_events = int(e.sum())
    if n_events == 0:
        raise NumericError("cox_fit: no events in sample")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    if np.any(sd == 0):
        j = int(np.argmax(sd == 0))
        raise NumericError(f"cox_fit: feature {j} has zero variance")
    xs = (x - mu) / sd

    order = np.argsort(t, kind="stable")
    xs = xs[order]
    ts = t[order]
    es = e[order]
    first_eq = np.searchsorted(ts, ts, side="left")

    beta = np.zeros(p)
    loglik, grad, hess = _breslow_terms(xs, first_eq, es, beta)
    converged = False
    for _ in range(max_iter):
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise NumericError("cox_fit: singular information matrix") from None
        step = 1.0
        accepted = False
        for _ in range(40):
            cand = beta + step * delta
            cand_ll, cand_grad, cand_hess = _breslow_terms(xs, first_eq, es, cand)
            if cand_ll >= loglik - 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = np.max(np.abs(grad)) < 1e-9
            break
        improved = cand_ll - loglik
        beta, loglik, grad, hess = cand, cand_ll, cand_grad, cand_hess
        if improved < tol and np.max(np.abs(grad)) < 1e-9:
            converged = True
            break
    try:
        cov = np.linalg.inv(-hess)
        se_std = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se_std = np.zeros(p)
    # flat curvature at the endpoint means a monotone likelihood; report the
    # runaway coefficient with an infinite standard error instead of raising
    if np.any(se_std == 0):
        converged = False
        se_std = np.where(se_std == 0, np.inf, se_std)
    # separation also shows up as a runaway coefficient or an absurd
    # standardized standard error on an otherwise invertible plateau
    if np.max(np.abs(beta)) > COX_SEPARATION_BOUND or np.max(se_std) > COX_SEPARATION_BOUND:
        converged = False
    gammas = beta / sd
    ses = se_std / sd
    zs = gammas / ses
    ps = np.array([chi2_sf(z * z, 1) for z in zs])
    return CoxModel(gammas=gammas, ses=ses, zs=zs, ps=ps,
                    loglik=loglik, converged=converged, n_events=n_events)


def _sorted_views(x, times, events):
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    ts = t[order]
    return x[order], ts, e[order], np.searchsorted(ts, ts, side="left")


def cox_loglik(x, times, events, beta) -> float:
    """Breslow log partial likelihood at a raw-scale coefficient vector."""
    xs, _, es, first_eq = _sorted_views(x, times, events)
    ll, _, _ = _breslow_terms(xs, first_eq, es, np.asarray(beta, dtype=np.float64))
    return ll


def cox_gradient(x, times, events, beta) -> np.ndarray:
    """Gradient of the Breslow log partial likelihood at a raw-scale vector."""
    xs, _, es, first_eq = _sorted_views(x, times, events)
    _, grad, _ = _breslow_terms(xs, first_eq, es, np.asarray(beta, dtype=np.float64))
    return grad


# ---------------------------------------------------------------------------
# exporters
# ---------------------------------------------------------------------------

def write_km_csv(curves: dict[str, KMCurve], path) -> None:
    """group,time,survival,at_risk,events rows, groups in insertion order."""
    path = Path(path)
    with open(path, "w") as f:
        f.write("group,time,survival,at_risk,events\n")
        for group, curve in curves.items():
            for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
                f.write(f"{group},{float(t)!r},{float(s)!r},{int(n)},{int(d)}\n")


def write_cox_json(model: CoxModel, feature_names, path) -> None:
    payload = {
        "features": [
            {"name": name, "gamma": float(g), "se": float(s),
             "z": float(z), "p": float(p)}
            for name, g, s, z, p in zip(feature_names, model.gammas, model.ses,
                                        model.zs, model.ps)
        ],
        "loglik": float(model.loglik),
        "converged": bool(model.converged),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
