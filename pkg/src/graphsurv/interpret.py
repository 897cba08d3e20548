"""Interpretability outputs: patch risk maps, median-split survival curves,
and a rank-based pseudo-time Cox analysis of cell statistics.

The pseudo-time analysis relates cell composition to the model's risk
ordering: the top-k and bottom-k low-scale patches of each slide are
selected by risk, every contained high-scale patch contributes its cell
statistics as one observation (inheriting the parent's risk), rows are
ranked by risk (highest risk gets the earliest pseudo-time, all rows
counted as events), and a proportional-hazards fit on those pseudo-times
yields one coefficient per cell feature. A positive coefficient means
the feature rises with predicted risk. Only ranks of the risks enter,
so the fitted signs are invariant to monotone transforms of the risk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .common import DataError, NumericError
from .ingest import Cohort, SlideBundle
from .model import SurvivalModel, prepare_inputs
from .survival import CoxModel, KMCurve, cox_fit, kaplan_meier, log_rank_test


@dataclass
class RiskMapRow:
    slide_id: str
    patch_id: int
    x_um: float
    y_um: float
    risk: float


def slide_patch_risks(model: SurvivalModel, slide: SlideBundle,
                      half_width: float = 128.0) -> np.ndarray:
    """Per-patch risks for one slide, evaluation mode (no tape)."""
    inputs = prepare_inputs(slide, model.config, half_width)
    with ad.no_grad():
        risks, _ = model.forward(inputs)
    return risks.values[:, 0].copy()


def risk_map(model: SurvivalModel, cohort: Cohort,
             slide_ids: list[str] | None = None) -> list[RiskMapRow]:
    ids = cohort.slide_ids() if slide_ids is None else slide_ids
    half = cohort.footprint_half_width()
    rows = []
    for sid in ids:
        slide = cohort.by_id(sid)
        risks = slide_patch_risks(model, slide, half)
        for rec, r in zip(slide.low, risks):
            rows.append(RiskMapRow(slide_id=sid, patch_id=rec.patch_id,
                                   x_um=rec.x_um, y_um=rec.y_um, risk=float(r)))
    return rows


def write_risk_map_csv(rows: list[RiskMapRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slide_id", "patch_id", "x_um", "y_um", "risk"])
        for r in rows:
            w.writerow([r.slide_id, r.patch_id, repr(r.x_um), repr(r.y_um), repr(r.risk)])


# ---------------------------------------------------------------------------
# median split
# ---------------------------------------------------------------------------

def median_split(risks) -> np.ndarray:
    """Boolean mask of the high-risk group; risks at the median go low."""
    r = np.asarray(risks, dtype=np.float64)
    return r > np.median(r)


def median_split_km(times, events, risks) -> tuple[dict[str, KMCurve], float, float]:
    """Kaplan-Meier curves for the median-split groups plus the log-rank test."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    high = median_split(risks)
    if not high.any() or high.all():
        raise NumericError("median_split_km: all risks fall on one side of the median")
    curves = {"high": kaplan_meier(t[high], e[high]),
              "low": kaplan_meier(t[~high], e[~high])}
    chi2, p = log_rank_test(t[high], e[high], t[~high], e[~high])
    return curves, chi2, p


# ---------------------------------------------------------------------------
# extreme-patch pseudo-time Cox
# ---------------------------------------------------------------------------

@dataclass
class CellObservation:
    """One high-scale patch under an extreme-risk low patch.

    High patches inherit the parent's risk (the head scores low nodes);
    cell statistics live on the high patch itself.
    """
    slide_id: str
    patch_id: int  # high-scale patch id
    risk: float    # risk of the containing low patch
    stats: np.ndarray  # (p,) cell statistics of this high patch


def select_extreme_patches(patch_ids, risks, k: int) -> tuple[list[int], list[int]]:
    """Top-k and bottom-k patch ids by risk; risk ties resolve by patch id.

    k is clamped to the patch count, so k >= n selects every patch in
    both lists. Output depends only on the (id, risk) pairs, not their
    input order.
    """
    ids = np.asarray(patch_ids, dtype=np.int64)
    r = np.asarray(risks, dtype=np.float64)
    if ids.shape != r.shape or ids.ndim != 1:
        raise DataError("select_extreme_patches: ids and risks must align")
    if ids.size != np.unique(ids).size:
        raise DataError("select_extreme_patches: duplicate patch ids")
    if k < 1:
        raise DataError("select_extreme_patches: k must be >= 1")
    k = min(k, ids.size)
    top_order = np.lexsort((ids, -r))
    bottom_order = np.lexsort((ids, r))
    return [int(ids[i]) for i in top_order[:k]], [int(ids[i]) for i in bottom_order[:k]]


def collect_extreme_observations(model: SurvivalModel, cohort: Cohort,
                                 slide_ids: list[str], k: int) -> list[CellObservation]:
    """Cell statistics of every high patch under an extreme-risk low patch.

    Low patches selected by both the top and bottom rule contribute once.
    High patches without recorded cell statistics are skipped.
    """
    half = cohort.footprint_half_width()
    obs: list[CellObservation] = []
    for sid in slide_ids:
        slide = cohort.by_id(sid)
        inputs = prepare_inputs(slide, model.config, half)
        with ad.no_grad():
            risks = model.forward(inputs)[0].values[:, 0]
        ids = np.array([rec.patch_id for rec in slide.low], dtype=np.int64)
        top, bottom = select_extreme_patches(ids, risks, k)
        selected = list(dict.fromkeys(top + bottom))
        risk_by_id = dict(zip(ids.tolist(), risks.tolist()))
        pos_by_id = {int(pid): i for i, pid in enumerate(ids)}
        for pid in selected:
            for child in inputs.graph.children[pos_by_id[pid]]:
                high_id = slide.high[int(child)].patch_id
                stats = slide.cell_rows_for([high_id])
                if stats.shape[0] == 0:
                    continue
                obs.append(CellObservation(slide_id=sid, patch_id=high_id,
                                           risk=float(risk_by_id[pid]),
                                           stats=stats[0]))
    return obs


def pseudo_times(observations: list[CellObservation]) -> np.ndarray:
    """Ranks 1..n, highest risk first; ties break by (slide_id, patch_id)."""
    order = sorted(range(len(observations)),
                   key=lambda i: (-observations[i].risk,
                                  observations[i].slide_id,
                                  observations[i].patch_id))
    times = np.empty(len(observations))
    for rank, i in enumerate(order, start=1):
        times[i] = float(rank)
    return times


def cell_cox_analysis(observations: list[CellObservation]) -> CoxModel:
    """Pseudo-time proportional-hazards fit of cell statistics to risk order."""
    if not observations:
        raise DataError("cell_cox_analysis: no observations")
    p = observations[0].stats.shape[0]
    if len(observations) < p + 2:
        raise DataError(f"cell_cox_analysis: need at least {p + 2} observations")
    x = np.stack([o.stats for o in observations])
    times = pseudo_times(observations)
    events = np.ones(len(observations), dtype=np.int64)
    return cox_fit(x, times, events)


def _normalize_columns(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mean) / sd


def write_feature_distribution_csv(observations: list[CellObservation],
                                   model: CoxModel, feature_names, path) -> None:
    """feature,min,q1,median,q3,max,gamma,z,p; summaries over normalized columns."""
    x = _normalize_columns(np.stack([o.stats for o in observations]))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["feature", "min", "q1", "median", "q3", "max", "gamma", "z", "p"])
        for j, name in enumerate(feature_names):
            col = x[:, j]
            q1, med, q3 = np.quantile(col, [0.25, 0.5, 0.75])
            w.writerow([name, repr(float(col.min())), repr(float(q1)), repr(float(med)),
                        repr(float(q3)), repr(float(col.max())),
                        repr(float(model.gammas[j])), repr(float(model.zs[j])),
                        repr(float(model.ps[j]))])
