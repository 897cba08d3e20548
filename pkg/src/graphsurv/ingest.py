"""Cohort data model, on-disk format, and the synthetic cohort generator.

On-disk layout (all paths relative to the manifest):
  manifest.json                week-typed cohort header, see ``write_cohort``
  slides/<id>.patches.csv      patch_id,scale,x_um,y_um,type_id,feat_row
  slides/<id>.low.f32          float32 little-endian row-major feature matrix
  slides/<id>.low.f32.meta.json   {"rows": int, "cols": int}
  slides/<id>.high.f32 (+meta) high-scale features
  slides/<id>.cells.csv        patch_id,<cell feature names...>

The synthetic generator plants two survival signals (documented in the
README): slide hazard rises with tumor fraction and falls with
lymphocyte infiltration, both measurable from the emitted cell
statistics, so end-to-end recovery of the signs is testable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import DataError, NumericError, rng_for

SCALE_LOW = "L"
SCALE_HIGH = "H"

DEFAULT_TYPE_VOCAB = ("neoplastic", "inflammatory", "connective", "dead", "epithelial")
TUMOR_TYPE = 0
INFLAMMATORY_TYPE = 1

LOW_PATCH_PITCH_UM = 256.0
HIGH_PATCH_PITCH_UM = 128.0

# duplicate quantile edges are nudged apart by the smallest increment of the
# time scale we care about
TIME_RESOLUTION_MONTHS = 1e-3


@dataclass(frozen=True)
class SurvivalLabel:
    time_months: float
    event: int

    def __post_init__(self):
        if not (np.isfinite(self.time_months) and self.time_months > 0):
            raise DataError(f"survival time must be positive and finite, got {self.time_months}")
        if self.event not in (0, 1):
            raise DataError(f"event flag must be 0 or 1, got {self.event}")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    scale: str
    x_um: float
    y_um: float
    type_id: int | None
    feat_row: int


@dataclass
class SlideBundle:
    """One slide's patches at both scales, cell statistics, and label."""

    slide_id: str
    low: list[PatchRecord]
    high: list[PatchRecord]
    features_low: np.ndarray   # float32 (n_low, d)
    features_high: np.ndarray  # float32 (n_high, d)
    cell_ids: np.ndarray       # int, high-scale patch ids with cell statistics
    cell_values: np.ndarray    # float64 (len(cell_ids), p)
    label: SurvivalLabel
    true_log_hazard: float | None = None

    def coords_low(self) -> np.ndarray:
        return np.array([[r.x_um, r.y_um] for r in self.low], dtype=np.float64)

    def coords_high(self) -> np.ndarray:
        return np.array([[r.x_um, r.y_um] for r in self.high], dtype=np.float64)

    def types_high(self) -> np.ndarray:
        return np.array([r.type_id for r in self.high], dtype=np.int64)

    def x_low(self) -> np.ndarray:
        rows = np.array([r.feat_row for r in self.low], dtype=np.int64)
        return self.features_low[rows].astype(np.float64)

    def x_high(self) -> np.ndarray:
        rows = np.array([r.feat_row for r in self.high], dtype=np.int64)
        return self.features_high[rows].astype(np.float64)

    def cell_rows_for(self, patch_ids) -> np.ndarray:
        """Cell-stat rows for the given high-scale patch ids (missing ids skipped)."""
        index = {int(pid): i for i, pid in enumerate(self.cell_ids)}
        rows = [index[int(p)] for p in patch_ids if int(p) in index]
        return self.cell_values[rows] if rows else np.zeros((0, self.cell_values.shape[1]))


@dataclass
class Cohort:
    slides: list[SlideBundle]
    d: int
    p: int
    type_vocab: tuple[str, ...]
    cell_feature_names: tuple[str, ...]
    mpp_low: float = 1.0

    def __post_init__(self):
        if not self.slides:
            raise DataError("cohort must contain at least one slide")
        if len(self.type_vocab) != 5:
            raise DataError("type vocabulary must list exactly 5 names")
        if len(self.cell_feature_names) != self.p:
            raise DataError("cell feature name list must have length p")

    def slide_ids(self) -> list[str]:
        return [s.slide_id for s in self.slides]

    def by_id(self, slide_id: str) -> SlideBundle:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    def labels(self) -> list[SurvivalLabel]:
        return [s.label for s in self.slides]

    def footprint_half_width(self) -> float:
        return 128.0 * self.mpp_low


@dataclass
class FoldPlan:
    n_folds: int
    assignments: list[dict[str, list[str]]]  # keys: train / val / test


@dataclass
class TimeBins:
    """Interval edges partitioning (0, inf) into len(edges)+1 bins."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.size and np.any(np.diff(self.edges) <= 0):
            raise DataError("time bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return self.edges.size + 1

    def bin_index(self, time_months: float) -> int:
        if not np.isfinite(time_months):
            raise DataError(f"time is not finite: {time_months}")
        return int(np.searchsorted(self.edges, time_months, side="right"))


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def _validate_slide(slide: SlideBundle, d: int, p: int, half_width: float) -> None:
    sid = slide.slide_id
    if not slide.low or not slide.high:
        raise DataError(f"slide {sid}: needs at least one patch at each scale")
    for scale_name, records in (("low", slide.low), ("high", slide.high)):
        ids = [r.patch_id for r in records]
        if len(set(ids)) != len(ids):
            raise DataError(f"slide {sid}: duplicate {scale_name}-scale patch ids")
        for r in records:
            if not (np.isfinite(r.x_um) and np.isfinite(r.y_um)):
                raise DataError(f"slide {sid}: patch {r.patch_id} has non-finite coordinates")
    for r in slide.low:
        if r.type_id is not None:
            raise DataError(f"slide {sid}: low patch {r.patch_id} must not carry a type")
    for r in slide.high:
        if r.type_id is None or not (0 <= r.type_id <= 4):
            raise DataError(f"slide {sid}: high patch {r.patch_id} needs a type in [0, 4]")
    for name, feats, records in (("low", slide.features_low, slide.low),
                                 ("high", slide.features_high, slide.high)):
        if feats.shape != (len(records), d):
            raise DataError(
                f"slide {sid}: {name}-scale feature matrix is {feats.shape}, "
                f"expected ({len(records)}, {d})")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"slide {sid}: non-finite value in {name}-scale features")
        rows = sorted(r.feat_row for r in records)
        if rows != list(range(len(records))):
            raise DataError(f"slide {sid}: {name}-scale feat_row must be a permutation of row indices")
    if slide.cell_values.shape != (len(slide.cell_ids), p):
        raise DataError(f"slide {sid}: cell-stat matrix is {slide.cell_values.shape}, expected p={p}")
    if not np.all(np.isfinite(slide.cell_values)):
        raise DataError(f"slide {sid}: non-finite cell statistic")
    high_ids = {r.patch_id for r in slide.high}
    for pid in slide.cell_ids:
        if int(pid) not in high_ids:
            raise DataError(f"slide {sid}: cell stats reference unknown high patch {pid}")
    # containment: every high center inside some low footprint
    coords_low = slide.coords_low()
    for r in slide.high:
        inside = np.flatnonzero(
            (np.abs(coords_low[:, 0] - r.x_um) <= half_width)
            & (np.abs(coords_low[:, 1] - r.y_um) <= half_width))
        if inside.size == 0:
            raise DataError(
                f"slide {sid}: high patch {r.patch_id} at ({r.x_um}, {r.y_um}) "
                f"is outside every low footprint")


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_feature_matrix(path: Path) -> np.ndarray:
    meta_path = Path(str(path) + ".meta.json")
    if not path.exists() or not meta_path.exists():
        raise DataError(f"missing feature file or sidecar: {path}")
    meta = json.loads(meta_path.read_text())
    rows, cols = int(meta["rows"]), int(meta["cols"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != rows * cols:
        raise DataError(f"{path}: expected {rows}x{cols} float32 values, found {raw.size}")
    return raw.reshape(rows, cols)


def _read_patch_table(path: Path, sid: str) -> tuple[list[PatchRecord], list[PatchRecord]]:
    low: list[PatchRecord] = []
    high: list[PatchRecord] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        expected = ["patch_id", "scale", "x_um", "y_um", "type_id", "feat_row"]
        if reader.fieldnames != expected:
            raise DataError(f"slide {sid}: patch table header {reader.fieldnames} != {expected}")
        for row in reader:
            scale = row["scale"]
            if scale not in (SCALE_LOW, SCALE_HIGH):
                raise DataError(f"slide {sid}: bad scale {scale!r}")
            type_id = None if row["type_id"] == "" else int(row["type_id"])
            rec = PatchRecord(
                patch_id=int(row["patch_id"]), scale=scale,
                x_um=float(row["x_um"]), y_um=float(row["y_um"]),
                type_id=type_id, feat_row=int(row["feat_row"]))
            (low if scale == SCALE_LOW else high).append(rec)
    return low, high


def _read_cell_stats(path: Path, names: tuple[str, ...], sid: str):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[0] != "patch_id" or tuple(header[1:]) != names:
            raise DataError(f"slide {sid}: cell-stat header mismatch")
        ids, values = [], []
        for row in reader:
            ids.append(int(row[0]))
            values.append([float(v) for v in row[1:]])
    return (np.asarray(ids, dtype=np.int64),
            np.asarray(values, dtype=np.float64).reshape(len(ids), len(names)))


def load_cohort(manifest_path) -> Cohort:
    """Load and fully validate a cohort from its manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    m = json.loads(manifest_path.read_text())
    for key in ("d", "p", "type_vocab", "cell_feature_names", "slides"):
        if key not in m:
            raise DataError(f"manifest missing key {key!r}")
    d, p = int(m["d"]), int(m["p"])
    names = tuple(m["cell_feature_names"])
    mpp_low = float(m.get("mpp_low", 1.0))
    half_width = 128.0 * mpp_low
    slides = []
    for entry in m["slides"]:
        sid = entry["slide_id"]
        for key in ("time_months", "event", "patch_table", "features_low", "features_high", "cell_stats"):
            if key not in entry:
                raise DataError(f"slide {sid}: manifest entry missing {key!r}")
        low, high = _read_patch_table(root / entry["patch_table"], sid)
        feats_low = _read_feature_matrix(root / entry["features_low"])
        feats_high = _read_feature_matrix(root / entry["features_high"])
        cell_ids, cell_values = _read_cell_stats(root / entry["cell_stats"], names, sid)
        slide = SlideBundle(
            slide_id=sid, low=low, high=high,
            features_low=feats_low, features_high=feats_high,
            cell_ids=cell_ids, cell_values=cell_values,
            label=SurvivalLabel(float(entry["time_months"]), int(entry["event"])),
            true_log_hazard=(float(entry["true_log_hazard"])
                             if "true_log_hazard" in entry else None))
        _validate_slide(slide, d, p, half_width)
        slides.append(slide)
    return Cohort(slides=slides, d=d, p=p,
                  type_vocab=tuple(m["type_vocab"]), cell_feature_names=names,
                  mpp_low=mpp_low)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _write_feature_matrix(path: Path, feats: np.ndarray) -> None:
    feats.astype("<f4").tofile(path)
    meta = {"rows": int(feats.shape[0]), "cols": int(feats.shape[1])}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n")


def write_cohort(cohort: Cohort, out_dir) -> Path:
    """Write a cohort in the manifest format; returns the manifest path."""
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in cohort.slides:
        base = f"slides/{s.slide_id}"
        with open(out / f"{base}.patches.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["patch_id", "scale", "x_um", "y_um", "type_id", "feat_row"])
            for r in s.low + s.high:
                w.writerow([r.patch_id, r.scale, repr(r.x_um), repr(r.y_um),
                            "" if r.type_id is None else r.type_id, r.feat_row])
        _write_feature_matrix(out / f"{base}.low.f32", s.features_low)
        _write_feature_matrix(out / f"{base}.high.f32", s.features_high)
        with open(out / f"{base}.cells.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["patch_id", *cohort.cell_feature_names])
            for pid, vals in zip(s.cell_ids, s.cell_values):
                w.writerow([int(pid), *[repr(float(v)) for v in vals]])
        entry = {
            "slide_id": s.slide_id,
            "time_months": s.label.time_months,
            "event": s.label.event,
            "patch_table": f"{base}.patches.csv",
            "features_low": f"{base}.low.f32",
            "features_high": f"{base}.high.f32",
            "cell_stats": f"{base}.cells.csv",
        }
        if s.true_log_hazard is not None:
            entry["true_log_hazard"] = s.true_log_hazard
        entries.append(entry)
    manifest = {
        "d": cohort.d,
        "p": cohort.p,
        "mpp_low": cohort.mpp_low,
        "type_vocab": list(cohort.type_vocab),
        "cell_feature_names": list(cohort.cell_feature_names),
        "slides": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic cohorts
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic generative model.

    Low-scale patches form a grid x grid lattice at 256 um pitch; each low
    footprint contains an aligned 2x2 block of high-scale patches, so
    cross-scale containment is exact by construction. Hazard coefficients
    act per standard deviation of the slide-level fraction so their effect
    size is scale-free.
    """

    n_slides: int = 200
    grid: int = 4
    d: int = 64
    p: int = 3
    max_tumor_clusters: int = 3
    lambda_tumor: float = 2.0
    lambda_lymph: float = 1.0
    lambda_contact: float = 1.0
    censor_frac: float = 0.3
    base_median_months: float = 24.0
    type_mean_scale: float = 1.5
    high_feature_noise: float = 0.4
    low_feature_noise: float = 0.25

    def cell_feature_names(self) -> tuple[str, ...]:
        if self.p < 2:
            raise DataError("synthetic cohorts need p >= 2 (tumor and lymphocyte fractions)")
        extra = tuple(f"stat_{i}" for i in range(self.p - 2))
        return ("tumor_fraction", "lymphocyte_fraction") + extra


def _neighbor_mean(grid_vals: np.ndarray) -> np.ndarray:
    """Mean of each cell's 8-neighborhood, excluding the cell itself.

    Edge cells average over the neighbors that exist (no padding values).
    """
    n_a, n_b = grid_vals.shape
    total = np.zeros_like(grid_vals)
    count = np.zeros_like(grid_vals)
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            if da == 0 and db == 0:
                continue
            a0, a1 = max(da, 0), n_a + min(da, 0)
            b0, b1 = max(db, 0), n_b + min(db, 0)
            total[a0 - da:a1 - da, b0 - db:b1 - db] += grid_vals[a0:a1, b0:b1]
            count[a0 - da:a1 - da, b0 - db:b1 - db] += 1.0
    return total / count


def _calibrate_censor_horizon(times: np.ndarray, target: float) -> float:
    """Uniform(0, c) censoring horizon with expected censored fraction ~= target."""
    lo, hi = 1e-6, float(times.max()) * 4.0
    frac = lambda c: float(np.minimum(times / c, 1.0).mean())
    while frac(hi) > target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synth_cohort(cfg: SynthConfig, seed: int) -> Cohort:
    """Deterministic synthetic cohort with a known ground-truth hazard.

    Generative model: high-scale patch types come from spatial tumor
    clusters (type 0 inside clusters) over a slide-level immune intensity
    that sets the inflammatory-type rate and a latent infiltration level
    that places those patches toward or away from the cluster boundary;
    features are type-conditional Gaussians; per-patch cell statistics
    carry the true tumor and lymphocyte fractions; the slide's event time
    is exponential with
    log-rate lambda_tumor * z(tumor fraction) - lambda_lymph * z(lymphocyte
    fraction) - lambda_contact * z(tumor-lymphocyte adjacency), z
    standardized across the cohort; censoring is independent uniform
    calibrated to the requested fraction.

    The adjacency term makes part of the hazard depend on where
    lymphocytes sit relative to tumor, not just on how many there are:
    slide-mean pooling of any per-patch encoding cannot represent it,
    while neighborhood aggregation can, so it separates the graph
    encoders from plain projections in ablation comparisons.
    """
    if cfg.n_slides < 1 or cfg.grid < 1 or cfg.d < 1:
        raise DataError("degenerate synthetic config (need slides, grid and d all >= 1)")
    names = cfg.cell_feature_names()
    g = cfg.grid
    gh = 2 * g
    cohort_rng = rng_for(seed, 0)
    type_means = cohort_rng.normal(0.0, cfg.type_mean_scale / np.sqrt(cfg.d), size=(5, cfg.d))

    per_slide = []
    for i in range(cfg.n_slides):
        rng = rng_for(seed, 1, i)
        immune = rng.uniform()
        # infiltration: where the inflammatory patches sit relative to the
        # tumor boundary, independent of how many there are. High values
        # concentrate them against the clusters, low values push them away,
        # with near/far rates balanced so the expected count is unchanged.
        infiltration = rng.uniform()
        n_clusters = int(rng.integers(0, cfg.max_tumor_clusters + 1))
        centers = rng.uniform(0, gh, size=(n_clusters, 2))
        radii = rng.uniform(0.15 * gh, 0.45 * gh, size=n_clusters)

        ax, by = np.meshgrid(np.arange(gh), np.arange(gh), indexing="ij")
        cell_centers = np.stack([ax.ravel() + 0.5, by.ravel() + 0.5], axis=1)
        in_cluster = np.zeros(gh * gh, dtype=bool)
        for c, r in zip(centers, radii):
            in_cluster |= np.linalg.norm(cell_centers - c, axis=1) <= r

        q_inflam = 0.06 + 0.38 * immune
        q_patch = np.full(gh * gh, q_inflam)
        if in_cluster.any() and not in_cluster.all():
            gap = cell_centers[~in_cluster, None, :] - cell_centers[None, in_cluster, :]
            near = np.linalg.norm(gap, axis=2).min(axis=1) <= 1.5
            f_near = near.mean()
            if 0.0 < f_near < 1.0:
                tilt = 1.5 * (2.0 * infiltration - 1.0)
                q_out = q_inflam * np.where(near, 1.0 + tilt * (1.0 - f_near),
                                            1.0 - tilt * f_near)
                q_patch[~in_cluster] = np.clip(q_out, 0.0, 0.85)

        types = np.empty(gh * gh, dtype=np.int64)
        for idx in range(gh * gh):
            u = rng.uniform()
            if in_cluster[idx]:
                types[idx] = TUMOR_TYPE if u < 0.85 else int(rng.integers(1, 5))
            else:
                if u < q_patch[idx]:
                    types[idx] = INFLAMMATORY_TYPE
                elif u < q_patch[idx] + 0.02:
                    types[idx] = TUMOR_TYPE
                else:
                    types[idx] = int(rng.integers(2, 5))

        tumor_frac = np.where(types == TUMOR_TYPE,
                              0.55 + 0.35 * rng.beta(2.0, 2.0, size=types.size),
                              0.08 * rng.beta(1.0, 3.0, size=types.size))
        lymph_frac = np.clip(0.05 + 0.4 * immune
                             + 0.25 * (types == INFLAMMATORY_TYPE)
                             + 0.05 * rng.normal(size=types.size), 0.0, 1.0)
        extra = rng.normal(1.0, 0.25, size=(types.size, max(cfg.p - 2, 0)))
        cell_values = np.column_stack([tumor_frac, lymph_frac, extra]) if cfg.p > 2 \
            else np.column_stack([tumor_frac, lymph_frac])

        feats_high = (type_means[types]
                      + rng.normal(0.0, cfg.high_feature_noise, size=(types.size, cfg.d)))
        types_grid = types.reshape(gh, gh)
        feats_low = np.empty((g * g, cfg.d))
        for li in range(g):
            for lj in range(g):
                block = types_grid[2 * li:2 * li + 2, 2 * lj:2 * lj + 2].ravel()
                feats_low[li * g + lj] = type_means[block].mean(axis=0)
        feats_low += rng.normal(0.0, cfg.low_feature_noise, size=feats_low.shape)

        # tumor-lymphocyte adjacency: excess lymphocyte mass in each patch's
        # 8-neighborhood relative to the slide average, weighted by the
        # patch's tumor mass. Zero for spatially uniform lymphocytes at any
        # composition, so it carries arrangement signal that slide-level
        # fractions cannot.
        neigh_lymph = _neighbor_mean(lymph_frac.reshape(gh, gh))
        contact = tumor_frac.reshape(gh, gh) * (neigh_lymph - lymph_frac.mean())

        per_slide.append({
            "types": types, "cell_values": cell_values,
            "feats_low": feats_low.astype(np.float32),
            "feats_high": feats_high.astype(np.float32),
            "tumor_frac": float(tumor_frac.mean()),
            "lymph_frac": float(lymph_frac.mean()),
            "contact": float(contact.mean()),
        })

    tf = np.array([s["tumor_frac"] for s in per_slide])
    lf = np.array([s["lymph_frac"] for s in per_slide])
    ct = np.array([s["contact"] for s in per_slide])
    z = lambda v: (v - v.mean()) / v.std() if v.std() > 0 else np.zeros_like(v)
    log_hazard = (cfg.lambda_tumor * z(tf) - cfg.lambda_lymph * z(lf)
                  - cfg.lambda_contact * z(ct))

    rate0 = np.log(2.0) / cfg.base_median_months
    latent_times = np.array([
        rng_for(seed, 2, i).exponential(1.0 / (rate0 * np.exp(log_hazard[i])))
        for i in range(cfg.n_slides)])
    latent_times = np.maximum(latent_times, TIME_RESOLUTION_MONTHS)

    if cfg.censor_frac > 0:
        horizon = _calibrate_censor_horizon(latent_times, cfg.censor_frac)
        censor_times = np.array([rng_for(seed, 3, i).uniform(0, horizon)
                                 for i in range(cfg.n_slides)])
        censor_times = np.maximum(censor_times, TIME_RESOLUTION_MONTHS / 2)
    else:
        censor_times = np.full(cfg.n_slides, np.inf)

    slides = []
    for i, s in enumerate(per_slide):
        event = int(latent_times[i] <= censor_times[i])
        observed = float(min(latent_times[i], censor_times[i]))
        low = [PatchRecord(li * g + lj, SCALE_LOW,
                           LOW_PATCH_PITCH_UM * li + 128.0, LOW_PATCH_PITCH_UM * lj + 128.0,
                           None, li * g + lj)
               for li in range(g) for lj in range(g)]
        high = [PatchRecord(a * gh + b, SCALE_HIGH,
                            HIGH_PATCH_PITCH_UM * a + 64.0, HIGH_PATCH_PITCH_UM * b + 64.0,
                            int(s["types"][a * gh + b]), a * gh + b)
                for a in range(gh) for b in range(gh)]
        slides.append(SlideBundle(
            slide_id=f"synth_{i:04d}", low=low, high=high,
            features_low=s["feats_low"], features_high=s["feats_high"],
            cell_ids=np.arange(gh * gh, dtype=np.int64),
            cell_values=s["cell_values"],
            label=SurvivalLabel(observed, event),
            true_log_hazard=float(log_hazard[i])))
    return Cohort(slides=slides, d=cfg.d, p=cfg.p,
                  type_vocab=DEFAULT_TYPE_VOCAB,
                  cell_feature_names=names)


# ---------------------------------------------------------------------------
# folds and time bins
# ---------------------------------------------------------------------------

def split_folds(cohort: Cohort, n_folds: int, seed: int) -> FoldPlan:
    """Shuffle slides once, then rotate disjoint test chunks across folds.

    With 5 folds the split is 60:20:20 train:val:test (within one slide).
    """
    ids = cohort.slide_ids()
    if n_folds < 3:
        raise DataError("need at least 3 folds so train/val/test are disjoint")
    if len(ids) < n_folds:
        raise DataError(f"too few slides ({len(ids)}) for {n_folds} folds")
    perm = rng_for(seed, 10).permutation(len(ids))
    chunks = np.array_split(perm, n_folds)
    assignments = []
    for f in range(n_folds):
        test = chunks[f]
        val = chunks[(f + 1) % n_folds]
        train = np.concatenate([chunks[j] for j in range(n_folds) if j not in (f, (f + 1) % n_folds)])
        assignments.append({
            "train": [ids[i] for i in train],
            "val": [ids[i] for i in val],
            "test": [ids[i] for i in test],
        })
    return FoldPlan(n_folds=n_folds, assignments=assignments)


def quantize_time_bins(train_labels, n_bins: int) -> TimeBins:
    """Quantile edges over uncensored training event times (linear interpolation)."""
    if n_bins < 1:
        raise DataError("need at least one time bin")
    if n_bins == 1:
        return TimeBins(edges=np.zeros(0))
    events = np.sort([lab.time_months for lab in train_labels if lab.event == 1])
    if events.size < n_bins:
        raise NumericError(
            f"need at least {n_bins} uncensored events to build {n_bins} bins, got {events.size}")
    qs = np.arange(1, n_bins) / n_bins
    edges = np.quantile(events, qs, method="linear")
    for i in range(1, edges.size):
        if edges[i] <= edges[i - 1]:
            edges[i] = edges[i - 1] + TIME_RESOLUTION_MONTHS
    return TimeBins(edges=edges)
