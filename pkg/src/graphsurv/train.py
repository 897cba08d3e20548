"""Training loop: Adam with additive weight decay, per-fold training with
best-validation checkpoint selection, and k-fold cross-validation.

One slide is one optimization step (batch size 1). The test concordance
reported for a fold is always computed from the checkpoint re-read from
disk, so the metric is reproducible from the artifact alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .common import NumericError, rng_for
from .ingest import Cohort, FoldPlan, TimeBins, quantize_time_bins, split_folds
from .model import ModelConfig, SlideInputs, SurvivalModel, load_checkpoint, prepare_inputs, save_checkpoint
from .survival import concordance_index, nll_survival_loss


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 256
    gat_layers: int = 3
    prop_steps: int = 3
    blocks: int = 5
    n_bins: int = 4
    k_low: int = 8
    k_high: int = 8
    use_tie: bool = True
    use_hie: bool = True
    lr: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 40
    n_folds: int = 5
    seed: int = 0

    def model_config(self, d: int) -> ModelConfig:
        return ModelConfig(d=d, hidden=self.hidden, gat_layers=self.gat_layers,
                           prop_steps=self.prop_steps, blocks=self.blocks,
                           n_bins=self.n_bins, k_low=self.k_low, k_high=self.k_high,
                           use_tie=self.use_tie, use_hie=self.use_hie)


class AdamState:
    """First/second moment buffers keyed by parameter identity.

    Two scratch arrays per parameter let the update run without per-step
    allocations; the arithmetic order matches the textbook expression
    lr * (m / bc1) / (sqrt(v / bc2) + eps) bit for bit.
    """

    def __init__(self, tensors):
        self.step = 0
        self.m = [np.zeros_like(t.values) for t in tensors]
        self.v = [np.zeros_like(t.values) for t in tensors]
        self.scratch_g = [np.empty_like(t.values) for t in tensors]
        self.scratch_w = [np.empty_like(t.values) for t in tensors]


def adam_step(tensors, state: AdamState, lr: float, weight_decay: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with decoupled-from-nothing additive L2 decay (g + wd*theta)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for tensor, m, v, g, w in zip(tensors, state.m, state.v,
                                  state.scratch_g, state.scratch_w):
        if tensor.grad is None:
            continue
        np.multiply(tensor.values, weight_decay, out=g)
        g += tensor.grad
        np.multiply(g, 1.0 - beta1, out=w)
        m *= beta1
        m += w
        np.multiply(g, 1.0 - beta2, out=w)
        w *= g
        v *= beta2
        v += w
        np.divide(v, bc2, out=w)
        np.sqrt(w, out=w)
        w += eps
        np.divide(m, bc1, out=g)
        g *= lr
        g /= w
        tensor.values -= g


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    val_cindex: float
    test_cindex: float
    checkpoint: str
    val_history: list[float] = field(default_factory=list)


def _slide_risks(model: SurvivalModel, inputs: list[SlideInputs]) -> np.ndarray:
    with ad.no_grad():
        return np.array([model.forward(inp)[1].item() for inp in inputs])


def _cindex_or_half(times, events, risks) -> float:
    """Validation scoring falls back to 0.5 when no pair is comparable."""
    try:
        return concordance_index(times, events, risks)
    except NumericError:
        return 0.5


def evaluate(model: SurvivalModel, cohort: Cohort, slide_ids: list[str],
             inputs_by_id: dict[str, SlideInputs] | None = None) -> tuple[np.ndarray, float]:
    """Per-slide risks and the concordance index over the given slides."""
    if inputs_by_id is None:
        half = cohort.footprint_half_width()
        inputs_by_id = {sid: prepare_inputs(cohort.by_id(sid), model.config, half)
                        for sid in slide_ids}
    inputs = [inputs_by_id[sid] for sid in slide_ids]
    risks = _slide_risks(model, inputs)
    labels = [cohort.by_id(sid).label for sid in slide_ids]
    c = concordance_index([lab.time_months for lab in labels],
                          [lab.event for lab in labels], risks)
    return risks, c


def train_fold(cohort: Cohort, assignment: dict[str, list[str]], config: TrainConfig,
               fold: int, out_dir) -> FoldResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mc = config.model_config(cohort.d)
    half = cohort.footprint_half_width()

    train_ids = list(assignment["train"])
    val_ids = list(assignment["val"])
    test_ids = list(assignment["test"])
    bins = quantize_time_bins([cohort.by_id(s).label for s in train_ids], config.n_bins)

    inputs = {sid: prepare_inputs(cohort.by_id(sid), mc, half)
              for sid in train_ids + val_ids + test_ids}
    labels = {sid: cohort.by_id(sid).label for sid in cohort.slide_ids()}

    model_seed = int(rng_for(config.seed, 20, fold).integers(2 ** 31))
    model = SurvivalModel(mc, seed=model_seed)
    tensors = model.tensors()
    state = AdamState(tensors)

    val_times = [labels[s].time_months for s in val_ids]
    val_events = [labels[s].event for s in val_ids]

    best_val = -np.inf
    best_epoch = -1
    best_values = None
    history = []
    for epoch in range(config.epochs):
        order = rng_for(config.seed, 30, fold, epoch).permutation(len(train_ids))
        for idx in order:
            sid = train_ids[idx]
            _, slide_risk = model.forward(inputs[sid])
            loss = nll_survival_loss(slide_risk, model.bin_offsets, labels[sid], bins)
            ad.zero_grads(tensors)
            ad.backward(loss)
            adam_step(tensors, state, config.lr, config.weight_decay,
                      config.beta1, config.beta2, config.adam_eps)
        val_risks = _slide_risks(model, [inputs[s] for s in val_ids])
        val_c = _cindex_or_half(val_times, val_events, val_risks)
        history.append(float(val_c))
        if val_c > best_val:
            best_val = val_c
            best_epoch = epoch
            best_values = [t.values.copy() for t in tensors]

    for t, v in zip(tensors, best_values):
        t.values = v
    ckpt_path = out_dir / f"fold_{fold}.ckpt"
    save_checkpoint(ckpt_path, model, bins, extra={
        "fold": fold,
        "best_epoch": best_epoch,
        "val_cindex": float(best_val),
        "train_ids": train_ids,
        "val_ids": val_ids,
        "test_ids": test_ids,
    })

    # score the artifact, not the in-memory model
    reloaded, _, _ = load_checkpoint(ckpt_path)
    test_risks = _slide_risks(reloaded, [inputs[s] for s in test_ids])
    test_c = concordance_index([labels[s].time_months for s in test_ids],
                               [labels[s].event for s in test_ids], test_risks)
    return FoldResult(fold=fold, best_epoch=best_epoch, val_cindex=float(best_val),
                      test_cindex=float(test_c), checkpoint=str(ckpt_path),
                      val_history=history)


_BLAS_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                     "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _run_folds_parallel(cohort: Cohort, plan: FoldPlan, config: TrainConfig,
                        n_run: int, out_dir: Path, n_workers: int) -> list[FoldResult]:
    """Each fold trains in its own spawned process with single-threaded BLAS.

    Folds are independent (seeded by (seed, fold)), so the results are byte
    identical to a sequential run under the same BLAS threading.
    """
    import concurrent.futures as cf
    import multiprocessing as mp
    import os

    saved = {k: os.environ.get(k) for k in _BLAS_THREAD_VARS}
    os.environ.update({k: "1" for k in _BLAS_THREAD_VARS})
    try:
        ctx = mp.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=min(n_workers, n_run),
                                    mp_context=ctx) as pool:
            futures = [pool.submit(train_fold, cohort, plan.assignments[f],
                                   config, f, out_dir)
                       for f in range(n_run)]
            return [fut.result() for fut in futures]
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def cross_validate(cohort: Cohort, config: TrainConfig, out_dir,
                   max_folds: int | None = None,
                   n_workers: int | None = None) -> dict:
    """Train every fold and write metrics.json under out_dir.

    n_workers > 1 runs folds in parallel processes; fold results do not
    depend on the worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan: FoldPlan = split_folds(cohort, config.n_folds, config.seed)
    n_run = plan.n_folds if max_folds is None else min(max_folds, plan.n_folds)
    if n_workers is not None and n_workers > 1 and n_run > 1:
        results = _run_folds_parallel(cohort, plan, config, n_run, out_dir, n_workers)
    else:
        results = [train_fold(cohort, plan.assignments[f], config, f, out_dir)
                   for f in range(n_run)]
    scores = np.array([r.test_cindex for r in results])
    metrics = {
        "folds": [{"fold": r.fold, "test_cindex": r.test_cindex, "best_epoch": r.best_epoch}
                  for r in results],
        "mean": float(scores.mean()),
        "std": float(scores.std()),
        "config": asdict(config),
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return metrics
