"""Command-line entry point.

Subcommands: synth, train, eval, interpret, bench-attention. Exit codes:
0 success, 1 usage error, 2 data validation error, 3 numeric failure.

Heavy imports happen inside the command functions so the BLAS thread
pools can be pinned before numpy is first loaded. BLAS always runs
single threaded so numeric outputs never depend on the machine or on
--threads; --threads N instead caps process-level parallelism (train
distributes folds over up to N worker processes). The output directory
resolves as: --out flag, then the GRAPHSURV_OUT environment variable,
then ./out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

OUT_ENV_VAR = "GRAPHSURV_OUT"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _set_threads(n: int | None) -> None:
    # must run before numpy import; harmless if some pools are absent.
    # BLAS stays at one thread regardless of --threads: parallelism is
    # process level, so results cannot drift with the thread count.
    if n is not None and n < 1:
        raise SystemExit(1)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = "1"


def _resolve_out(flag_value: str | None) -> Path:
    if flag_value is not None:
        return Path(flag_value)
    env = os.environ.get(OUT_ENV_VAR)
    return Path(env) if env else Path("out")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        from .common import DataError
        raise DataError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        from .common import DataError
        raise DataError(f"{p}: invalid JSON config: {exc}") from exc
    if not isinstance(cfg, dict):
        from .common import DataError
        raise DataError(f"{p}: config must be a JSON object")
    return cfg


def _build_dataclass(cls, base: dict, overrides: dict):
    """Instantiate a config dataclass from JSON values plus flag overrides."""
    import dataclasses

    from .common import DataError

    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(base) - allowed
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .ingest import SynthConfig, synth_cohort, write_cohort

    cfg_json = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg_json.pop("seed", 0))
    cfg = _build_dataclass(SynthConfig, cfg_json, {"n_slides": args.n_slides})
    out = _resolve_out(args.out)
    cohort = synth_cohort(cfg, seed)
    manifest = write_cohort(cohort, out)
    print(f"wrote {len(cohort.slides)} slides, manifest {manifest}")
    return 0


_ABLATIONS = {
    "full": (True, True),
    "tie-only": (True, False),
    "no-hie": (True, False),
    "hie-only": (False, True),
    "no-tie": (False, True),
    "neither": (False, False),
}


def cmd_train(args) -> int:
    from .ingest import load_cohort
    from .train import TrainConfig, cross_validate

    cfg_json = _load_config(args.config)
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
    }
    if args.ablate is not None:
        use_tie, use_hie = _ABLATIONS[args.ablate]
        overrides["use_tie"] = use_tie
        overrides["use_hie"] = use_hie
    config = _build_dataclass(TrainConfig, cfg_json, overrides)
    out = _resolve_out(args.out)
    cohort = load_cohort(args.manifest)
    metrics = cross_validate(cohort, config, out, max_folds=args.folds,
                             n_workers=args.threads)
    for fold in metrics["folds"]:
        print(f"fold {fold['fold']}: test C-index {fold['test_cindex']:.4f} "
              f"(best epoch {fold['best_epoch']})")
    print(f"mean test C-index {metrics['mean']:.4f} +/- {metrics['std']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .ingest import load_cohort
    from .interpret import median_split_km
    from .model import load_checkpoint
    from .survival import write_km_csv
    from .train import evaluate

    model, _, extra = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.manifest)
    key = f"{args.split}_ids"
    if key not in extra:
        from .common import DataError
        raise DataError(f"checkpoint stores no {args.split} split")
    ids = list(extra[key])
    known = set(cohort.slide_ids())
    missing = [s for s in ids if s not in known]
    if missing:
        from .common import DataError
        raise DataError(f"slides in checkpoint split but not in cohort: {missing[:5]}")

    risks, cindex = evaluate(model, cohort, ids)
    times = [cohort.by_id(s).label.time_months for s in ids]
    events = [cohort.by_id(s).label.event for s in ids]
    curves, chi2, p = median_split_km(times, events, risks)

    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_km_csv(curves, out / f"km_{args.split}.csv")
    report = {"split": args.split, "n_slides": len(ids), "cindex": float(cindex),
              "log_rank_chi2": float(chi2), "log_rank_p": float(p)}
    (out / f"eval_{args.split}.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{args.split}: n={len(ids)} C-index {cindex:.4f} log-rank p {p:.4g}")
    return 0


def cmd_interpret(args) -> int:
    from .interpret import (cell_cox_analysis, collect_extreme_observations,
                            risk_map, write_feature_distribution_csv,
                            write_risk_map_csv)
    from .ingest import load_cohort
    from .model import load_checkpoint
    from .survival import write_cox_json

    model, _, extra = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.manifest)
    key = f"{args.split}_ids"
    ids = list(extra[key]) if key in extra else cohort.slide_ids()

    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        rows = risk_map(model, cohort, [sid])
        write_risk_map_csv(rows, out / f"risk_map_{sid}.csv")

    obs = collect_extreme_observations(model, cohort, ids, k=args.top_k)
    cox = cell_cox_analysis(obs)
    write_cox_json(cox, cohort.cell_feature_names, out / "cell_cox.json")
    write_feature_distribution_csv(obs, cox, cohort.cell_feature_names,
                                   out / "feature_distribution.csv")
    for name, g, z in zip(cohort.cell_feature_names, cox.gammas, cox.zs):
        print(f"{name}: gamma {g:+.4f} z {z:+.2f}")
    return 0


def cmd_bench_attention(args) -> int:
    import time

    import numpy as np

    from .common import DataError, rng_for
    from .model import dense_sla_oracle, linear_sla_numpy

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise DataError(f"--sizes must be comma-separated integers: {args.sizes}") from exc
    if not sizes or any(n < 1 for n in sizes):
        raise DataError(f"--sizes must list positive integers: {args.sizes}")

    def best_ms(fn, *tensors) -> float:
        fn(*tensors)  # warm up
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fn(*tensors)
            best = min(best, (time.perf_counter() - t0) * 1e3)
        return best

    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench_attention.csv"
    with open(path, "w") as f:
        f.write("n,d,dense_ms,linear_ms\n")
        for n in sizes:
            rng = rng_for(args.seed, 90, n)
            q, k, v = (rng.standard_normal((n, args.d)) for _ in range(3))
            dense = best_ms(dense_sla_oracle, q, k, v, 1e-6)
            linear = best_ms(linear_sla_numpy, q, k, v, 1e-6)
            f.write(f"{n},{args.d},{dense!r},{linear!r}\n")
            print(f"n={n} dense {dense:.3f} ms linear {linear:.3f} ms")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="graphsurv",
                     description="multi-scale graph survival pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--seed", type=int, help="generator seed (overrides config)")
    p.add_argument("--n-slides", type=int, help="cohort size (overrides config)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or ./out)")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--out")
    p.add_argument("--folds", type=int, help="run only the first N folds")
    p.add_argument("--ablate", choices=sorted(_ABLATIONS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a stored split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interpret", help="risk maps and cell-statistic analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--top-k", type=int, default=5,
                   help="extreme patches per slide and direction")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_interpret)

    p = sub.add_parser("bench-attention", help="dense vs linear attention timings")
    p.add_argument("--sizes", default="512,1024,2048,4096",
                   help="comma-separated node counts")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_bench_attention)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(getattr(args, "threads", None))
    from .common import DataError, NumericError
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"graphsurv: data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"graphsurv: numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"graphsurv: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
