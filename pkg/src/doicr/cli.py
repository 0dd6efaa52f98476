"""Command-line entry point: ``doicr <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from doicr.data import Dataset, load_csv, make_splits, standardize, synth_heteroscedastic
from doicr.errors import ContractError
from doicr.losses import LossConfig
from doicr.metrics import evaluate
from doicr.network import NetConfig, save_checkpoint
from doicr.report import (
    COVERAGE_THRESHOLD,
    BenchmarkResult,
    append_results,
    config_fingerprint,
    finite_or_none,
    make_flags,
    read_results,
    report,
    trace_figure,
    write_summary_csv,
)
from doicr.trainer import (
    DEFAULT_GRID,
    TrainConfig,
    direct_intervals,
    grid_search,
    run_test_icp,
    train,
)

log = logging.getLogger("doicr")

# CLI method name -> (trainer method, split scheme)
METHODS = {
    "doicr": ("doicr", "icp_family"),
    "icp": ("traditional", "icp_family"),
    "icp_constant": ("traditional_constant", "icp_family"),
    "scpo": ("scpo", "icp_family"),
    "qd_soft": ("qd_soft", "qd_soft"),
}
DEFAULT_CLS = (0.8, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class DataSpec:
    source: str
    target: str | None = None
    n: int = 5000
    dims: int = 2
    data_seed: int | None = None

    @property
    def name(self) -> str:
        return "synth" if self.source == "synth" else Path(self.source).stem

    def load(self, seed: int) -> Dataset:
        if self.source == "synth":
            return synth_heteroscedastic(self.n, self.dims, seed if self.data_seed is None else self.data_seed)
        if not self.target:
            raise ContractError("--target is required for CSV datasets")
        return load_csv(self.source, self.target)


def _csv_list(text: str, cast=str) -> list:
    return [cast(t) for t in text.split(",") if t.strip()]


def run_one(
    spec: DataSpec,
    method: str,
    cl: float,
    seed: int,
    cfg: TrainConfig,
    loss_kwargs: dict | None = None,
    grid: dict | None = None,
    threshold: float = COVERAGE_THRESHOLD,
    hidden=(20, 20),
) -> BenchmarkResult:
    """Split, (optionally) grid search, train, and evaluate one run."""
    trainer_method, scheme = METHODS[method]
    loss_cfg = LossConfig(epsilon=round(1.0 - cl, 10), **(loss_kwargs or {}))
    cfg = replace(cfg, seed=seed)
    record_cfg = {**cfg.to_dict(), **asdict(loss_cfg), "scheme": scheme, "hidden": list(hidden)}
    result = BenchmarkResult(spec.name, method, cl, seed, config=record_cfg)
    try:
        ds = spec.load(seed)
        splits = make_splits(ds.n, scheme, seed)
        ds = standardize(ds, splits.train)
        net = NetConfig(ds.v, tuple(hidden))
        X_tr, y_tr = ds.subset(splits.train)
        if grid:
            X_val, y_val = ds.subset(splits.validation)
            found = grid_search(trainer_method, grid, X_tr, y_tr, X_val, y_val, net, cfg, loss_cfg)
            model = found.best_model
            result.config["selected"] = {
                k: getattr(found.best, k) for k in ("learning_rate", "weight_decay", "batch_size")
            }
        else:
            model, _ = train(trainer_method, X_tr, y_tr, net, cfg, loss_cfg)
        X_te, y_te = ds.subset(splits.test)
        if trainer_method == "qd_soft":
            metrics = evaluate(direct_intervals(model, X_te), y_te)
        else:
            X_cal, y_cal = ds.subset(splits.calibration)
            metrics = run_test_icp(model, X_cal, y_cal, X_te, y_te, loss_cfg.epsilon)
        result.picp = metrics.picp
        result.mpiw = finite_or_none(metrics.mpiw)
        if result.mpiw is not None and ds.standardization is not None:
            result.mpiw_raw = float(ds.standardization.width_to_raw(result.mpiw))
        result.flags = make_flags(cl, metrics.picp, metrics.unbounded, metrics.crossed, threshold)
    except Exception as exc:  # one failed run must not abort the sweep
        log.warning("%s cl=%s seed=%s failed: %s", method, cl, seed, exc)
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def benchmark(
    spec: DataSpec,
    methods,
    cls,
    seeds,
    cfg: TrainConfig,
    out_dir,
    grid=None,
    loss_kwargs=None,
    threshold=COVERAGE_THRESHOLD,
    jobs: int = 1,
) -> list[BenchmarkResult]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(m, cl, s) for m in methods for cl in cls for s in seeds]
    args = [(spec, m, cl, s, cfg, loss_kwargs, grid, threshold) for m, cl, s in tasks]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_star, args))
    else:
        results = [_run_star(a) for a in args]
    # single writer, canonical task order
    append_results(out_dir / "results.jsonl", results)
    write_summary_csv(out_dir / "summary.csv", read_results(out_dir / "results.jsonl"))
    return results


def _run_star(a):
    return run_one(*a)


def pathology(spec: DataSpec, cl: float, cfg: TrainConfig, seed: int, out_dir) -> dict:
    """Train DOICR with a fixed and with a reshuffled embedded split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = spec.load(seed)
    splits = make_splits(ds.n, "icp_family", seed)
    ds = standardize(ds, splits.train)
    net = NetConfig(ds.v)
    loss_cfg = LossConfig(epsilon=round(1.0 - cl, 10))
    X_tr, y_tr = ds.subset(splits.train)
    X_cal, y_cal = ds.subset(splits.calibration)
    X_te, y_te = ds.subset(splits.test)
    runs, traces = {}, {}
    for label, fixed in (("fixed", True), ("shuffled", False)):
        run_cfg = replace(cfg, seed=seed, fixed_embedded_split=fixed)
        params, rep = train("doicr", X_tr, y_tr, net, run_cfg, loss_cfg)
        test = run_test_icp(params, X_cal, y_cal, X_te, y_te, loss_cfg.epsilon)
        traces[label] = {"picp": rep.picp_trace, "mpiw": rep.mpiw_trace}
        runs[label] = {
            "final_train_picp": rep.picp_trace[-1],
            "final_train_mpiw": rep.mpiw_trace[-1],
            "test_picp": test.picp,
            "test_mpiw": test.mpiw,
        }
    summary = {
        "dataset": spec.name,
        "confidence_level": cl,
        "seed": seed,
        "epochs": cfg.epochs,
        "config": {**cfg.to_dict(), "seed": seed},
        "runs": runs,
        "traces": traces,
    }
    if cfg.epochs > 1:
        summary["train_picp_gap"] = runs["shuffled"]["final_train_picp"] - runs["fixed"]["final_train_picp"]
    stamp = f"seed={seed} config={config_fingerprint(summary['config'])}"
    trace_figure(traces, cl, out_dir / "pathology.svg", stamp)
    (out_dir / "pathology.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary


# ---------------------------------------------------------------------------
# argument parsing


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        optimizer=args.optimizer,
        embedded_calib_fraction=args.r,
        seed=args.seed,
    )


def _load_grid(path: str | None):
    if path is None:
        return None
    if path == "default":
        return DEFAULT_GRID
    return json.loads(Path(path).read_text())


def _spec(args) -> DataSpec:
    return DataSpec(args.dataset, args.target, args.n, args.dims, args.data_seed)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", default="synth", help="CSV path or 'synth'")
    common.add_argument("--target", help="target column of a CSV dataset")
    common.add_argument("--n", type=int, default=5000, help="rows of synthetic data")
    common.add_argument("--dims", type=int, default=2, help="features of synthetic data")
    common.add_argument("--data-seed", type=int, default=None, help="fix the synthetic draw across seeds")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--epochs", type=int, default=1000)
    common.add_argument("--lr", type=float, default=0.001)
    common.add_argument("--weight-decay", type=float, default=0.0)
    common.add_argument("--batch-size", type=int, default=64)
    common.add_argument("--optimizer", default="adamw", choices=["sgd", "adam", "adamw"])
    common.add_argument("--r", type=float, default=0.25, help="embedded calibration fraction")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="doicr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", parents=[common], help="write a split manifest")
    s.add_argument("--scheme", default="icp_family")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--method", default="doicr", choices=sorted(METHODS))
    t.add_argument("--cl", type=float, default=0.9)

    b = sub.add_parser("benchmark", parents=[common], help="sweep methods x CLs x seeds")
    b.add_argument("--method", default="doicr,icp,scpo,qd_soft")
    b.add_argument("--cl", default=",".join(str(c) for c in DEFAULT_CLS))
    b.add_argument("--seeds", type=int, default=1, help="number of seeds starting at --seed")
    b.add_argument("--grid", default=None, help="JSON grid file or 'default'")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--threshold", type=float, default=COVERAGE_THRESHOLD)

    r = sub.add_parser("report", help="tables and figures from a results file")
    r.add_argument("results")
    r.add_argument("--out", default="out")
    r.add_argument("--threshold", type=float, default=COVERAGE_THRESHOLD)
    r.add_argument("-v", "--verbose", action="count", default=0)

    pa = sub.add_parser("pathology", parents=[common], help="fixed vs reshuffled embedded split")
    pa.add_argument("--cl", type=float, default=0.9)

    g = sub.add_parser("gridsearch", parents=[common], help="grid search one method")
    g.add_argument("--method", default="doicr", choices=sorted(METHODS))
    g.add_argument("--cl", type=float, default=0.9)
    g.add_argument("--grid", default="default", help="JSON grid file or 'default'")
    g.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "report":
        for path in report(args.results, out, args.threshold):
            print(path)
        return 0

    spec = _spec(args)
    cfg = _train_config(args)

    if args.command == "split":
        ds = spec.load(args.seed)
        splits = make_splits(ds.n, args.scheme, args.seed)
        (out / "splits.json").write_text(splits.to_json() + "\n")
        print(out / "splits.json")
        return 0

    if args.command == "train":
        trainer_method, scheme = METHODS[args.method]
        ds = spec.load(args.seed)
        splits = make_splits(ds.n, scheme, args.seed)
        ds = standardize(ds, splits.train)
        X, y = ds.subset(splits.train)
        model, rep = train(trainer_method, X, y, NetConfig(ds.v), cfg, LossConfig(epsilon=round(1 - args.cl, 10)))
        (out / "splits.json").write_text(splits.to_json() + "\n")
        (out / "train_report.json").write_text(rep.to_json() + "\n")
        if hasattr(model, "params_m"):
            save_checkpoint(model.params_m, out / "model_m.ckpt")
            if model.params_s is not None:
                save_checkpoint(model.params_s, out / "model_s.ckpt")
        else:
            save_checkpoint(model, out / "model.ckpt")
        log.info("training took %.2fs", rep.wall_clock)
        print(out / "train_report.json")
        return 0

    if args.command == "benchmark":
        methods = _csv_list(args.method)
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            print(f"unknown methods: {', '.join(unknown)}", file=sys.stderr)
            return 2
        seeds = list(range(args.seed, args.seed + args.seeds))
        results = benchmark(
            spec, methods, _csv_list(args.cl, float), seeds, cfg, out,
            grid=_load_grid(args.grid), threshold=args.threshold, jobs=args.jobs,
        )
        failed = [r for r in results if r.status != "ok"]
        for r in results:
            if r.status == "ok" and any(r.flags.values()):
                log.warning("%s cl=%s seed=%s flags=%s", r.method, r.confidence_level, r.seed, r.flags)
        print(out / "results.jsonl")
        return 1 if failed else 0

    if args.command == "pathology":
        summary = pathology(spec, args.cl, cfg, args.seed, out)
        runs = summary["runs"]
        print(
            f"fixed split: train PICP {runs['fixed']['final_train_picp']:.4f}, "
            f"test PICP {runs['fixed']['test_picp']:.4f}\n"
            f"reshuffled:  train PICP {runs['shuffled']['final_train_picp']:.4f}, "
            f"test PICP {runs['shuffled']['test_picp']:.4f}"
        )
        return 0

    if args.command == "gridsearch":
        trainer_method, scheme = METHODS[args.method]
        ds = spec.load(args.seed)
        splits = make_splits(ds.n, scheme, args.seed)
        ds = standardize(ds, splits.train)
        X, y = ds.subset(splits.train)
        X_val, y_val = ds.subset(splits.validation)
        found = grid_search(
            trainer_method, _load_grid(args.grid), X, y, X_val, y_val, NetConfig(ds.v), cfg,
            LossConfig(epsilon=round(1 - args.cl, 10)), n_jobs=args.jobs,
        )
        doc = {"best": found.best.to_dict(), "best_loss": found.best_loss, "rows": found.rows}
        (out / "gridsearch.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        print(out / "gridsearch.json")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
