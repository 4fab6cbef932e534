"""Command-line entry point: ``mtmpc {collect,train,run,report,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric or solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, InvalidArgumentError, NumericError
from .audit import run_gradcheck
from .config import Baseline, StudyConfig, resolve_study
from .pipeline import collect_study, load_artifacts, load_datasets, save_datasets, train_study
from .report import format_summary, run_benchmark

GRADCHECK_LIMIT = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _study(args) -> StudyConfig:
    study = resolve_study(args.config)
    if getattr(args, "seed", None) is not None:
        s = int(args.seed)
        study.seed = s
        study.optimizer.seed = s
        study.mlp_optimizer.seed = s
        study.collect_seed = study.collect_seed + s
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigurationError("--seeds must be >= 1")
        study.n_seeds = int(args.seeds)
    return study


def _out(args, study) -> Path:
    return Path(args.out or study.out)


def cmd_collect(args) -> int:
    study = _study(args)
    out = _out(args, study)
    ds = collect_study(study)
    path = save_datasets(ds, out)
    for tid, D in ds.items():
        flag = " (diverged, partial)" if D.diverged else ""
        print(f"{tid}: {len(D)} samples{flag}")
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    study = _study(args)
    out = _out(args, study)
    dpath = out / "datasets.json"
    datasets = load_datasets(dpath) if dpath.exists() else None
    if datasets is None:
        datasets = collect_study(study)
        save_datasets(datasets, out)
    arts = train_study(study, datasets)
    for name in sorted(arts):
        path = arts[name].save(out / "models")
        obj = arts[name].objective
        print(f"{name}: objective {obj if obj is None else f'{obj:.6f}'} -> {path}")
    return 0


def cmd_run(args) -> int:
    from .closedloop import run_cell

    study = _study(args)
    out = _out(args, study)
    baseline = Baseline.parse(args.baseline)
    task_id = args.task or study.eval_tasks[0]
    task = study.task(task_id)
    art = None
    if baseline.adaptive:
        art = load_artifacts(StudyConfig(**{**vars(study), "baselines": [baseline]}), out / "models")[
            baseline.artifact_name]
    every = max(int(args.every), 1)

    def show(k, t, x, u, kkt):
        if k % every == 0:
            print(f"t={t:7.3f}  x=({x[0, 0]: .4f}, {x[0, 1]: .4f})  u={u[0, 0]: .4f}  kkt={kkt[0]:.2e}")

    seed = int(args.seed or 0)
    batch = run_cell(study, study.build_plant(), task, baseline, art, [seed], callback=show)
    path = out / f"run_{baseline.label}_{task_id}_{seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "x0", "x1", "u", "true_residual", "kkt"])
        for k in range(batch.inputs.shape[1]):
            w.writerow([repr(float(batch.times[k])), *map(repr, map(float, batch.states[0, k])),
                        repr(float(batch.inputs[0, k, 0])), repr(float(batch.true_residuals[0, k])),
                        repr(float(batch.kkt[0, k]))])
    if batch.failed[0]:
        print(f"run FAILED (saturated={bool(batch.saturated[0])}); trajectory in {path}")
        return 2
    print(f"closed-loop cost {batch.costs[0]:.6f}; trajectory in {path}")
    return 0


def cmd_report(args) -> int:
    study = _study(args)
    out = _out(args, study)
    report = run_benchmark(study, models_dir=out / "models", train=args.train, out_dir=out,
                           workers=int(args.workers))
    print(format_summary(report))
    print(f"wrote {out / 'results.csv'} and {out / 'summary.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    res = run_gradcheck(int(args.seed or 0))
    for k, v in res["gradients"].items():
        print(f"gradient {k:<18} max relative error {v:.3e}")
    for k, v in res["jacobians"].items():
        print(f"jacobian {k:<18} max relative error {v:.3e}")
    worst = max(res["max_gradient_error"], res["max_jacobian_error"])
    print(f"max relative gradient error {res['max_gradient_error']:.3e}")
    print(f"max relative jacobian error {res['max_jacobian_error']:.3e}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
    return 2 if not worst <= GRADCHECK_LIMIT else 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtmpc", description="Multi-task residual learning MPC benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="study JSON file, or a built-in study name")
        sp.add_argument("--seed", type=int, default=None, help="pipeline seed")
        sp.add_argument("--out", default=None, help="output directory (default: the config's out)")

    sp = sub.add_parser("collect", help="collect training datasets under the nominal MPC")
    common(sp)
    sp.set_defaults(func=cmd_collect)
    sp = sub.add_parser("train", help="train model artifacts for the adaptive baselines")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("run", help="single closed-loop rollout with live diagnostics")
    common(sp)
    sp.add_argument("--baseline", default="Nominal", help="e.g. Nominal, MultiTask, SingleTask:task1")
    sp.add_argument("--task", default=None, help="task id (default: first evaluation task)")
    sp.add_argument("--every", type=int, default=25, help="print every N control steps")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("report", help="run the benchmark and write the CSV and JSON report")
    common(sp)
    sp.add_argument("--seeds", type=int, default=None, help="number of noise seeds")
    sp.add_argument("--train", action="store_true", help="train missing model artifacts inline")
    sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("gradcheck", help="finite-difference audit of gradients and Jacobians")
    common(sp, config_required=False)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore"):
            return args.func(args)
    except (ConfigurationError, InvalidArgumentError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
