"""Command-line entry point: ``mpgd {gen,train,compare,theory,eval}``.

Exit codes: 0 success, 1 usage error, 2 runtime or validation error,
3 a convergence inequality failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as cfgmod
from .errors import MPGDError, TheoryAssertionError
from .losses import LossSpec
from .metrics import evaluate
from .models import Model, init_model
from .synthbench import (
    Dataset, SpikeTaskConfig, gen_scalar_task, gen_spike_task, load_dataset, load_split, save_split,
)
from .theorylab import (
    Trace, check_descent_lemma, check_theorem2, gradient_descent, problem_grid, theorem1_curve,
)
from .trainer import RunRecord, predict, train

log = logging.getLogger("mpgd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THEORY = 0, 1, 2, 3
HIGHER_IS_BETTER = {"ssim", "r2"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _items(args) -> Dict[str, str]:
    items = cfgmod.load_config(args.config) if getattr(args, "config", None) else {}
    for kv in getattr(args, "set", None) or []:
        key, sep, value = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        items.update(cfgmod.parse_config(f"{key} = {value}", "--set"))
    flag_keys = {
        "steps": "train.steps", "batch_size": "train.batch_size", "lr": "train.lr",
        "momentum": "train.momentum", "seeds": "run.seeds", "data": "data.path",
        "loss": "loss.kind", "lam": "loss.lambda", "a": "loss.a", "c": "loss.c",
        "variants": "compare.variants", "jobs": "run.jobs",
    }
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            items[key] = str(val)
    if getattr(args, "log_eta", False):
        items["train.log_eta"] = "true"
    return items


def _tag(spec: LossSpec) -> str:
    return re.sub(r"[^A-Za-z0-9.=-]+", "_", spec.label).strip("_").replace("=", "-")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# seeds -----------------------------------------------------------------------

def _run_one(args) -> Tuple[int, RunRecord, Model]:
    exp, seed, train_ds, test_ds = args
    model_cfg, train_cfg = exp.for_seed(seed)
    model = init_model(model_cfg)
    record = train(model, train_ds, train_cfg, test_ds)
    return seed, record, model


def run_seeds(exp: cfgmod.ExperimentConfig, train_ds: Dataset, test_ds: Dataset,
              jobs: int = 1) -> List[Tuple[int, RunRecord, Model]]:
    work = [(exp, s, train_ds, test_ds) for s in exp.seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, work))
    return [_run_one(w) for w in work]


def _load_data(items: Dict[str, str]) -> Tuple[Dataset, Dataset]:
    path = items.get("data.path")
    if not path:
        raise UsageError("no dataset given (use --data or data.path)")
    if not Path(path).is_dir():
        raise MPGDError(f"dataset directory {path} does not exist")
    return load_split(path)


# commands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.task == "spike":
        grid = (args.grid, args.grid)
        train_ds, test_ds = gen_spike_task(SpikeTaskConfig(
            grid=grid, n_samples=args.samples, n_spikes=args.n_spikes, blur_radius=args.blur_radius,
            seed=args.seed,
        ))
    else:
        train_ds, test_ds = gen_scalar_task(args.samples, args.dim, args.outlier_fraction, args.seed)
    path = Path(args.path) if args.path else cfgmod.output_dir({}, args.out) / "data" / f"{args.task}_seed{args.seed}"
    save_split(train_ds, test_ds, path)
    print(f"{args.task} dataset seed={args.seed}: {len(train_ds)} train / {len(test_ds)} test, "
          f"input {train_ds.input_shape}, target {train_ds.target_shape} -> {path}")
    return EXIT_OK


def _save_run(dirpath: Path, seed: int, record: RunRecord, model: Optional[Model]) -> None:
    _write(dirpath / f"seed{seed}.csv", record.to_csv())
    _write(dirpath / f"seed{seed}.json", record.to_json())
    if model is not None:
        model.save(dirpath / f"seed{seed}.model")


def cmd_train(args) -> int:
    items = _items(args)
    train_ds, test_ds = _load_data(items)
    exp = cfgmod.ExperimentConfig.from_items(items, train_ds.input_shape, train_ds.target_shape, args.out)
    results = run_seeds(exp, train_ds, test_ds, int(items.get("run.jobs", 1)))
    run_dir = exp.output_dir / _tag(exp.train.loss)
    for seed, record, model in results:
        _save_run(run_dir, seed, record, model)
        m = record.final_metrics
        print(f"{exp.train.loss.label} seed={seed}: final loss {record.steps[-1].loss:.6g}, "
              f"test ME {m.get('me', float('nan')):.4f}, test MSE {m.get('mse', float('nan')):.3g}")
    print(f"wrote {len(results)} run(s) to {run_dir}")
    return EXIT_OK


def comparison_rows(results: Dict[str, List[Tuple[int, RunRecord]]]) -> Tuple[List[str], List[list]]:
    first = next(iter(results.values()))[0][1]
    metric_cols = [k for k in first.final_metrics if k != "degenerate"]
    header = ["variant", "seed"] + metric_cols
    rows = []
    for label, runs in results.items():
        for seed, rec in runs:
            rows.append([label, seed] + [rec.final_metrics[c] for c in metric_cols])
    return header, rows


def comparison_summary(results: Dict[str, List[Tuple[int, RunRecord]]]) -> dict:
    header, rows = comparison_rows(results)
    metric_cols = header[2:]
    labels = list(results)
    means = {
        label: {c: float(np.mean([rec.final_metrics[c] for _, rec in runs])) for c in metric_cols}
        for label, runs in results.items()
    }
    wins = {label: {c: 0 for c in metric_cols} for label in labels}
    seeds = [s for s, _ in results[labels[0]]]
    for i, _ in enumerate(seeds):
        for c in metric_cols:
            vals = [results[label][i][1].final_metrics[c] for label in labels]
            best = int(np.argmax(vals) if c in HIGHER_IS_BETTER else np.argmin(vals))
            wins[labels[best]][c] += 1
    return {"variants": labels, "seeds": seeds, "columns": metric_cols, "mean": means, "wins": wins}


def cmd_compare(args) -> int:
    items = _items(args)
    specs = cfgmod.variants(items)
    if len(specs) < 2:
        raise UsageError("compare needs at least two loss variants")
    train_ds, test_ds = _load_data(items)
    results: Dict[str, List[Tuple[int, RunRecord]]] = {}
    out_dir = None
    for spec in specs:
        exp = cfgmod.ExperimentConfig.from_items(items, train_ds.input_shape, train_ds.target_shape,
                                                 args.out, loss=spec)
        out_dir = exp.output_dir / "compare"
        runs = run_seeds(exp, train_ds, test_ds, int(items.get("run.jobs", 1)))
        results[spec.label] = [(s, r) for s, r, _ in runs]
        for seed, record, _ in runs:
            _save_run(out_dir / "runs" / _tag(spec), seed, record, None)
    header, rows = comparison_rows(results)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([v if isinstance(v, (str, int)) else repr(float(v)) for v in row])
    _write(out_dir / "comparison.csv", buf.getvalue())
    summary = comparison_summary(results)
    _write(out_dir / "comparison.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(format_table(summary))
    print(f"wrote {out_dir / 'comparison.csv'}")
    return EXIT_OK


def format_table(summary: dict) -> str:
    cols = summary["columns"]
    width = max(len(v) for v in summary["variants"]) + 2
    cw = max(12, max(len(c) for c in cols))
    lines = ["".ljust(width) + " ".join(c.rjust(cw) for c in cols)]
    for label in summary["variants"]:
        lines.append(label.ljust(width) + " ".join(f"{summary['mean'][label][c]:{cw}.5g}" for c in cols))
    return "\n".join(lines)


def _trace_csv(trace: Trace, T: int) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("t", "l_t", "grad_norm_sq", "topk_grad_norm_sq", "eta"))
    eta = trace.eta
    for t in range(T + 1):
        wr.writerow((t, repr(float(trace.loss[t])), repr(float(trace.grad_sq[t])),
                     repr(float(trace.topk_grad_sq[t])), repr(float(eta[t]))))
    return buf.getvalue()


def cmd_theory(args) -> int:
    out_dir = cfgmod.output_dir({}, args.out) / "theory"
    demo = args.step_scale != 1.0
    problems = problem_grid(args.problems, m=args.entries, base_seed=args.seed)
    consistent = problem_grid(args.problems, m=args.entries, consistent=True, base_seed=args.seed)
    verdict = {"step_scale": args.step_scale, "steps": args.steps, "k_fraction": args.k_fraction,
               "problems": []}
    failures = []
    for i, (p, pc) in enumerate(zip(problems, consistent)):
        lemma = check_descent_lemma(p, args.steps, step_scale=args.step_scale)
        mins, bounds = theorem1_curve(p, args.steps)
        thm1_ok = bool(np.all(mins <= bounds * (1.0 + 1e-9)))
        run = check_theorem2(pc, args.k_fraction, args.steps)
        plain = gradient_descent(pc, args.steps, 1.0 / pc.L)
        thm1_csv, thm2_csv = _trace_csv(plain, args.steps), _trace_csv(run.trace, args.steps)
        _write(out_dir / f"thm1_p{i:02d}.csv", thm1_csv)
        _write(out_dir / f"thm2_p{i:02d}.csv", thm2_csv)
        entry = {
            "problem": i, "d": p.d, "m": p.m, "L": p.L, "l_star": p.l_star,
            "descent_lemma_ok": lemma.ok, "descent_lemma_violations": lemma.violations,
            "theorem1_ok": thm1_ok, "theorem2": run.verdict(),
            "theorem2_trace_equals_theorem1": thm1_csv == thm2_csv,
        }
        verdict["problems"].append(entry)
        if not lemma.ok:
            failures.append(f"problem {i}: descent inequality fails at steps {lemma.violations[:10]}")
        if not thm1_ok:
            failures.append(f"problem {i}: rate bound violated")
    n = len(verdict["problems"])
    verdict["descent_lemma_pass"] = sum(e["descent_lemma_ok"] for e in verdict["problems"])
    verdict["theorem1_pass"] = sum(e["theorem1_ok"] for e in verdict["problems"])
    verdict["theorem2_pass"] = sum(e["theorem2"]["holds"] for e in verdict["problems"])
    verdict["mode"] = "demonstration" if demo else "check"
    _write(out_dir / "verdict.json", json.dumps(verdict, indent=2, sort_keys=True) + "\n")
    print(f"descent lemma {verdict['descent_lemma_pass']}/{n}, full-loss bound {verdict['theorem1_pass']}/{n}, "
          f"top-k bound {verdict['theorem2_pass']}/{n} (reported) -> {out_dir}")
    if failures:
        for f in failures:
            print(("violation (demonstration): " if demo else "FAIL: ") + f)
        if not demo:
            return EXIT_THEORY
    return EXIT_OK


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    data_path = Path(args.data)
    if not data_path.is_dir():
        raise MPGDError(f"dataset directory {data_path} does not exist")
    ds = load_dataset(data_path / "test") if (data_path / "test").is_dir() else load_dataset(data_path)
    report = evaluate(predict(model, ds.inputs), ds.targets)
    text = json.dumps({"metrics": report.to_dict(), "split": ds.split, "count": len(ds)},
                      indent=2, sort_keys=True) + "\n"
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return EXIT_OK


# parser ----------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat section.key = value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data", help="dataset directory produced by 'gen'")
    p.add_argument("--out", help="output directory (default: $MPGD_OUT or run.output_dir)")
    p.add_argument("--steps", type=positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--jobs", type=positive_int, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpgd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", choices=("spike", "scalar"), default="spike")
    g.add_argument("--grid", type=positive_int, default=32)
    g.add_argument("--samples", type=positive_int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-spikes", dest="n_spikes", type=positive_int, default=3)
    g.add_argument("--blur-radius", dest="blur_radius", type=int, default=1)
    g.add_argument("--dim", type=positive_int, default=8)
    g.add_argument("--outlier-fraction", dest="outlier_fraction", type=float, default=0.0)
    g.add_argument("--path", help="dataset directory (default: <out>/data/<task>_seed<seed>)")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one loss over one or more seeds")
    _train_flags(t)
    t.add_argument("--loss", choices=("mse", "amse", "max_error", "shrinkage", "biased"))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--a", type=float)
    t.add_argument("--c", type=float)
    t.add_argument("--log-eta", dest="log_eta", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="head-to-head comparison of loss variants")
    _train_flags(c)
    c.add_argument("--variants", help="';'-separated loss labels, e.g. 'mse; amse(lambda=0.007)'")
    c.set_defaults(func=cmd_compare)

    th = sub.add_parser("theory", help="check descent/convergence inequalities on quadratics")
    th.add_argument("--problems", type=positive_int, default=20)
    th.add_argument("--entries", type=positive_int, default=100)
    th.add_argument("--steps", type=positive_int, default=100)
    th.add_argument("--k-fraction", dest="k_fraction", type=float, default=0.05)
    th.add_argument("--step-scale", dest="step_scale", type=float, default=1.0)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    e = sub.add_parser("eval", help="score a saved model on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mpgd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TheoryAssertionError as exc:
        print(f"mpgd: theory check failed: {exc}", file=sys.stderr)
        return EXIT_THEORY
    except (MPGDError, OSError, ValueError, ArithmeticError) as exc:
        print(f"mpgd: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
