"""Command-line entry points: ``mlot <subcommand> ...``.

Exit codes: 0 success, 1 usage or contract error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import (
    CheckpointError,
    ContractError,
    ConvergenceError,
    MlotError,
    NonFiniteError,
    NumericalAbort,
    OracleInputError,
)
from .experiments import gaussian_samples, scene_configs, source_weights
from .nets import load_checkpoint
from .oracle import (
    DiscreteDistribution,
    GaussianSpec,
    discrete_barycenter_lp,
    gaussian_w2_squared,
    solve_discrete_ot,
)
from .restore import AggregationMode, RestoreMetrics, evaluate_decomposition
from .synth import Dataset, export_dataset, import_dataset, make_multisource_scene

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _points(text: str) -> np.ndarray:
    """``"0,1,3"`` -> three 1-D points; ``"0 0; 1 2"`` -> two 2-D points."""
    if ";" in text:
        return np.array([[float(x) for x in p.replace(",", " ").split()] for p in text.split(";") if p.strip()])
    return np.array([float(x) for x in text.split(",")]).reshape(-1, 1)


def _floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")])


def _emit(obj, out_dir=None, name: str | None = None) -> None:
    line = json.dumps(obj, sort_keys=True)
    print(line)
    if out_dir and name:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / name, "a") as fh:
            fh.write(line + "\n")


def write_summary_csv(path, rows: list[RestoreMetrics]) -> None:
    """One row per (mode, source) plus an ``avg`` row per evaluation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "source", "psnr", "orthogonality", "margin", "alignment"])
        for m in rows:
            for k, p in enumerate(m.psnr_per_source):
                w.writerow([m.mode, k, p, m.orthogonality_score, m.contrastive_margin, m.pushforward_alignment])
            w.writerow([m.mode, "avg", m.psnr_avg, m.orthogonality_score, m.contrastive_margin,
                        m.pushforward_alignment])


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if cfg.kind == "restore_toy":
        train_cfg, eval_cfg = scene_configs(cfg)
        for name, sc in (("train", train_cfg), ("eval", eval_cfg)):
            ds = make_multisource_scene(sc)
            export_dataset(ds, out / name)
            _emit({"schema": 1, "split": name, "counts": ds.manifest["counts"], "hash": ds.manifest["hash"]})
        return EXIT_OK
    if cfg.kind != "gaussian_barycenter":
        raise ContractError(f"gen-data does not apply to experiment kind {cfg.kind!r}")
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for k, x in enumerate(gaussian_samples(cfg)):
        fname = f"source{k}.f64"
        (out / fname).write_bytes(np.ascontiguousarray(x, "<f8").tobytes())
        files[fname] = list(x.shape)
    manifest = {"schema": 1, "kind": cfg.kind, "weights": source_weights(cfg).tolist(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _emit(manifest)
    return EXIT_OK


def cmd_train(args, restore: bool) -> int:
    from .train import train_barycenter, train_restore

    cfg = load_config(args.config, out_dir=args.out)
    if restore:
        if cfg.kind != "restore_toy":
            raise ContractError("train-restore needs experiment.kind = restore_toy")
        data = None
        if args.data:
            root = Path(args.data)
            data = (import_dataset(root / "train"), import_dataset(root / "eval"))
        bundle, log = train_restore(cfg, data)
        rows = []
        for snap in log.snapshots:
            rec = {k: v for k, v in snap.items() if k != "kind"}
            _emit(rec, args.out, "metrics.jsonl")
            fields = {k: v for k, v in snap.items() if k not in ("schema", "iteration", "kind")}
            rows.append(RestoreMetrics(**fields))
        write_summary_csv(Path(args.out) / "summary.csv", rows[-1:])
        return EXIT_OK
    if cfg.kind == "restore_toy":
        raise ContractError("train-bary needs experiment.kind = gaussian_barycenter or discrete_verify")
    bundle, log = train_barycenter(cfg)
    final = dict(log.records[-1])
    gaps = [s for s in log.snapshots if s["kind"] == "gap"]
    if gaps:
        final["gap"] = {k: v for k, v in gaps[-1].items() if k not in ("schema", "iteration", "kind")}
    _emit(final, args.out, "metrics.jsonl")
    with open(Path(args.out) / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "F", "rho", "e1", "e2", "bound", "measured_w2_sum", "pass"])
        for s in gaps:
            w.writerow([s["iteration"], "", "", s["e1"], s["e2"], s["bound"], s["measured_w2_sum"], s["pass"]])
    return EXIT_OK


def _load_eval_dataset(path) -> Dataset:
    root = Path(path)
    if (root / "eval" / "manifest.json").is_file():
        root = root / "eval"
    if not (root / "manifest.json").is_file():
        raise ContractError(f"no dataset manifest under {path}")
    return import_dataset(root)


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.encoder is None:
        raise ContractError("eval needs a restoration checkpoint")
    ds = _load_eval_dataset(args.data)
    mode = AggregationMode.parse(args.mode) if args.mode else None
    metrics = evaluate_decomposition(bundle, ds, mode)
    _emit({"schema": 1, "checkpoint": str(args.checkpoint), **metrics.to_dict()}, args.out, "metrics.jsonl")
    if args.out:
        write_summary_csv(Path(args.out) / "summary.csv", [metrics])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .diagnostics import run_diagnostics

    cfg = load_config(args.config)
    report = run_diagnostics(args.checkpoint, cfg)
    _emit({"schema": 1, **report.to_dict()}, args.out, "diagnostics.jsonl")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.problem == "ot":
        mu = DiscreteDistribution(_points(args.mu), _floats(args.mu_weights) if args.mu_weights else None)
        nu = DiscreteDistribution(_points(args.nu), _floats(args.nu_weights) if args.nu_weights else None)
        plan = solve_discrete_ot(mu, nu, args.cost, duals=args.duals)
        out = {"cost": plan.cost, "plan": plan.matrix.tolist()}
        if args.duals:
            out.update(row_duals=plan.row_duals.tolist(), col_duals=plan.col_duals.tolist())
        _emit(out)
    elif args.problem == "bary":
        mus = [DiscreteDistribution(_points(s)) for s in args.sources]
        lam = _floats(args.weights) if args.weights else np.full(len(mus), 1.0 / len(mus))
        res = discrete_barycenter_lp(mus, lam, _points(args.grid), cost=args.cost)
        _emit({"objective": res.objective, "support": res.distribution.points.tolist(),
               "weights": res.distribution.weights.tolist()})
    else:
        specs = []
        for text in (args.a, args.b):
            vals = _floats(text)
            if vals.size != 2:
                raise ContractError("Gaussian arguments are 'mean,variance' in one dimension")
            specs.append(GaussianSpec(np.array([vals[0]]), np.array([[vals[1]]])))
        _emit({"w2_squared": gaussian_w2_squared(*specs)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mlot", description="Multi-source latent OT barycenter experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a dataset from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    for name, hlp in (("train-bary", "train a barycenter map"), ("train-restore", "train the toy restorer")):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--config", required=True)
        t.add_argument("--out", required=True)
        if name == "train-restore":
            t.add_argument("--data", help="dataset directory written by gen-data")

    e = sub.add_parser("eval", help="evaluate a restoration checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=[m.value for m in AggregationMode])
    e.add_argument("--out")

    d = sub.add_parser("diagnose", help="duality-gap report for a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--out")

    o = sub.add_parser("oracle", help="exact reference solvers")
    osub = o.add_subparsers(dest="problem", required=True, parser_class=_Parser)
    ot = osub.add_parser("ot", help="discrete OT between two point sets")
    ot.add_argument("--mu", required=True, help="points, e.g. '0,1' or '0 0; 1 1'")
    ot.add_argument("--nu", required=True)
    ot.add_argument("--mu-weights")
    ot.add_argument("--nu-weights")
    ot.add_argument("--cost", default="euclidean", choices=["euclidean", "squared_euclidean"])
    ot.add_argument("--duals", action="store_true")
    by = osub.add_parser("bary", help="fixed-support barycenter LP")
    by.add_argument("--sources", nargs="+", required=True, help="one point list per source")
    by.add_argument("--weights")
    by.add_argument("--grid", required=True)
    by.add_argument("--cost", default="squared_euclidean", choices=["euclidean", "squared_euclidean"])
    ga = osub.add_parser("gauss", help="closed-form W2^2 between 1-D Gaussians")
    ga.add_argument("--a", required=True, help="mean,variance")
    ga.add_argument("--b", required=True, help="mean,variance")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command in ("train-bary", "train-restore"):
            return cmd_train(args, restore=args.command == "train-restore")
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "diagnose":
            return cmd_diagnose(args)
        return cmd_oracle(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, NonFiniteError, ConvergenceError) as exc:
        print(f"mlot: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, CheckpointError, OracleInputError, MlotError, FileNotFoundError, ValueError) as exc:
        print(f"mlot: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
