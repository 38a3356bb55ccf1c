"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 property violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import checks
from .data import DEFAULT_CUTOFF, OOD_SIZES, generate_dataset, load_dataset, make_oracle_params, save_dataset
from .errors import (
    ConfigurationError,
    DiagnosticError,
    DivergenceError,
    GenerationError,
    LoadError,
    ParameterError,
    TraceGradError,
    UsageError,
)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .structures import DEFAULT_BASIS
from .training import (
    ARMS,
    Adam,
    TrainConfig,
    block_table,
    evaluate,
    format_table,
    load_selection,
    model_predictor,
    oracle_predictor,
    run_ablation,
    save_selection,
    scaling_benchmark,
    select_challenging,
    summarize_ablation,
    train,
    write_json,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PROPERTY = 0, 2, 3, 4
DATA_DIR_ENV = "TRACEGRAD_DATA_DIR"

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
PATH_KEYS = {"data", "out", "log", "resume"}


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    """Flat JSON object whose keys name ModelConfig / TrainConfig fields or paths."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a flat JSON object")
    unknown = set(cfg) - MODEL_KEYS - TRAIN_KEYS - PATH_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def split_config(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    mc = ModelConfig(**{k: v for k, v in cfg.items() if k in MODEL_KEYS})
    tc = TrainConfig(**{k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    return mc, tc


def resolve_input(path: str) -> str:
    """Existing path as given, else relative to $TRACEGRAD_DATA_DIR."""
    if os.path.exists(path):
        return path
    base = os.environ.get(DATA_DIR_ENV)
    if base and not os.path.isabs(path) and os.path.exists(os.path.join(base, path)):
        return os.path.join(base, path)
    raise UsageError(f"input file not found: {path}")


def resolve_output(path: str) -> str:
    if not os.path.isabs(path) and os.environ.get(DATA_DIR_ENV) and os.path.dirname(path) == "":
        path = os.path.join(os.environ[DATA_DIR_ENV], path)
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write to {path}")
    return path


def parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = resolve_output(args.out)
    oracle = make_oracle_params(DEFAULT_BASIS, args.oracle_seed)
    if args.splits:
        counts = [int(x) for x in args.splits.split(",")]
        if len(counts) != 3:
            raise UsageError("--splits takes three counts: train,val,test")
        ranges = dict(OOD_SIZES) if args.ood else {s: parse_range(args.sizes) for s in ("train", "val", "test")}
        records = []
        for name, count in zip(("train", "val", "test"), counts):
            records += generate_dataset(
                count, ranges[name], args.species, args.seed, split=name, cutoff=args.cutoff, oracle=oracle
            )
    else:
        records = generate_dataset(
            args.count, parse_range(args.sizes), args.species, args.seed, split=args.split, cutoff=args.cutoff,
            oracle=oracle,
        )
    save_dataset(out, records, DEFAULT_BASIS, args.oracle_seed)
    sizes = [r.system.n_atoms for r in records]
    n_blocks = sum(len(r.blocks) for r in records)
    vals = np.concatenate([m.ravel() for r in records for _, m in r.blocks.items()])
    print(f"wrote {len(records)} records to {out}")
    print(f"atoms per system: min {min(sizes)} max {max(sizes)} mean {np.mean(sizes):.2f}")
    print(f"blocks: {n_blocks}  entry mean |H| {np.mean(np.abs(vals)):.6g}  std {np.std(vals):.6g}")
    return EXIT_OK


def _splits_from(dataset):
    tr = dataset.split("train")
    va = dataset.split("val")
    te = dataset.split("test")
    return tr, va, te


def _train_config_from(args, cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    merged = dict(cfg)
    for key, attr in (("mode", "mode"), ("lam", "lam"), ("epochs", "epochs"), ("lr", "lr"), ("batch", "batch"),
                      ("seed", "seed"), ("threads", "threads"), ("K", "K")):
        val = getattr(args, attr, None)
        if val is not None:
            merged[key] = val
    if "lam" in merged and merged["lam"] > 0:
        merged.setdefault("trace_head", True)
    return split_config(merged)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_path = resolve_input(args.data or cfg.get("data") or _missing("--data"))
    out = resolve_output(args.out or cfg.get("out") or _missing("--out"))
    log_path = args.log or cfg.get("log") or out + ".log"
    resolve_output(log_path)
    dataset = load_dataset(data_path)
    tr, va, _ = _splits_from(dataset)
    if not tr:
        tr = dataset.records
    start_epoch, optimizer, resume_state = 0, None, None
    resume = args.resume or cfg.get("resume")
    if resume:
        ck = load_checkpoint(resolve_input(resume))
        model = ck.model
        _, tc = _train_config_from(args, {**cfg, **ck.meta.get("train_config", {}), **_flag_overrides(args)})
        start_epoch = int(ck.meta.get("epoch", -1)) + 1
        resume_state = dict(ck.meta.get("resume_state") or {})
        resume_state["best_params"] = {k: v.copy() for k, v in model.params.items()}
        if ck.extra:
            last = {k[5:]: v for k, v in ck.extra.items() if k.startswith("last.")}
            if last:
                model.params = last
            optimizer = Adam(model.params, tc.lr, state=ck.extra)
    else:
        mc, tc = _train_config_from(args, cfg)
        model = Model(mc, dataset.basis, seed=tc.seed)
    train_s = [model.prepare(r.system, r.blocks) for r in tr]
    val_s = [model.prepare(r.system, r.blocks) for r in va] if va else None
    sidecar = log_path + ".jsonl"
    with open(log_path, "a") as log_fh, open(sidecar, "a") as side_fh:
        log_fh.write(f"# train {time.strftime('%Y-%m-%d %H:%M:%S')} data={data_path} lambda={tc.lam!r} mode={model.config.mode}\n")

        def report(entry):
            line = (
                f"epoch {entry.epoch:5d} loss_H {entry.loss_H:.6e} loss_T {entry.loss_T:.6e} "
                f"mu {entry.mu:.6e} total {entry.total:.6e} val_mae_all "
                f"{'-' if entry.val_mae_all is None else format(entry.val_mae_all, '.6e')}"
            )
            log_fh.write(line + "\n")
            log_fh.flush()
            side_fh.write(json.dumps(entry.to_json()) + "\n")
            side_fh.flush()
            if not args.quiet and entry.epoch % max(tc.log_every, 1) == 0:
                print(line)

        res = train(model, train_s, tc, val_s, optimizer=optimizer, start_epoch=start_epoch, callback=report,
                    resume_state=resume_state)
    last_epoch = res.log[-1].epoch if res.log else start_epoch - 1
    model.params = res.best_params if (val_s and not args.keep_last) else res.params
    meta = {
        "lambda": tc.lam,
        "train_config": tc.to_json(),
        "epoch": last_epoch,
        "best_epoch": res.best_epoch,
        "best_val_mae_all": res.best_val,
        "data": os.path.abspath(data_path),
        "data_checksum": dataset.header.get("checksum"),
        "resume_state": res.resume_state,
    }
    extra = res.optimizer.state()
    extra.update({f"last.{k}": v for k, v in res.params.items()})
    save_checkpoint(out, model, meta, extra)
    if args.last_out:
        last = Model(model.config, model.basis, params=res.params)
        save_checkpoint(resolve_output(args.last_out), last, meta, extra)
    print(f"saved checkpoint to {out} (best epoch {res.best_epoch}, val mae_all {res.best_val})")
    return EXIT_OK


def _flag_overrides(args) -> dict:
    out = {}
    for key in ("lam", "epochs", "lr", "batch", "seed", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _missing(flag):
    raise UsageError(f"{flag} is required")


def cmd_eval(args) -> int:
    dataset = load_dataset(resolve_input(args.data))
    records = dataset.split(args.split) or dataset.records
    if args.oracle:
        predict = oracle_predictor(make_oracle_params(dataset.basis, dataset.header.get("oracle_seed", 0)), dataset.basis)
    else:
        if not args.checkpoint:
            raise UsageError("give --checkpoint or --oracle")
        predict = model_predictor(load_checkpoint(resolve_input(args.checkpoint)).model)
    selection = load_selection(resolve_input(args.selection)) if args.selection else None
    report = evaluate(predict, records, dataset.basis, challenging=selection, require_challenging=args.require_cha)
    if args.save_selection:
        save_selection(resolve_output(args.save_selection), select_challenging(report.per_sample_mae),
                       {"data": os.path.abspath(args.data), "split": args.split})
    for _, name, val in report.rows():
        print(f"{name:<18} {'-' if val is None else format(val, '.6g')}")
    print(block_table(report))
    if args.out:
        write_json(resolve_output(args.out), report.to_json())
    return EXIT_OK


def cmd_check(args) -> int:
    wanted = {k for k in ("so3", "grad", "cg") if getattr(args, k)}
    if args.all:
        wanted = {"so3", "grad", "cg"}
    if not wanted and not args.data:
        wanted = {"so3", "grad", "cg"}
    wigner = checks.FAULTS[args.inject_fault] if args.inject_fault else checks.wigner_d
    results = []
    if "so3" in wanted:
        results += checks.so3_suite(args.trials, args.seed, wigner)
    if "cg" in wanted:
        results += checks.cg_suite(args.trials, args.seed, wigner)
    if "grad" in wanted:
        results += checks.block_suite(args.trials, args.seed, wigner)
        results.append(checks.PropertyResult("grad", "second_order_fd", checks.second_order_fd(args.seed), 1e-5, 1))
    if args.data:
        ds = load_dataset(resolve_input(args.data))
        oracle = make_oracle_params(ds.basis, ds.header.get("oracle_seed", 0))
        results += checks.data_suite(ds.records, ds.basis, oracle, args.seed, args.trials)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    mc, tc = _train_config_from(args, cfg)
    if args.data:
        ds = load_dataset(resolve_input(args.data))
        splits = {"train": ds.split("train"), "val": ds.split("val"), "test": ds.split("test")}
        basis = ds.basis
    else:
        from .data import generate_splits

        counts = tuple(int(x) for x in args.splits.split(","))
        splits = generate_splits(counts, parse_range(args.sizes), seed=args.data_seed, ood=args.ood)
        basis = DEFAULT_BASIS
    seeds = [tc.seed + k for k in range(args.n_seeds)]
    out = resolve_output(args.out) if args.out else None
    arms = None
    if args.arms:
        arms = [a.strip() for a in args.arms.split(",")]
        known = {name for name, _, _ in ARMS}
        if not set(arms) <= known:
            raise UsageError(f"unknown arms {sorted(set(arms) - known)}; choose from {sorted(known)}")
    results = run_ablation(splits, basis, mc, tc, seeds, args.lam_star, arms=arms,
                           progress=None if args.quiet else print)
    summary = summarize_ablation(results)
    print(format_table(summary))
    if out:
        rows = []
        for r in results:
            rows += [{"arm": a, "seed": r.seed, "metric": m, "value": v} for a, m, v in r.report.rows(r.arm)]
        write_json(out, {"summary": summary, "rows": rows, "seeds": seeds, "lam_star": args.lam_star})
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    cfg = load_config(args.config)
    mc, tc = _train_config_from(args, cfg)
    model = Model(mc, DEFAULT_BASIS, seed=tc.seed)
    sizes = [int(x) for x in args.sizes.split(",")]
    rep = scaling_benchmark(model, sizes, args.repeats, tc.seed)
    print(f"{'N':>6}{'edges':>8}{'seconds':>12}")
    for n, e, t in zip(rep.sizes, rep.edges, rep.seconds):
        print(f"{n:>6}{e:>8}{t:>12.5f}")
    print(f"fit t = {rep.slope:.4g}*N + {rep.intercept:.4g}  R^2 = {rep.r2:.4f}")
    if args.out:
        write_json(resolve_output(args.out), rep.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="flat JSON config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=None, help="sample-level worker threads (1 = bitwise reproducible)")
    p.add_argument("--out", help="output path")


def _model_flags(p):
    p.add_argument("--mode", choices=("grad", "gate", "off"))
    p.add_argument("--lambda", dest="lam", type=float, help="trace-loss weight (default 0.3)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--K", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracegrad", description="Trace-supervised equivariant Hamiltonian regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--sizes", default="4:14", help="atom-count range LO:HI")
    p.add_argument("--species", type=int, default=2)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--splits", help="train,val,test counts; writes all three splits")
    p.add_argument("--ood", action="store_true", help="disjoint split sizes 4-8 / 9-10 / 11-14")
    p.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    p.add_argument("--oracle-seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _model_flags(p)
    p.add_argument("--data")
    p.add_argument("--log", help="append-only text log (a .jsonl sidecar is written next to it)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--last-out", help="also save the final-epoch parameters here")
    p.add_argument("--keep-last", action="store_true", help="save final instead of best-validation params")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the oracle")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="evaluate the data-generating oracle itself")
    p.add_argument("--split", default="test")
    p.add_argument("--selection", help="challenging-sample selection file")
    p.add_argument("--save-selection", help="store the worst-5%% selection of this run")
    p.add_argument("--require-cha", action="store_true", help="fail if no selection is given")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run randomized property suites")
    _common(p)
    p.add_argument("--so3", action="store_true")
    p.add_argument("--grad", action="store_true")
    p.add_argument("--cg", action="store_true")
    p.add_argument("--all", action="store_true")
    p.add_argument("--data", help="dataset file to verify")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", choices=sorted(checks.FAULTS), help="negative control")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("ablate", help="six-arm ablation")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", help="dataset with train/val/test splits (generated if omitted)")
    p.add_argument("--splits", default="512,64,64")
    p.add_argument("--sizes", default="4:14")
    p.add_argument("--ood", action="store_true")
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--lam-star", type=float, default=0.3)
    p.add_argument("--arms", help="comma-separated subset of arms (baseline always runs)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-scaling", help="inference time versus system size")
    _common(p)
    _model_flags(p)
    p.add_argument("--sizes", default="16,32,64,128")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", None) is None and args.command in ("gen-data", "check"):
        args.seed = 7 if args.command == "gen-data" else 0
    try:
        return args.func(args)
    except (DivergenceError, DiagnosticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, ParameterError, LoadError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceGradError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
