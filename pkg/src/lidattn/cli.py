"""``lidattn`` command line: data generation, training, evaluation, benchmarks."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import approx, bench
from .attention import AttentionConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (
    SyntheticSpec,
    dataset_summary,
    ensure_empty_dir,
    gen_synthetic,
    load_manifest,
    write_dataset,
)
from .head import evaluate
from .training import LidModel, LrSchedule, TrainConfig, predict, train_loop

SWEEP_R_GRID = (32, 64, 128, 256)
SWEEP_P_GRID = (2, 4, 6)
MODEL_DEFAULTS = {"r": 128, "p": 4, "n_cap": None, "dwc_width": 3}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_model_flags(p, with_mechanism=True):
    if with_mechanism:
        p.add_argument("--mechanism", choices=("self", "performer", "agent"), default="self",
                       help="attention mechanism")
    p.add_argument("--d-attn", type=int, default=64, help="total attention dimension")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--r", type=int, default=None, help="performer random features (performer only; default 128)")
    p.add_argument("--p", type=int, default=None, help="agent pooling layers, even (agent only; default 4)")
    p.add_argument("--n-cap", type=int, default=None, help="max agent count (agent only; default: uncapped)")
    p.add_argument("--dwc-width", type=int, default=None,
                   help="depth-wise conv width, odd (agent only; default 3)")
    p.add_argument("--no-normalize", action="store_true",
                   help="performer without the row normalizer (performer only)")


def _add_train_flags(p):
    p.add_argument("--steps", type=int, default=200, help="optimisation steps")
    p.add_argument("--batch-size", type=int, default=16, help="sequences per batch")
    p.add_argument("--lr", type=float, default=1e-4, help="peak learning rate")
    p.add_argument("--warmup", type=int, default=None,
                   help="warmup steps (default: 80/180 of --steps)")
    p.add_argument("--decay", type=int, default=None,
                   help="decay steps (default: --steps minus warmup)")
    p.add_argument("--dropout", type=float, default=0.2, help="dropout rate")
    p.add_argument("--eval-every", type=int, default=20, help="dev evaluation period in steps")
    p.add_argument("--patience", type=int, default=None,
                   help="stop after this many dev evaluations without improvement (default: off)")
    p.add_argument("--seed", type=int, default=0, help="master seed")


def build_parser():
    parser = _Parser(prog="lidattn", description=__doc__, formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic embedding dataset", formatter_class=_Formatter)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--classes", type=int, default=5, help="number of classes")
    g.add_argument("--per-class", type=int, default=100, help="training sequences per class")
    g.add_argument("--dev-per-class", type=int, default=0, help="dev sequences per class (dev.json)")
    g.add_argument("--test-per-class", type=int, default=0, help="test sequences per class (test.json)")
    g.add_argument("--d-model", type=int, default=1024, help="embedding dimension")
    g.add_argument("--n-min", type=int, default=20, help="minimum sequence length")
    g.add_argument("--n-max", type=int, default=40, help="maximum sequence length")
    g.add_argument("--mean-scale", type=float, default=4.0, help="norm of each class mean")
    g.add_argument("--noise-scale", type=float, default=1.0, help="per-coordinate noise std")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")

    t = sub.add_parser("train", help="train the LID block", formatter_class=_Formatter)
    t.add_argument("--manifest", required=True, help="training manifest")
    t.add_argument("--dev-manifest", default=None, help="dev manifest for checkpoint selection")
    _add_model_flags(t)
    _add_train_flags(t)
    t.add_argument("--checkpoint", default="checkpoint.lid", help="output checkpoint path")
    t.add_argument("--log", default="loss.csv", help="output loss log CSV")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=_Formatter)
    e.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    e.add_argument("--manifest", required=True, help="evaluation manifest")
    e.add_argument("--out", default="report.json", help="output report JSON")
    e.add_argument("--mechanism", choices=("self", "performer", "agent"), default=None,
                   help="expected mechanism; rejected if the checkpoint differs")

    b = sub.add_parser("bench", help="time forward passes against sequence length", formatter_class=_Formatter)
    b.add_argument("--mechanisms", default="self,performer,agent", help="comma-separated mechanisms")
    b.add_argument("--agent-mode", choices=("capped", "paper", "both"), default="capped",
                   help="agent count fixed by --n-cap, tied to N by --p, or both")
    b.add_argument("--n-grid", type=_int_list, default=[512, 1024, 2048, 4096, 8192],
                   help="sequence lengths")
    b.add_argument("--d-attn", type=int, default=64, help="attention dimension (one head)")
    b.add_argument("--r", type=int, default=64, help="performer random features")
    b.add_argument("--p", type=int, default=4, help="agent pooling layers for uncapped agents (--agent-mode paper)")
    b.add_argument("--n-cap", type=int, default=64, help="agent count in capped mode")
    b.add_argument("--repetitions", type=int, default=5, help="timed runs per point")
    b.add_argument("--warmup", type=int, default=1, help="untimed runs per point")
    b.add_argument("--seed", type=int, default=0, help="master seed")
    b.add_argument("--out", default="bench_report", help="report directory")

    a = sub.add_parser("approx", help="performer vs exact attention error study", formatter_class=_Formatter)
    a.add_argument("--r-grid", type=_int_list, default=[16, 64, 256], help="feature counts")
    a.add_argument("--seeds", type=int, default=32, help="number of seeded trials")
    a.add_argument("--n", type=int, default=64, help="sequence length")
    a.add_argument("--d-head", type=int, default=16, help="head dimension")
    a.add_argument("--input-std", type=float, default=1.0, help="std of the random Q, K, V entries")
    a.add_argument("--no-normalize", action="store_true", help="use the unnormalized performer")
    a.add_argument("--out", default="approx.csv", help="output CSV")

    s = sub.add_parser("sweep", help="train and test over the r and p grids", formatter_class=_Formatter)
    s.add_argument("--manifest", required=True, help="training manifest")
    s.add_argument("--test-manifest", required=True, help="test manifest")
    s.add_argument("--dev-manifest", default=None, help="dev manifest for checkpoint selection")
    s.add_argument("--r-grid", type=_int_list, default=list(SWEEP_R_GRID), help="performer r values")
    s.add_argument("--p-grid", type=_int_list, default=list(SWEEP_P_GRID), help="agent p values")
    s.add_argument("--no-self", action="store_true", help="skip the self-attention baseline")
    _add_model_flags(s, with_mechanism=False)
    _add_train_flags(s)
    s.add_argument("--out", default="sweep.csv", help="output CSV")
    return parser


def _model_config(args, d_model, mechanism=None, **override):
    mechanism = mechanism or args.mechanism
    given = {k: getattr(args, k) for k in MODEL_DEFAULTS}
    if mechanism != "performer":
        if given["r"] is not None or args.no_normalize:
            raise CliError(f"--r/--no-normalize apply to performer only, not {mechanism}")
    if mechanism != "agent":
        for k in ("p", "n_cap", "dwc_width"):
            if given[k] is not None:
                raise CliError(f"--{k.replace('_', '-')} applies to agent only, not {mechanism}")
    values = {k: (v if v is not None else MODEL_DEFAULTS[k]) for k, v in given.items()}
    values.update(override)
    try:
        return AttentionConfig(mechanism=mechanism, d_model=d_model, d_attn=args.d_attn, heads=args.heads,
                               performer_normalized=not args.no_normalize, **values)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _train_parts(args):
    cfg = TrainConfig(dropout_rate=args.dropout, batch_size=args.batch_size, max_steps=args.steps,
                      seed=args.seed, eval_every=args.eval_every, patience=args.patience)
    if args.warmup is None and args.decay is None:
        sched = LrSchedule.scaled(args.steps, args.lr)
    else:
        warmup = args.warmup if args.warmup is not None else 0
        decay = args.decay if args.decay is not None else max(args.steps - warmup, 1)
        sched = LrSchedule(args.lr, warmup, decay)
    return cfg, sched


def _load(path):
    m = load_manifest(path)
    return m, m.load_sequences()


def cmd_gen_data(args):
    out = ensure_empty_dir(args.out, args.force)
    spec = SyntheticSpec(n_classes=args.classes, d_model=args.d_model, n_min=args.n_min, n_max=args.n_max,
                         mean_scale=args.mean_scale, noise_scale=args.noise_scale,
                         per_class=args.per_class, seed=args.seed)
    names = [f"lang{c:02d}" for c in range(args.classes)]
    summary = {}
    for name, count, stream in (("manifest", args.per_class, 1), ("dev", args.dev_per_class, 2),
                                ("test", args.test_per_class, 3)):
        if name != "manifest" and count == 0:
            continue
        data = gen_synthetic(spec, per_class=count, stream=stream, prefix=name[0])
        write_dataset(data, out, f"{name}.json", names)
        summary[name] = dataset_summary(data, args.classes)
    print(json.dumps({"out": str(out), "classes": args.classes, "d_model": args.d_model, "splits": summary}))
    return 0


def _train_model(args, manifest, data, dev, config):
    cfg, sched = _train_parts(args)
    model = LidModel.init(config, manifest.n_classes, seed=args.seed)
    return train_loop(model, data, cfg, sched, dev)


def cmd_train(args):
    manifest, data = _load(args.manifest)
    dev = _load(args.dev_manifest)[1] if args.dev_manifest else None
    config = _model_config(args, manifest.d_model)
    model, log = _train_model(args, manifest, data, dev, config)
    save_checkpoint(args.checkpoint, model, label_names=manifest.labels,
                    extra={"best_step": log.best_step, "best_dev_accuracy": log.best_dev_accuracy})
    log.write_csv(args.log)
    train_acc = float(np.mean(predict(model, data) == [s.label for s in data])) if data else 0.0
    final_loss = log.rows[-1]["loss"] if log.rows else float("nan")
    print(f"steps={len(log.rows)} final_loss={final_loss:.6f} train_accuracy={train_acc:.4f}")
    if dev is not None:
        print(f"best_dev_accuracy={log.best_dev_accuracy:.4f} selected_step={log.best_step}")
    return 0


def cmd_eval(args):
    model, _, header = load_checkpoint(args.checkpoint)
    manifest, data = _load(args.manifest)
    problems = []
    if manifest.d_model != model.config.d_model:
        problems.append(f"d_model {manifest.d_model} != {model.config.d_model}")
    if manifest.n_classes != model.n_classes:
        problems.append(f"classes {manifest.n_classes} != {model.n_classes}")
    elif header.get("label_names") and header["label_names"] != manifest.labels:
        problems.append("label names differ")
    if args.mechanism and args.mechanism != model.config.mechanism:
        problems.append(f"mechanism {args.mechanism} != {model.config.mechanism}")
    if problems:
        requested = {"d_model": manifest.d_model, "labels": manifest.labels, "mechanism": args.mechanism}
        ckpt = dict(model.config.to_dict(), labels=header.get("label_names"))
        raise CliError(f"config/checkpoint mismatch ({'; '.join(problems)}): "
                       f"requested={json.dumps(requested)} checkpoint={json.dumps(ckpt)}")
    report = evaluate(predict(model, data), [s.label for s in data], model.n_classes)
    Path(args.out).write_text(report.to_json(indent=1) + "\n")
    print(f"Acc {100 * report.accuracy:.2f} F1 {100 * report.macro_f1:.2f}")
    return 0


def bench_specs(args):
    specs = []
    for mech in [m.strip() for m in args.mechanisms.split(",") if m.strip()]:
        if mech not in ("self", "performer", "agent"):
            raise CliError(f"unknown mechanism {mech!r}")
        common = dict(n_grid=tuple(args.n_grid), d_attn=args.d_attn, r=args.r, p=args.p,
                      repetitions=args.repetitions, warmup=args.warmup, seed=args.seed)
        if mech != "agent":
            specs.append(bench.BenchSpec(mech, **common))
            continue
        if args.agent_mode in ("capped", "both"):
            specs.append(bench.BenchSpec("agent", n_cap=args.n_cap, **common))
        if args.agent_mode in ("paper", "both"):
            specs.append(bench.BenchSpec("agent", **common))
    return specs


def cmd_bench(args):
    try:
        specs = bench_specs(args)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    results = []
    for spec in specs:
        res = bench.run_bench(spec)
        results.append(res)
        ok, band = bench.slope_verdict(res)
        band_text = "none" if band is None else f"[{band[0]}, {'inf' if band[1] is None else band[1]}]"
        print(f"{res.label} slope={res.slope:.3f} r2={res.r2:.4f} band={band_text} "
              f"{'PASS' if ok else 'FAIL'}")
    bench.emit_report(results, args.out)
    return 0


def cmd_approx(args):
    rows = approx.approximation_errors(args.r_grid, range(args.seeds), args.n, args.d_head,
                                       normalized=not args.no_normalize, input_std=args.input_std)
    approx.write_csv(rows, args.out)
    for r, med in approx.median_by_r(rows).items():
        print(f"r={r} median_error={med:.6f}")
    return 0


def cmd_sweep(args):
    manifest, data = _load(args.manifest)
    test_m, test = _load(args.test_manifest)
    dev = _load(args.dev_manifest)[1] if args.dev_manifest else None
    if args.r is not None or args.p is not None:
        raise CliError("sweep takes --r-grid/--p-grid, not --r/--p")
    runs = [] if args.no_self else [("self", {})]
    runs += [("performer", {"r": r}) for r in args.r_grid]
    runs += [("agent", {"p": p}) for p in args.p_grid]
    rows = []
    for mech, override in runs:
        config = _model_config(args, manifest.d_model, mechanism=mech, **override)
        model, _ = _train_model(args, manifest, data, dev, config)
        report = evaluate(predict(model, test), [s.label for s in test], test_m.n_classes)
        name = mech + "".join(f" ({k}={v})" for k, v in override.items())
        rows.append({"method": name, "accuracy": report.accuracy, "macro_f1": report.macro_f1})
        print(f"{name:<22} Acc {100 * report.accuracy:6.2f} F1 {100 * report.macro_f1:6.2f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "accuracy", "macro_f1"])
        w.writeheader()
        w.writerows(rows)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "approx": cmd_approx,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
