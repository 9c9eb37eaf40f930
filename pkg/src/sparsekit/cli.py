"""Command-line entry point for the toolkit.

Subcommands: prune, compress, bench, train, experiment, report. Exit codes
follow the usual convention: 0 on success, 1 on usage errors (bad flags,
malformed values, unknown --set keys), 2 on runtime failures (missing or
corrupt files, infeasible shapes, diverged training, failed experiment
rows). With --json each command prints a single machine-parsable JSON
object on stdout; progress and warnings go to stderr either way.

Orchestration is single threaded. The only parallelism lives inside the
kernel bench, and the SPARSEKIT_THREADS environment variable caps the
thread count any command may request. Commands that take a config file
share one flat `key = value` grammar (see the config module); the
effective config with defaults applied is written into every run
directory, and run directories are named by a hash of that text so
different configurations never overwrite each other.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import bench, config, experiment, formats, kernels, pruning, report
from . import tensor, training
from .distill import VARIANTS
from .model import TinyModelConfig, save_checkpoint
from .task import SyntheticTask

PROG = "sparsekit"


class UsageError(Exception):
    """Raised for operator mistakes detected after argparse (exit 1)."""


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the documented usage exit is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _shape_arg(text):
    parts = text.lower().split("x")
    try:
        rows, cols = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, want ROWSxCOLS")
    if len(parts) != 2 or rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, want ROWSxCOLS")
    return rows, cols


def _sparsity_list_arg(text):
    try:
        values = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sparsity list {text!r}")
    for s in values:
        if not 0.0 <= s < 1.0:
            raise argparse.ArgumentTypeError(
                f"sparsity must be in [0, 1), got {s:g}")
    return values


def _unit_sparsity_arg(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sparsity {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(
            f"sparsity must be in [0, 1], got {value:g}")
    return value


def _nm_arg(text):
    try:
        return formats.parse_nm(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _positive_int_arg(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"need a positive integer, got {value}")
    return value


def _set_arg(text):
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(
            f"bad override {text!r}, want key=value")
    return key.strip(), value.strip()


def _thread_cap():
    raw = os.environ.get("SPARSEKIT_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise RuntimeError(f"SPARSEKIT_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise RuntimeError(f"SPARSEKIT_THREADS must be >= 1, got {cap}")
    return cap


def _resolve_threads(requested):
    """Clamp a requested thread count to the env cap and the actual cores."""
    limit = kernels.max_threads()
    cap = _thread_cap()
    if cap is not None:
        limit = min(limit, cap)
    if requested > limit:
        print(f"{PROG}: capping threads at {limit} (requested {requested})",
              file=sys.stderr)
        return limit
    return requested


def _memory_precheck(rows, cols):
    """Refuse shapes that cannot fit before any array is allocated.

    The bench holds the dense matrix, one compressed copy, and a
    decompressed verification copy at once, so require roughly three times
    the dense fp32 footprint plus slack.
    """
    need = 3 * rows * cols * 4 + (1 << 26)
    phys = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    if need > phys:
        raise RuntimeError(
            f"shape {rows}x{cols} needs about {need / 2**30:.1f} GiB, "
            f"machine has {phys / 2**30:.1f} GiB")


def _load_cli_config(args):
    overrides = {}
    pairs = getattr(args, "set", None) or []
    if pairs:
        text = "\n".join(f"{k} = {v}" for k, v in pairs)
        try:
            overrides = config.parse_config_text(text, source="--set")
        except config.ConfigError as exc:
            raise UsageError(str(exc))
    return config.load_config(args.config, overrides=overrides)


def _task_from(cfg):
    return SyntheticTask(vocab=cfg.vocab, seq=cfg.seq, seed=cfg.task_seed,
                         train_size=cfg.train_size, val_size=cfg.val_size,
                         test_size=cfg.test_size)


def _model_config_from(cfg):
    return TinyModelConfig(vocab=cfg.vocab, d_model=cfg.d_model,
                           blocks=cfg.blocks, seq=cfg.seq)


def _start_run_dir(cfg):
    run_dir = cfg.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    cfg.write_effective(run_dir)
    return run_dir


def _emit(args, payload, human_lines):
    if args.json:
        print(json.dumps(payload))
    else:
        for line in human_lines:
            print(line)


def cmd_prune(args):
    w = tensor.load_skdm(args.input)
    if args.nm is not None:
        pruned, mask = pruning.nm_project(w, args.nm)
    else:
        pruned, mask = pruning.magnitude_prune(w, args.sparsity)
    tensor.save_skdm(args.output, pruned)
    mask_path = args.mask or os.path.splitext(args.output)[0] + ".skbm"
    pruning.save_skbm(mask_path, mask)
    stats = formats.sparsity_of(pruned)
    print(json.dumps(dataclasses.asdict(stats)))
    return 0


def cmd_compress(args):
    w = tensor.load_skdm(args.input)
    c = formats.compress(w, args.width)
    formats.save_skbc(args.output, c)
    stats = formats.sparsity_of(w, args.width)
    payload = {"out": args.output, "value_width": args.width}
    payload.update(dataclasses.asdict(stats))
    print(json.dumps(payload))
    return 0


def cmd_bench(args):
    rows, cols = args.shape
    _memory_precheck(rows, cols)
    threads = _resolve_threads(args.threads)
    results = bench.run_bench((rows, cols), args.sparsities,
                              value_width=args.width, reps=args.reps,
                              warmup=args.warmup, threads=threads,
                              tile_rows=args.tile_rows, seed=args.seed,
                              csv_path=args.out)
    if any(r.timer_warning for r in results):
        print(f"{PROG}: warning: timings close to timer resolution",
              file=sys.stderr)
    rows_out = []
    for r in results:
        d = dataclasses.asdict(r)
        d["gbps"] = r.gbps
        rows_out.append(d)
    human = [f"wrote {args.out}",
             f"{'sparsity':>8} {'width':>6} {'threads':>7} "
             f"{'median_ms':>10} {'GB/s':>7} {'speedup':>8}"]
    human += [f"{r.sparsity:>8g} {r.value_width:>6} {r.threads:>7d} "
              f"{r.median_ns / 1e6:>10.3f} {r.gbps:>7.2f} "
              f"{r.self_speedup:>8.2f}" for r in results]
    _emit(args, {"csv": args.out, "rows": rows_out}, human)
    return 0


def cmd_train(args):
    cfg = _load_cli_config(args)
    run_dir = _start_run_dir(cfg)
    task = _task_from(cfg)
    teacher, run = experiment.train_teacher(
        task, _model_config_from(cfg), epochs=cfg.teacher_epochs,
        lr=cfg.teacher_lr, seed=cfg.teacher_seed, batch_size=cfg.batch_size,
        warmup_frac=cfg.warmup_frac, weight_decay=cfg.weight_decay)
    trained = teacher
    if cfg.variant != "ce":
        # Dense distillation: a fresh student copy learns from the teacher
        # on the same training split.
        trained = teacher.copy()
        run = training.train(trained, task, cfg.variant, epochs=cfg.epochs,
                             lr=cfg.lr, seed=cfg.seeds[0], teacher=teacher,
                             lam=cfg.lam, batch_size=cfg.batch_size,
                             warmup_frac=cfg.warmup_frac,
                             weight_decay=cfg.weight_decay)
    save_checkpoint(os.path.join(run_dir, "checkpoint"), trained)
    with open(os.path.join(run_dir, report.TRAIN_CSV), "w") as fh:
        fh.write(run.step_csv())

    t_val, _ = training.evaluate(teacher, *task.split("val"))
    t_acc, t_ent = training.evaluate(teacher, *task.split("test"))
    summary = {
        "config_hash": cfg.config_hash(),
        "variant": cfg.variant,
        "teacher": {"val_accuracy": t_val, "test_accuracy": t_acc,
                    "test_entropy": t_ent},
        "train": run.summary(),
    }
    if cfg.variant != "ce":
        s_val, _ = training.evaluate(trained, *task.split("val"))
        s_acc, s_ent = training.evaluate(trained, *task.split("test"))
        summary["student"] = {"val_accuracy": s_val, "test_accuracy": s_acc,
                              "test_entropy": s_ent}
    with open(os.path.join(run_dir, report.SUMMARY_JSON), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    final = summary.get("student", summary["teacher"])
    human = [f"run dir {run_dir}",
             f"val accuracy {final['val_accuracy']:.4f}",
             f"test accuracy {final['test_accuracy']:.4f}"]
    _emit(args, {"run_dir": run_dir, **summary}, human)
    if run.diverged:
        print(f"{PROG}: error: training diverged at step "
              f"{run.diverged_step}", file=sys.stderr)
        return 2
    return 0


def cmd_experiment(args):
    cfg = _load_cli_config(args)
    run_dir = _start_run_dir(cfg)
    task = _task_from(cfg)

    def progress(record):
        print(f"{PROG}: s={record.sparsity:g} {record.variant} "
              f"seed={record.seed} acc={record.accuracy:.4f} "
              f"diverged={int(record.diverged)}", file=sys.stderr)

    rep = experiment.run_recovery_experiment(
        sparsities=cfg.sparsities, variants=cfg.variants, seeds=cfg.seeds,
        task=task, config=_model_config_from(cfg), epochs=cfg.epochs,
        lr=cfg.lr, lam=cfg.lam, batch_size=cfg.batch_size,
        teacher_epochs=cfg.teacher_epochs, teacher_lr=cfg.teacher_lr,
        teacher_seed=cfg.teacher_seed, finetune_seed=cfg.finetune_seed,
        finetune_size=cfg.finetune_size, prune_mode=cfg.prune_mode,
        schedule_levels=cfg.sparsity_levels,
        schedule_epochs_per_level=cfg.schedule_epochs_per_level,
        restart_schedule_per_level=cfg.restart_schedule_per_level,
        warmup_frac=cfg.warmup_frac, weight_decay=cfg.weight_decay,
        quantize=cfg.quantize, progress=progress)

    with open(os.path.join(run_dir, report.EXPERIMENT_CSV), "w") as fh:
        fh.write(rep.to_csv())
    if cfg.quantize:
        with open(os.path.join(run_dir, report.QUANT_CSV), "w") as fh:
            fh.write(rep.quant_csv())
    summary = {"config_hash": cfg.config_hash()}
    summary.update(rep.summary())
    with open(os.path.join(run_dir, report.SUMMARY_JSON), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    human = [f"run dir {run_dir}",
             f"teacher val {rep.teacher_val_accuracy:.4f} "
             f"test {rep.teacher_test_accuracy:.4f}"]
    human += [f"s={c['sparsity']:g} {c['variant']:>11} "
              f"acc={c['mean_accuracy']:.4f} ent={c['mean_entropy']:.4f} "
              f"diverged={c['diverged']}" for c in summary["cells"]]
    _emit(args, {"run_dir": run_dir, **summary}, human)
    failures = summary["failures"]
    if failures:
        for f in failures:
            print(f"{PROG}: failed row s={f['sparsity']:g} {f['variant']} "
                  f"seed={f['seed']}: {f['error']}", file=sys.stderr)
        return 2
    return 0


def cmd_report(args):
    md_path, files, missing = report.render_report(args.run_dir,
                                                   out_dir=args.out_dir)
    human = [f"wrote {p}" for p in files]
    if missing:
        human.append("missing artifacts: " + ", ".join(missing))
    _emit(args, {"markdown": md_path, "files": files, "missing": missing},
          human)
    return 0


def build_parser():
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true",
                        help="print one JSON object on stdout")

    cfgp = _Parser(add_help=False)
    cfgp.add_argument("--config", default=None,
                      help="config file (flat key = value grammar)")
    cfgp.add_argument("--set", action="append", type=_set_arg, default=[],
                      metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("prune", parents=[common],
                       help="prune a dense .skdm matrix")
    p.add_argument("input")
    p.add_argument("output")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--sparsity", type=_unit_sparsity_arg,
                      help="unstructured magnitude target in [0, 1]")
    mode.add_argument("--nm", type=_nm_arg, metavar="N:M",
                      help="structured pattern, e.g. 2:4")
    p.add_argument("--mask", default=None,
                   help="mask output path (default: output with .skbm)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compress", parents=[common],
                       help="compress a .skdm matrix to bitmask .skbc")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--width", default="fp32", choices=formats.VALUE_WIDTHS)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("bench", parents=[common],
                       help="benchmark the sparse kernel against dense")
    p.add_argument("--shape", type=_shape_arg, default=(4096, 12288),
                   metavar="ROWSxCOLS")
    p.add_argument("--sparsities", type=_sparsity_list_arg,
                   default=(0.5, 0.6, 0.7, 0.8, 0.9), metavar="S1,S2,...")
    p.add_argument("--width", default="fp32", choices=formats.VALUE_WIDTHS)
    p.add_argument("--reps", type=_positive_int_arg, default=50)
    p.add_argument("--warmup", type=_positive_int_arg, default=5)
    p.add_argument("--threads", type=_positive_int_arg, default=1)
    p.add_argument("--tile-rows", type=_positive_int_arg, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv", help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", parents=[common, cfgp],
                       help="train the dense baseline model into a run dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", parents=[common, cfgp],
                       help="run the sparsity recovery grid into a run dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", parents=[common],
                       help="render tables and figures for a run dir")
    p.add_argument("run_dir")
    p.add_argument("--out-dir", default=None,
                   help="write the report elsewhere than the run dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
