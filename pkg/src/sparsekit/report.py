"""Run-directory report renderer: markdown, table CSVs, and figures.

Reads whatever artifacts a run directory holds (experiment CSV, quantized
companion CSV, summary JSON, bench CSV, effective config, training curves)
and renders a report.md plus one CSV per table and matplotlib PNG figures
next to it. Missing artifacts are listed and the rest of the report is
still produced; an empty directory yields a report with an explicit "no
runs" section. Table rendering is deterministic given the inputs; column
orders are fixed and documented in the markdown itself.
"""

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .formats import WIDTH_BITS, bits_per_weight, theoretical_speedup

EXPERIMENT_CSV = "experiment.csv"
QUANT_CSV = "quantized.csv"
SUMMARY_JSON = "summary.json"
BENCH_CSV = "bench.csv"
EFFECTIVE_CFG = "effective.cfg"
TRAIN_CSV = "train_steps.csv"

REPORT_MD = "report.md"
RECOVERY_TABLE = "recovery_table.csv"
INT8_TABLE = "int8_delta_table.csv"
BENCH_TABLE = "bench_table.csv"
FIG_ACCURACY = "fig_accuracy.png"
FIG_ENTROPY = "fig_entropy.png"
FIG_SPEEDUP = "fig_speedup.png"
FIG_LOSS = "fig_loss.png"


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmtf(x, digits=4):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.{digits}f}"


def _md_table(header, rows):
    out = ["| " + " | ".join(header) + " |",
           "| " + " | ".join("---" for _ in header) + " |"]
    out.extend("| " + " | ".join(str(c) for c in row) + " |" for row in rows)
    return "\n".join(out)


def _write_table_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _recovery_section(run_dir, out_dir, files):
    path = os.path.join(run_dir, EXPERIMENT_CSV)
    if not os.path.exists(path):
        return None
    rows = _read_csv(path)
    cells = {}
    for r in rows:
        key = (float(r["sparsity"]), r["variant"])
        cells.setdefault(key, []).append(r)
    header = ["sparsity", "variant", "runs", "mean_accuracy", "mean_entropy",
              "diverged"]
    table = []
    for (sparsity, variant), group in sorted(cells.items()):
        accs = [float(g["accuracy"]) for g in group]
        ents = [float(g["entropy"]) for g in group]
        table.append([
            f"{sparsity:g}", variant, len(group),
            _fmtf(sum(accs) / len(accs)), _fmtf(sum(ents) / len(ents)),
            sum(int(g["diverged"]) for g in group),
        ])
    _write_table_csv(os.path.join(out_dir, RECOVERY_TABLE), header, table)
    files.append(RECOVERY_TABLE)

    variants = sorted({v for (_, v) in cells})
    sparsities = sorted({s for (s, _) in cells})
    for fname, column, ylabel in ((FIG_ACCURACY, "accuracy", "test accuracy"),
                                  (FIG_ENTROPY, "entropy", "predictive entropy (nats)")):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for variant in variants:
            ys = []
            for s in sparsities:
                group = cells.get((s, variant), [])
                vals = [float(g[column]) for g in group
                        if not math.isnan(float(g[column]))]
                ys.append(sum(vals) / len(vals) if vals else math.nan)
            ax.plot(sparsities, ys, marker="o", label=variant)
        ax.set_xlabel("sparsity")
        ax.set_ylabel(ylabel)
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, fname), dpi=110)
        plt.close(fig)
        files.append(fname)

    md = ["## Recovery experiment",
          "",
          "Mean over seeds per (sparsity, variant); diverged counts flagged runs.",
          "",
          _md_table(header, table),
          "",
          f"![accuracy vs sparsity]({FIG_ACCURACY})",
          "",
          f"![entropy vs sparsity]({FIG_ENTROPY})"]
    return "\n".join(md)


def _int8_section(run_dir, out_dir, files):
    path = os.path.join(run_dir, QUANT_CSV)
    if not os.path.exists(path):
        return None
    rows = _read_csv(path)
    per_sparsity = {}
    for r in rows:
        per_sparsity.setdefault(float(r["sparsity"]), []).append(
            (float(r["fp32_accuracy"]), float(r["int8_accuracy"])))
    header = ["sparsity", "runs", "mean_fp32_accuracy", "mean_int8_accuracy",
              "mean_delta"]
    table = []
    for sparsity, pairs in sorted(per_sparsity.items()):
        f32 = sum(p[0] for p in pairs) / len(pairs)
        i8 = sum(p[1] for p in pairs) / len(pairs)
        table.append([f"{sparsity:g}", len(pairs), _fmtf(f32), _fmtf(i8),
                      _fmtf(f32 - i8)])
    _write_table_csv(os.path.join(out_dir, INT8_TABLE), header, table)
    files.append(INT8_TABLE)
    md = ["## Simulated INT8 accuracy",
          "",
          "Per-sparsity fp32 vs int8 accuracy delta (reported, not asserted).",
          "",
          _md_table(header, table)]
    return "\n".join(md)


def _bench_section(run_dir, out_dir, files):
    path = os.path.join(run_dir, BENCH_CSV)
    if not os.path.exists(path):
        return None
    rows = _read_csv(path)
    header = ["sparsity", "value_width", "threads", "median_ms", "gbps",
              "bits_per_weight", "theoretical_speedup", "measured_speedup"]
    table = []
    xs, measured, theory = [], [], []
    for r in rows:
        width = r["value_width"]
        sparsity = float(r["sparsity"])
        median_ms = float(r["median_ns"]) / 1e6
        if width == "dense":
            bpw, theo = 32.0, 1.0
        else:
            bits = WIDTH_BITS[width]
            bpw = bits_per_weight(bits, 1.0 - sparsity)
            theo = theoretical_speedup(bits, bits, 1.0 - sparsity)
            xs.append(sparsity)
            measured.append(float(r["self_speedup"]))
            theory.append(theo)
        table.append([f"{sparsity:g}", width, r["threads"],
                      _fmtf(median_ms, 3), _fmtf(float(r["gbps"]), 2),
                      _fmtf(bpw, 2), _fmtf(theo, 2),
                      _fmtf(float(r["self_speedup"]), 2)])
    _write_table_csv(os.path.join(out_dir, BENCH_TABLE), header, table)
    files.append(BENCH_TABLE)

    if xs:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.plot(xs, measured, marker="o", label="measured")
        ax.plot(xs, theory, marker="s", linestyle="--",
                label="theoretical (same-width dense)")
        ax.set_xlabel("sparsity")
        ax.set_ylabel("self-speedup vs dense")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, FIG_SPEEDUP), dpi=110)
        plt.close(fig)
        files.append(FIG_SPEEDUP)

    md = ["## Kernel benchmark",
          "",
          "Theoretical speedup prices a same-width dense baseline via the",
          "bits-per-weight model; measured speedup is against the fp32 dense",
          "kernel on this machine.",
          "",
          _md_table(header, table)]
    if xs:
        md += ["", f"![speedup vs sparsity]({FIG_SPEEDUP})"]
    return "\n".join(md)


def _training_section(run_dir, out_dir, files):
    path = os.path.join(run_dir, TRAIN_CSV)
    if not os.path.exists(path):
        return None
    rows = _read_csv(path)
    if not rows:
        return None
    steps = [int(r["step"]) for r in rows]
    totals = [float(r["total"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(steps, totals)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, FIG_LOSS), dpi=110)
    plt.close(fig)
    files.append(FIG_LOSS)
    final = totals[-1] if totals else math.nan
    md = ["## Training curve",
          "",
          f"{len(steps)} recorded steps, final total loss {_fmtf(final, 6)}.",
          "",
          f"![loss curve]({FIG_LOSS})"]
    return "\n".join(md)


def _teacher_section(run_dir):
    path = os.path.join(run_dir, SUMMARY_JSON)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        summary = json.load(fh)
    teacher = summary.get("teacher")
    if not teacher:
        return None
    md = ["## Teacher baseline",
          "",
          f"- val accuracy: {_fmtf(teacher.get('val_accuracy'))}",
          f"- test accuracy: {_fmtf(teacher.get('test_accuracy'))}",
          f"- test entropy: {_fmtf(teacher.get('test_entropy'))} nats"]
    failures = summary.get("failures") or []
    if failures:
        md += ["", f"{len(failures)} failed run(s):"]
        md += [f"- sparsity {f['sparsity']} {f['variant']} seed {f['seed']}: "
               f"{f['error']}" for f in failures]
    return "\n".join(md)


def render_report(run_dir, out_dir=None):
    """Render the report for one run directory.

    Returns (markdown_path, written_files, missing_artifacts). Missing
    inputs never fail the render; they are listed in the report instead.
    """
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory {run_dir!r} does not exist")
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    files = []
    sections = []
    missing = [name for name in (EXPERIMENT_CSV, QUANT_CSV, SUMMARY_JSON,
                                 BENCH_CSV, TRAIN_CSV)
               if not os.path.exists(os.path.join(run_dir, name))]

    teacher_md = _teacher_section(run_dir)
    if teacher_md:
        sections.append(teacher_md)
    recovery_md = _recovery_section(run_dir, out_dir, files)
    if recovery_md:
        sections.append(recovery_md)
    int8_md = _int8_section(run_dir, out_dir, files)
    if int8_md:
        sections.append(int8_md)
    bench_md = _bench_section(run_dir, out_dir, files)
    if bench_md:
        sections.append(bench_md)
    train_md = _training_section(run_dir, out_dir, files)
    if train_md:
        sections.append(train_md)

    header = [f"# Run report: {os.path.basename(os.path.abspath(run_dir))}", ""]
    cfg_path = os.path.join(run_dir, EFFECTIVE_CFG)
    if os.path.exists(cfg_path):
        header.append(f"Effective config: `{EFFECTIVE_CFG}`")
        header.append("")
    if not sections:
        header += ["## No runs", "",
                   "This directory holds no recognized run artifacts."]
    if missing:
        header += ["Artifacts not present: " + ", ".join(missing), ""]
    body = "\n\n".join([s for s in ["\n".join(header).rstrip()] + sections if s])
    md_path = os.path.join(out_dir, REPORT_MD)
    with open(md_path, "w") as fh:
        fh.write(body + "\n")
    files.insert(0, REPORT_MD)
    files = [os.path.join(out_dir, name) for name in files]
    return md_path, files, missing
