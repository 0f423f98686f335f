"""Report rendering: delimited summary tables plus matplotlib figures.

Input is the line-delimited run records the matrix writes; output is a TSV
summary (one row per cell) and PNG charts for whichever comparisons the
records contain: protocol trend over loss rate, mapping deviation bars,
scheduler comparison, and overlap ablation.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import summarize

SUMMARY_COLUMNS = ("scheduler", "mapping", "sync_mode", "overlap_load_comp",
                   "overlap_pred_comm", "plr", "runs", "errors", "mean_tpt",
                   "mean_deviation", "mean_lost_groups")


def write_jsonl(rows: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary_tsv(summaries: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(SUMMARY_COLUMNS) + "\n")
        for row in summaries:
            fh.write("\t".join(_fmt(row.get(col)) for col in SUMMARY_COLUMNS) + "\n")


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _fig_path(outdir: str, name: str) -> str:
    return os.path.join(outdir, name)


def render_figures(rows: list[dict], outdir: str) -> list[str]:
    """Render whichever charts the rows support; returns the files written."""
    summaries = summarize(rows)
    os.makedirs(outdir, exist_ok=True)
    written = []
    written += _tpt_vs_plr(summaries, outdir)
    written += _mapping_deviation(summaries, outdir)
    written += _scheduler_tpt(summaries, outdir)
    written += _overlap_ablation(summaries, outdir)
    return written


def _tpt_vs_plr(summaries, outdir) -> list[str]:
    modes = sorted({s["sync_mode"] for s in summaries})
    plrs = sorted({s["plr"] for s in summaries})
    if len(modes) < 2 and len(plrs) < 2:
        return []
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for mode in modes:
        pts = sorted((s["plr"], s["mean_tpt"] * 1e3) for s in summaries
                     if s["sync_mode"] == mode and s.get("mean_tpt") is not None)
        if pts:
            ax.plot([p for p, _ in pts], [t for _, t in pts], marker="o", label=mode)
    ax.set_xlabel("packet loss rate")
    ax.set_ylabel("time per token (ms)")
    ax.set_title("Synchronization mode vs packet loss")
    ax.legend()
    fig.tight_layout()
    path = _fig_path(outdir, "tpt_vs_plr.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def _mapping_deviation(summaries, outdir) -> list[str]:
    mappings = sorted({s["mapping"] for s in summaries})
    if len(mappings) < 2:
        return []
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    vals = []
    for mapping in mappings:
        devs = [s["mean_deviation"] for s in summaries
                if s["mapping"] == mapping and s.get("mean_deviation") is not None]
        vals.append(sum(devs) / len(devs) if devs else 0.0)
    ax.bar(mappings, vals, color=["tab:blue", "tab:orange"][:len(mappings)])
    ax.set_ylabel("mean logit deviation (L2)")
    ax.set_title("Importance-aware vs random mapping")
    fig.tight_layout()
    path = _fig_path(outdir, "mapping_deviation.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def _scheduler_tpt(summaries, outdir) -> list[str]:
    schedulers = sorted({s["scheduler"] for s in summaries})
    if len(schedulers) < 2:
        return []
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels, vals, errs = [], [], []
    for sched in schedulers:
        cells = [s for s in summaries if s["scheduler"] == sched]
        tpts = [s["mean_tpt"] * 1e3 for s in cells if s.get("mean_tpt") is not None]
        oom = sum(s["errors"] for s in cells)
        labels.append(f"{sched}\n({oom} OOM)" if oom else sched)
        vals.append(sum(tpts) / len(tpts) if tpts else 0.0)
        errs.append(oom)
    ax.bar(labels, vals, color="tab:green")
    ax.set_ylabel("mean time per token (ms)")
    ax.set_title("Scheduler comparison")
    fig.tight_layout()
    path = _fig_path(outdir, "scheduler_tpt.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def _overlap_ablation(summaries, outdir) -> list[str]:
    combos = sorted({(s["overlap_load_comp"], s["overlap_pred_comm"])
                     for s in summaries})
    if len(combos) < 2:
        return []
    names = {(False, False): "none", (True, False): "load-comp",
             (False, True): "pred-comm", (True, True): "both"}
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels, vals = [], []
    for combo in combos:
        tpts = [s["mean_tpt"] * 1e3 for s in summaries
                if (s["overlap_load_comp"], s["overlap_pred_comm"]) == combo
                and s.get("mean_tpt") is not None]
        labels.append(names.get(combo, str(combo)))
        vals.append(sum(tpts) / len(tpts) if tpts else 0.0)
    ax.bar(labels, vals, color="tab:purple")
    ax.set_ylabel("mean time per token (ms)")
    ax.set_title("Overlap ablation")
    fig.tight_layout()
    path = _fig_path(outdir, "overlap_ablation.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def render_report(rows: list[dict], outdir: str) -> dict:
    """Summary TSV plus figures; returns what was written where."""
    os.makedirs(outdir, exist_ok=True)
    summaries = summarize(rows)
    summary_path = os.path.join(outdir, "summary.tsv")
    write_summary_tsv(summaries, summary_path)
    figures = render_figures(rows, outdir)
    return {"summary": summary_path, "figures": figures,
            "cells": len(summaries)}
