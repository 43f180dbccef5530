"""Static plots and a merged summary from a run directory's JSON/JSONL files."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .campaign import read_jsonl  # noqa: E402


def _bar(path, labels, values, ylabel, title):
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 3.2))
    ax.bar(range(len(values)), values, color="#4a7ab5")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.05)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _trajectories(path, rows, limit=12):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for row in rows[:limit]:
        ax.plot(row.get("trajectory", []), lw=0.9)
    ax.axhline(0.5, color="k", ls="--", lw=0.7)
    ax.set_xlabel("evaluation / generation")
    ax.set_ylabel("fake score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_report(run_dir) -> dict:
    """Write ``report.json`` and PNG plots for every summary found in ``run_dir``."""
    run_dir = Path(run_dir)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    summaries = {}
    for path in sorted(run_dir.glob("*_summary.json")):
        name = path.name[: -len("_summary.json")]
        summaries[name] = json.loads(path.read_text())
        rows = read_jsonl(run_dir / f"{name}.jsonl") if (run_dir / f"{name}.jsonl").exists() else []
        if rows:
            _trajectories(plots / f"{name}_trajectories.png", rows)
    if summaries:
        names = list(summaries)
        _bar(plots / "asr.png", names, [summaries[n]["asr"] for n in names], "ASR", "attack success rate")
    extra = {}
    ranking = run_dir / "ranking.json"
    if ranking.exists():
        rows = json.loads(ranking.read_text())
        extra["ranking"] = rows
        _bar(plots / "ranking.png", [r["attribute"] for r in rows], [r["asr"] for r in rows],
             "ASR", "single-attribute ranking")
    sweep = run_dir / "sweep.json"
    if sweep.exists():
        rows = json.loads(sweep.read_text())
        extra["sweep"] = rows
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([r["size"] for r in rows], [r["asr"] for r in rows], marker="o")
        ax.set_xlabel("candidate attributes")
        ax.set_ylabel("ASR")
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        fig.savefig(plots / "sweep.png", dpi=120)
        plt.close(fig)
    defense = run_dir / "defense.json"
    if defense.exists():
        extra["defense"] = json.loads(defense.read_text())
    report = {"run": run_dir.name, "summaries": summaries, **extra,
              "plots": sorted(p.name for p in plots.glob("*.png"))}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
