"""Score tables and figures for an evaluation run.

The evaluate step lands one CSV row per utterance plus a JSON summary with
per-SNR and overall aggregates. The report step reads the summary back and
renders the aggregates as PNG figures next to a per-SNR table, so a run can
be eyeballed without loading anything into a notebook.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import EmoAvseError
from .metrics import EvalReport

CSV_COLUMNS = ("clip_id", "snr_db", "pesq", "stoi", "sdi")
UTTERANCES_NAME = "utterances.csv"
SUMMARY_NAME = "summary.json"
PER_SNR_NAME = "per_snr.csv"
FIGURE_METRICS = ("stoi", "sdi", "pesq")


def _fmt_score(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _fmt_snr(value: float) -> str:
    return f"{value:g}"


def write_utterance_csv(report: EvalReport, path) -> Path:
    """One row per scored utterance; pesq cells are empty when no backend
    was available."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for u in report.utterances:
            writer.writerow(
                [
                    u.clip_id,
                    _fmt_snr(u.snr_db),
                    _fmt_score(u.pesq),
                    _fmt_score(u.stoi),
                    _fmt_score(u.sdi),
                ]
            )
    return path


def write_summary_json(report: EvalReport, path) -> Path:
    path = Path(path)
    payload = {
        "overall": report.overall,
        "per_snr": {_fmt_snr(snr): stats for snr, stats in report.per_snr.items()},
        "config": report.config,
        "notes": report.notes,
        "failures": report.failures,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return path


def write_eval_outputs(report: EvalReport, out_dir) -> dict[str, Path]:
    """Materialize an EvalReport as utterances.csv + summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "utterances": write_utterance_csv(report, out_dir / UTTERANCES_NAME),
        "summary": write_summary_json(report, out_dir / SUMMARY_NAME),
    }


def load_summary(path) -> dict:
    """Read a summary.json back with numeric per-SNR keys."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise EmoAvseError(
            f"{path} not found; run evaluate first to produce a summary"
        ) from None
    except json.JSONDecodeError as exc:
        raise EmoAvseError(f"{path}: not a summary file: {exc}") from exc
    if "per_snr" not in data or "overall" not in data:
        raise EmoAvseError(f"{path}: not a summary file (missing aggregates)")
    data["per_snr"] = {float(k): v for k, v in data["per_snr"].items()}
    return data


def write_per_snr_csv(summary: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["snr_db", "count", "stoi", "sdi", "pesq"])
        for snr in sorted(summary["per_snr"]):
            stats = summary["per_snr"][snr]
            writer.writerow(
                [
                    _fmt_snr(snr),
                    stats["count"],
                    _fmt_score(stats["stoi"]),
                    _fmt_score(stats["sdi"]),
                    _fmt_score(stats.get("pesq")),
                ]
            )
    return path


def render_figures(summary: dict, out_dir) -> list[Path]:
    """One metric-versus-SNR PNG per metric that has values.

    The dashed line marks the overall mean; metrics with no scores at all
    (pesq without a configured tool) produce no figure.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snrs = sorted(summary["per_snr"])
    written = []
    for metric in FIGURE_METRICS:
        points = [
            (snr, summary["per_snr"][snr].get(metric))
            for snr in snrs
            if summary["per_snr"][snr].get(metric) is not None
        ]
        if not points:
            continue
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
        overall = summary["overall"].get(metric)
        if overall is not None:
            ax.axhline(overall, linestyle="--", linewidth=1, alpha=0.6)
        ax.set_xlabel("input SNR (dB)")
        ax.set_ylabel(metric)
        count = summary["overall"].get("count")
        ax.set_title(f"{metric} by input SNR (n={count})")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{metric}_by_snr.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_report(eval_dir, out_dir=None) -> list[Path]:
    """Render figures and the per-SNR table for an evaluate output directory.

    Returns the written paths; out_dir defaults to the evaluate directory so
    figures land next to the tables they summarize.
    """
    eval_dir = Path(eval_dir)
    out_dir = eval_dir if out_dir is None else Path(out_dir)
    summary = load_summary(eval_dir / SUMMARY_NAME)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_per_snr_csv(summary, out_dir / PER_SNR_NAME)]
    written.extend(render_figures(summary, out_dir))
    return written
