"""Report rendering: delimited tables plus matplotlib figures.

Every CLI run directory gets the same trio where applicable: a TSV
table, a JSON mirror, and PNG figures. Files contain no timestamps so
reruns with the same seed are byte-identical.
"""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport


def write_loss_log(losses: list[float], out_dir, n_label: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_label is None:
        lines = ["step\tloss"]
        lines += [f"{i}\t{v:.6f}" for i, v in enumerate(losses)]
    else:
        lines = ["step\tloss\tn"]
        lines += [f"{i}\t{v:.6f}\t{n_label}" for i, v in enumerate(losses)]
    path = out / "loss_log.tsv"
    path.write_text("\n".join(lines) + "\n")

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=1, color="tab:blue", label="loss")
    if len(losses) >= 20:
        k = max(5, len(losses) // 20)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, k - 1 + len(smooth)), smooth, lw=2,
                color="tab:red", label=f"moving mean ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def write_metric_report(report: MetricReport, out_dir, stem: str = "report") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tsv = out / f"{stem}.tsv"
    tsv.write_text(report.to_tsv())
    (out / f"{stem}.json").write_text(report.to_json() + "\n")

    rows = sorted(report.rows, key=lambda r: r.volume_id)
    if rows:
        ids = [r.volume_id for r in rows]
        x = np.arange(len(ids))
        width = 0.28
        fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(ids)), 3.5))
        ax.bar(x - width, [r.dice for r in rows], width, label="Dice")
        ax.bar(x, [r.j for r in rows], width, label="J")
        ax.bar(x + width, [r.f for r in rows], width, label="F")
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=30, ha="right", fontsize=7)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score")
        title = report.protocol or "evaluation"
        ax.set_title(title, fontsize=9)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"{stem}_scores.png", dpi=110, metadata={"Software": None})
        plt.close(fig)
    return tsv


def write_config_echo(config: dict, out_dir, name: str = "run_config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path
