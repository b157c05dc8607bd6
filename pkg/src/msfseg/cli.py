"""Command-line entry points: synth, train, propagate, evaluate, serve.

Every command echoes its configuration into the run directory and is
reproducible from that echo plus the seed; report files carry no
timestamps, so a repeated run is byte-identical.
"""

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import reports
from .checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import (Corpus, SupportSequence, SynthConfig, Volume,
                   generate_corpus, load_corpus, save_corpus, save_volume)
from .errors import ConfigError, FormatError, InputError
from .metrics import MetricReport, MetricRow, evaluate_run, mean_reports
from .propagation import QCPolicy, init_pool, save_pool, segment_volume
from .training import train_model


def _setup_determinism(threads: int, seed: int) -> None:
    torch.set_num_threads(max(1, threads))
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 31)


def _load_corpus_arg(data, synthetic, volumes, grid, seed, blobs, tubes) -> Corpus:
    if data:
        return load_corpus(data)
    if synthetic:
        cfg = SynthConfig(shape=tuple(grid), volume_count=volumes, seed=seed,
                          blob_count=blobs, tube_count=tubes)
        return generate_corpus(cfg)
    raise click.UsageError("provide --data PATH or --synthetic")


@click.group()
def main():
    """Few-shot volumetric segmentation toolkit."""


@main.command()
@click.option("--out", type=click.Path(), required=True)
@click.option("--volumes", type=int, default=8, show_default=True)
@click.option("--grid", nargs=3, type=int, default=(24, 64, 64), show_default=True)
@click.option("--blobs", type=int, default=2, show_default=True)
@click.option("--tubes", type=int, default=1, show_default=True)
@click.option("--tube-radius", nargs=2, type=float, default=(2.0, 4.0), show_default=True)
@click.option("--noise", type=float, default=0.03, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def synth(out, volumes, grid, blobs, tubes, tube_radius, noise, seed):
    """Generate a synthetic volume corpus."""
    cfg = SynthConfig(shape=tuple(grid), volume_count=volumes, blob_count=blobs,
                      tube_count=tubes, tube_radius=tuple(tube_radius),
                      noise=noise, seed=seed)
    corpus = generate_corpus(cfg)
    save_corpus(corpus, out)
    click.echo(f"wrote {volumes} volumes to {out}")


@main.command()
@click.option("--data", type=click.Path(exists=True), default=None,
              help="Corpus directory (from `synth`).")
@click.option("--synthetic", is_flag=True, help="Train on a generated blob corpus.")
@click.option("--volumes", type=int, default=8, show_default=True,
              help="Synthetic corpus size (with --synthetic).")
@click.option("--grid", nargs=3, type=int, default=(24, 64, 64), show_default=True)
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--batch", type=int, default=4, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--n", type=int, default=1, show_default=True,
              help="Supports per episode (upper bound with --n-min).")
@click.option("--n-min", type=int, default=None)
@click.option("--d", type=int, default=1, show_default=True)
@click.option("--setting", type=click.Choice(["1", "2"]), default="1")
@click.option("--pseudo", is_flag=True,
              help="Build n supports from one by augmentation.")
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--channels", nargs=3, type=int, default=(16, 32, 64), show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="Continue training from an existing checkpoint.")
@click.option("--out", type=click.Path(), required=True)
def train(data, synthetic, volumes, grid, steps, batch, lr, n, n_min, d,
          setting, pseudo, size, channels, seed, threads, resume, out):
    """Train the model episodically and write a checkpoint plus loss report."""
    _setup_determinism(threads, seed)
    corpus = _load_corpus_arg(data, synthetic, volumes, grid, seed + 7919, 2, 0)
    start_model = None
    if resume:
        start_model, _ = load_checkpoint(resume)
        model_cfg = start_model.config      # the checkpoint pins the architecture
        start_model.train()
    else:
        model_cfg = ModelConfig(input_size=size, channels=tuple(channels),
                                head_channels=16, fused_channels=16,
                                decoder_channels=(max(32, channels[0] * 2), 16))
    cfg = TrainConfig(steps=steps, batch_size=batch, lr=lr, n=n, n_min=n_min,
                      d=d, seed=seed, setting=int(setting), pseudo=pseudo,
                      model=model_cfg)
    try:
        cfg.validate()
    except ConfigError as e:
        raise click.UsageError(str(e))

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    episode_lines: list[str] = []

    def record(step, loss):
        if step % max(1, steps // 10) == 0:
            click.echo(f"step {step}: loss {loss:.4f}")

    from .data import episode_manifest_line

    result = train_model(corpus, cfg, model=start_model, on_step=record,
                         on_episode=lambda ep: episode_lines.append(
                             episode_manifest_line(ep)))
    (out_dir / "episodes.tsv").write_text("\n".join(episode_lines) + "\n")

    ckpt = out_dir / "checkpoint.msfckpt"
    save_checkpoint(result.model, ckpt, extra={"seed": seed, "steps": steps})
    # loss log carries the per-episode support count for auditability
    n_used = str(cfg.n) if cfg.n_min is None else f"{cfg.n_min}..{cfg.n}"
    reports.write_loss_log(result.losses, out_dir, n_label=n_used)
    reports.write_config_echo({
        "command": "train", "seed": seed, "steps": steps, "batch": batch,
        "lr": lr, "n": n, "n_min": n_min, "d": d, "setting": int(setting),
        "pseudo": pseudo, "size": size, "channels": list(channels),
        "data": str(data) if data else None, "synthetic": synthetic,
        "volumes": volumes, "grid": list(grid), "threads": threads,
    }, out_dir)
    click.echo(f"checkpoint: {ckpt}")


def _central_sequence(vol: Volume, class_id: int, d: int) -> SupportSequence:
    zs = [z for z in range(vol.depth) if vol.masks[class_id][z].any()]
    if not zs:
        raise InputError(f"volume {vol.volume_id} has no slice with class {class_id}")
    center = zs[len(zs) // 2]
    start = max(0, min(center - d // 2, vol.depth - d))
    idx = tuple(range(start, start + d))
    return SupportSequence(
        slices=vol.intensities[list(idx)], masks=vol.masks[class_id][list(idx)],
        volume_id=vol.volume_id, slice_indices=idx,
        sequence_id=f"{vol.volume_id}:{start}+{d}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice(["intra", "inter"]), default="inter",
              show_default=True)
@click.option("--class-id", type=int, default=2, show_default=True,
              help="Ground-truth class the supports label.")
@click.option("--n", type=int, default=1, show_default=True)
@click.option("--d", type=int, default=1, show_default=True)
@click.option("--qc", type=click.Choice(["on", "off"]), default="on", show_default=True)
@click.option("--tau", type=float, default=0.85, show_default=True)
@click.option("--support-volumes", type=int, default=None,
              help="How many volumes seed the pool in inter mode (default n).")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def propagate(checkpoint_path, data, mode, class_id, n, d, qc, tau,
              support_volumes, threads, seed, out):
    """Segment every volume from pooled supports; write masks, pool, report."""
    _setup_determinism(threads, seed)
    model, _ = load_checkpoint(checkpoint_path)
    corpus = load_corpus(data)
    volumes = [v for v in corpus.volumes if class_id in v.masks]
    if not volumes:
        raise click.UsageError(f"no volume in {data} carries class {class_id}")
    qc_policy = QCPolicy(tau=tau, enabled=(qc == "on"))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sequences = d > 1
    selection_log: list[str] = []

    def selection_logger(vol):
        def log(z, entries):
            if sequences:
                groups: dict[str, list[int]] = {}
                for e in entries:
                    key = e.sequence_id or f"solo{e.ordinal}"
                    groups.setdefault(key, []).append(e.source[1])
                txt = " ".join(f"{k}[{len(v)}]" for k, v in groups.items())
            else:
                txt = " ".join(f"{e.source[0]}:{e.source[1]}" for e in entries)
            selection_log.append(f"{vol.volume_id}\t{z}\tselected\t{txt}")
        return log

    predictions: dict[str, np.ndarray] = {}
    if mode == "intra":
        for vol in volumes:
            pool = init_pool(model, [_central_sequence(vol, class_id, d)])
            pred, pool = segment_volume(vol, pool, model, n=min(n, len(pool)),
                                        qc=qc_policy, sequences=sequences,
                                        on_select=selection_logger(vol))
            predictions[vol.volume_id] = pred
        final_pool = pool
    else:
        k = support_volumes if support_volumes is not None else n
        donors = volumes[:max(1, min(k, len(volumes)))]
        labeled = [_central_sequence(v, class_id, d) for v in donors]
        final_pool = init_pool(model, labeled)
        for vol in volumes:
            pred, final_pool = segment_volume(
                vol, final_pool, model, n=min(n, len(final_pool)),
                qc=qc_policy, sequences=sequences,
                on_select=selection_logger(vol))
            predictions[vol.volume_id] = pred

    for vid, pred in predictions.items():
        save_volume(Volume(intensities=self_intensities(corpus, vid),
                           masks={1: pred}, volume_id=vid),
                    out_dir / f"{vid}_pred.msfvol")
    save_pool(final_pool, out_dir / "pool.msfpool")
    (out_dir / "selection_log.tsv").write_text("\n".join(selection_log) + "\n")

    gts = {v.volume_id: v.masks[class_id] for v in volumes}
    report = evaluate_run(predictions, gts, class_id=class_id,
                          protocol=f"{mode}-volume n={n} d={d} qc={qc}", seed=seed)
    reports.write_metric_report(report, out_dir)
    reports.write_config_echo({
        "command": "propagate", "checkpoint": checkpoint_digest(checkpoint_path),
        "data": str(data), "mode": mode, "class_id": class_id, "n": n, "d": d,
        "qc": qc, "tau": tau, "support_volumes": support_volumes, "seed": seed,
        "threads": threads,
    }, out_dir)
    click.echo(report.to_tsv())


def self_intensities(corpus: Corpus, vid: str) -> np.ndarray:
    return next(v for v in corpus.volumes if v.volume_id == vid).intensities


@main.command()
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--gt", type=click.Path(exists=True), default=None,
              help="Corpus directory with ground truth (for prediction dirs).")
@click.option("--class-id", type=int, default=2, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def evaluate(run_dirs, gt, class_id, out):
    """Aggregate one or more run directories into a metric report."""
    from .data import load_volume

    collected: list[MetricReport] = []
    for rd in run_dirs:
        rd = Path(rd)
        report_file = rd / "report.json"
        if report_file.exists():
            payload = json.loads(report_file.read_text())
            rows = [MetricRow(volume_id=r["volume_id"], dice=r["dice"],
                              j=r["j"], f=r["f"], class_id=r.get("class_id"))
                    for r in payload["rows"]]
            collected.append(MetricReport(rows=rows, protocol=payload["protocol"]))
            continue
        preds = sorted(rd.glob("*_pred.msfvol"))
        if not preds:
            raise click.UsageError(f"{rd} has neither report.json nor predictions")
        if gt is None:
            raise click.UsageError("--gt is required to score prediction volumes")
        corpus = load_corpus(gt)
        gts = {v.volume_id: v.masks[class_id] for v in corpus.volumes
               if class_id in v.masks}
        predictions = {}
        for p in preds:
            vol = load_volume(p)
            predictions[vol.volume_id] = vol.masks[1]
        try:
            collected.append(evaluate_run(predictions, gts, protocol=str(rd),
                                          class_id=class_id))
        except InputError as e:
            raise click.UsageError(str(e))

    final = collected[0] if len(collected) == 1 else mean_reports(collected)
    out_dir = Path(out)
    reports.write_metric_report(final, out_dir)
    reports.write_config_echo({
        "command": "evaluate", "runs": [str(r) for r in run_dirs],
        "gt": str(gt) if gt else None, "class_id": class_id,
    }, out_dir)
    click.echo(final.to_tsv())


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8008, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
def serve(checkpoint_path, data, host, port, threads):
    """Run the annotation HTTP service."""
    import uvicorn

    from .service import ServiceState, create_app

    torch.set_num_threads(max(1, threads))
    model, _ = load_checkpoint(checkpoint_path)
    corpus = load_corpus(data)
    state = ServiceState(model, corpus,
                         model_version=checkpoint_digest(checkpoint_path))
    app = create_app(state)
    click.echo(f"serving {len(corpus.volumes)} volumes on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    sys.exit(main())
