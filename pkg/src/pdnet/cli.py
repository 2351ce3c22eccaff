"""Command-line entry points: train, refine, infer, eval, synth, serve."""

from __future__ import annotations

import json
from pathlib import Path

import click as click_cli
import numpy as np

from . import data as data_mod
from . import geometry, metrics, pipeline
from .geometry import Point2D
from .losses import LossConfig
from .model import ModelConfig


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _model_cfg(cfg: dict, stage: int) -> ModelConfig:
    mc = dict(cfg.get("model", {}))
    mc.setdefault("input_size", pipeline.STAGE_INPUT[stage])
    return ModelConfig.from_json(mc)


def _train_cfg(cfg: dict, seed: int) -> pipeline.TrainConfig:
    tc = dict(cfg.get("train", {}))
    tc.setdefault("seed", seed)
    if "decay_epochs" in tc:
        tc["decay_epochs"] = tuple(tc["decay_epochs"])
    return pipeline.TrainConfig(**tc)


@click_cli.group()
def main():
    """Click-guided lesion segmentation and RECIST diameter prediction."""


@main.command()
@click_cli.option("--stage", type=click_cli.Choice(["1", "2"]), required=True)
@click_cli.option("--data", "data_dir", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--round", "round_idx", default=1, show_default=True)
@click_cli.option("--config", "config_path", default=None, type=click_cli.Path(exists=True))
@click_cli.option("--seed", default=0, show_default=True)
@click_cli.option("--out", "out_dir", default="checkpoint", show_default=True)
def train(stage, data_dir, round_idx, config_path, seed, out_dir):
    """Train one stage on the initial pseudo masks."""
    cfg = _load_config(config_path)
    stage = int(stage)
    index = data_mod.DatasetIndex.load(Path(data_dir))
    samples = pipeline.build_initial_samples(index, index.split("train"))
    ckpt = pipeline.train_stage(stage, samples, _train_cfg(cfg, seed),
                                _model_cfg(cfg, stage),
                                LossConfig(**cfg.get("loss", {})),
                                out_dir=Path(out_dir))
    click_cli.echo(f"checkpoint written to {ckpt} (round {round_idx})")


@main.command()
@click_cli.option("--data", "data_dir", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--rounds", default=3, show_default=True)
@click_cli.option("--stage", type=click_cli.Choice(["1", "2"]), default="2")
@click_cli.option("--config", "config_path", default=None, type=click_cli.Path(exists=True))
@click_cli.option("--seed", default=0, show_default=True)
@click_cli.option("--out", "out_dir", default="refined", show_default=True)
def refine(data_dir, rounds, stage, config_path, seed, out_dir):
    """Run the iterative pseudo-mask refinement schedule."""
    cfg = _load_config(config_path)
    stage = int(stage)
    index = data_mod.DatasetIndex.load(Path(data_dir))
    samples = pipeline.build_initial_samples(index, index.split("train"))
    history = pipeline.iterative_refinement(
        samples, rounds, _train_cfg(cfg, seed), _model_cfg(cfg, stage),
        LossConfig(**cfg.get("loss", {})), out_dir=Path(out_dir), stage=stage)
    click_cli.echo(json.dumps(history, indent=2))


@main.command()
@click_cli.option("--slice", "slice_path", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--click", "click_xy", required=True, help="X,Y in pixels")
@click_cli.option("--spacing", default=1.0, show_default=True)
@click_cli.option("--ckpt1", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--ckpt2", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--out", "out_path", default="result.json", show_default=True)
def infer(slice_path, click_xy, spacing, ckpt1, ckpt2, out_path):
    """Two-stage inference on one slice; writes result.json."""
    x, y = (float(v) for v in click_xy.split(","))
    sl = data_mod.load_slice(Path(slice_path), spacing)
    img = data_mod.window_normalize(sl.pixels)
    result = pipeline.infer_two_stage(img, Point2D(x, y), ckpt1, ckpt2, spacing)
    payload = {
        "mask_rle": geometry.encode_rle(result.mask),
        "width": img.shape[1], "height": img.shape[0],
        "recist": result.recist.to_json(),
        "long_mm": result.recist.long_mm,
        "short_mm": result.recist.short_mm,
        "loi": result.loi.to_json(),
    }
    with open(out_path, "w") as f:
        json.dump(payload, f)
    click_cli.echo(f"long {result.recist.long_mm:.1f} mm, "
                   f"short {result.recist.short_mm:.1f} mm -> {out_path}")


@main.command("eval")
@click_cli.option("--data", "data_dir", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--pred", "pred_dir", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--out", "out_dir", default=".", show_default=True)
def eval_cmd(data_dir, pred_dir, out_dir):
    """Score per-lesion result.json files under PRED against ground truth."""
    index = data_mod.DatasetIndex.load(Path(data_dir))
    rows = []
    for rec in index.records:
        pred_path = Path(pred_dir) / f"{rec.id}.json"
        if not pred_path.exists():
            continue
        with open(pred_path) as f:
            pred = json.load(f)
        mask = geometry.decode_rle(pred["mask_rle"], pred["height"], pred["width"])
        row = {}
        if rec.mask_path:
            gt = data_mod.load_mask(rec.mask_path)
            s = metrics.seg_scores(mask, gt)
            row.update(precision=s.precision, recall=s.recall, dice=s.dice)
        pr = geometry.RecistAnnotation.from_json(pred["recist"])
        pr = geometry.RecistAnnotation(*pr.endpoints(), rec.spacing_mm)
        d = metrics.diam_errors(pr, rec.recist)
        row.update(long_err_mm=d.long_err_mm, short_err_mm=d.short_err_mm)
        rows.append(row)
    report = metrics.aggregate(rows)
    out = Path(out_dir)
    (out / "report.json").write_text(metrics.report_json(report))
    (out / "report.txt").write_text(metrics.report_text(report) + "\n")
    click_cli.echo(metrics.report_text(report))


@main.command()
@click_cli.option("--n", default=64, show_default=True)
@click_cli.option("--size", default=512, show_default=True)
@click_cli.option("--seed", default=0, show_default=True)
@click_cli.option("--out", "out_dir", default="synthetic", show_default=True)
def synth(n, size, seed, out_dir):
    """Generate a synthetic desk-scale dataset."""
    index = data_mod.synth_dataset(n, size, seed, out_dir)
    click_cli.echo(f"wrote {len(index)} lesions to {index.root}")


@main.command()
@click_cli.option("--ckpt1", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--ckpt2", required=True, type=click_cli.Path(exists=True))
@click_cli.option("--index", "index_dir", default=None, type=click_cli.Path(exists=True))
@click_cli.option("--port", default=8080, show_default=True)
@click_cli.option("--host", default="127.0.0.1", show_default=True)
def serve(ckpt1, ckpt2, index_dir, port, host):
    """Start the HTTP inference service."""
    import uvicorn

    from .service import create_app

    app = create_app(ckpt1, ckpt2, index_dir, debug_stage1=True)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
