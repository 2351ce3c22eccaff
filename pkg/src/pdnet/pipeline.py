"""Training and inference pipelines: affine augmentation, click simulation,
deterministic training loops, the three-round pseudo-mask refinement
schedule, and two-stage inference with coordinate mapping back to the
full slice."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from scipy import ndimage

from . import data as data_mod
from . import geometry, losses, pseudomask
from .geometry import HeatmapConfig, Point2D, RecistAnnotation
from .losses import LossConfig
from .model import (NUM_SCALES, ModelConfig, PDNet, load_checkpoint,
                    save_checkpoint)

STAGE_INPUT = {1: 512, 2: 256}
STAGE_SIGMA = {1: 3.0, 2: 7.0}


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg: tuple[float, float] = (-10.0, 10.0)
    stage1_crop: tuple[int, int] = (480, 512)
    stage2_crop_factor: tuple[float, float] = (1.5, 3.5)
    infer_crop_factor: float = 2.5


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 120
    decay_epochs: tuple[int, int] = (60, 90)
    decay_factor: float = 0.1
    batch_size: int = 8
    seed: int = 0
    max_steps: int | None = None


@dataclass(frozen=True)
class LoiCrop:
    """Square crop descriptor tying stage-2 coordinates to the full slice."""

    origin: Point2D  # top-left corner in full-slice pixels
    side: float      # crop side in full-slice pixels
    input_size: int  # model input resolution the crop was resized to

    @property
    def scale(self) -> float:
        return self.side / self.input_size

    def to_full(self, p: Point2D) -> Point2D:
        return Point2D(self.origin.x + p.x * self.scale,
                       self.origin.y + p.y * self.scale)

    def to_loi(self, p: Point2D) -> Point2D:
        return Point2D((p.x - self.origin.x) / self.scale,
                       (p.y - self.origin.y) / self.scale)

    def to_json(self) -> dict:
        return {"origin": [self.origin.x, self.origin.y],
                "side": self.side, "input_size": self.input_size}


@dataclass
class TrainingSample:
    """One lesion in native slice space."""

    image01: np.ndarray          # float32 in [0,1]
    labels: np.ndarray           # tri-state labels (pseudomask.FG/BG/IGNORE)
    recist: RecistAnnotation
    gt_mask: np.ndarray | None = None  # exact mask when available (synthetic)
    id: str = ""


@dataclass
class AugmentedSample:
    image01: np.ndarray
    labels: np.ndarray
    recist: RecistAnnotation
    matrix: np.ndarray  # 2x3 affine, native -> output pixels


@dataclass
class MeasurementResult:
    mask: np.ndarray
    recist: RecistAnnotation
    loi: LoiCrop
    stage1_mask: np.ndarray | None = None


def _compose(*mats: np.ndarray) -> np.ndarray:
    """Compose 2x3 affines, rightmost applied first."""
    out = np.eye(3)
    for m in mats:
        m3 = np.vstack([m, [0, 0, 1]])
        out = out @ m3
    return out[:2]


def _apply_affine_points(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ m[:, :2].T + m[:, 2]


def _transform_recist(m: np.ndarray, recist: RecistAnnotation) -> RecistAnnotation:
    pts = np.array([p.as_array() for p in recist.endpoints()])
    out = _apply_affine_points(m, pts)
    return RecistAnnotation(*[Point2D(x, y) for x, y in out], recist.spacing_mm)


def _warp(img: np.ndarray, m: np.ndarray, size: int, nearest: bool,
          border_value: float) -> np.ndarray:
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(img, m, (size, size), flags=flags,
                          borderMode=cv2.BORDER_CONSTANT,
                          borderValue=border_value)


def _warp_sample(sample: TrainingSample, m: np.ndarray, out_size: int,
                 recist: RecistAnnotation) -> AugmentedSample:
    img = _warp(sample.image01, m, out_size, False, float(sample.image01.min()))
    labels = _warp(sample.labels.astype(np.uint8), m, out_size, True,
                   pseudomask.BG)
    return AugmentedSample(img.astype(np.float32), labels, recist, m)


def _endpoints_inside(recist: RecistAnnotation, size: int, margin: float = 1.0) -> bool:
    return all(margin <= p.x < size - margin and margin <= p.y < size - margin
               for p in recist.endpoints())


def augment_stage1(sample: TrainingSample, cfg: AugmentConfig,
                   seed: int) -> AugmentedSample:
    """Resize to 512, rotate, random square crop of side s in [480, 512],
    resize back to 512. One shared affine for image, labels, endpoints."""
    rng = np.random.default_rng(seed)
    out = STAGE_INPUT[1]
    h, w = sample.image01.shape
    s0 = np.array([[out / w, 0, 0], [0, out / h, 0]], dtype=np.float64)
    for attempt in range(10):
        theta = math.radians(rng.uniform(*cfg.rot_deg))
        s = rng.uniform(cfg.stage1_crop[0], cfg.stage1_crop[1])
        if attempt == 9:
            theta, s = 0.0, float(out)
        c, si = math.cos(theta), math.sin(theta)
        ctr = out / 2
        rot = np.array([[c, -si, ctr - c * ctr + si * ctr],
                        [si, c, ctr - si * ctr - c * ctr]])
        ox = rng.uniform(0, out - s)
        oy = rng.uniform(0, out - s)
        crop = np.array([[1, 0, -ox], [0, 1, -oy]], dtype=np.float64)
        zoom = np.array([[out / s, 0, 0], [0, out / s, 0]], dtype=np.float64)
        m = _compose(zoom, crop, rot, s0)
        recist = _transform_recist(m, sample.recist)
        if _endpoints_inside(recist, out):
            return _warp_sample(sample, m, out, recist)
    raise PipelineError("stage-1 augmentation failed to keep the lesion")


def augment_stage2(sample: TrainingSample, cfg: AugmentConfig,
                   seed: int) -> AugmentedSample:
    """Rotate about the lesion, crop a square 1.5-3.5x the long side with a
    random offset that keeps the lesion inside, resize to 256."""
    rng = np.random.default_rng(seed)
    out = STAGE_INPUT[2]
    long_px = sample.recist.long_px
    if long_px <= 0:
        raise PipelineError("degenerate lesion")
    pts = np.array([p.as_array() for p in sample.recist.endpoints()])
    cx, cy = pts.mean(axis=0)
    for attempt in range(10):
        theta = math.radians(rng.uniform(*cfg.rot_deg))
        factor = rng.uniform(*cfg.stage2_crop_factor)
        side = factor * long_px
        slack = max((side - long_px * 1.1) / 2, 0.0)
        off = rng.uniform(-slack, slack, size=2)
        if attempt == 9:
            theta, off = 0.0, np.zeros(2)
        c, si = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -si, cx - c * cx + si * cy],
                        [si, c, cy - si * cx - c * cy]])
        x0 = cx + off[0] - side / 2
        y0 = cy + off[1] - side / 2
        crop = np.array([[1, 0, -x0], [0, 1, -y0]], dtype=np.float64)
        zoom = np.array([[out / side, 0, 0], [0, out / side, 0]], dtype=np.float64)
        m = _compose(zoom, crop, rot)
        recist = _transform_recist(m, sample.recist)
        if _endpoints_inside(recist, out):
            return _warp_sample(sample, m, out, recist)
    raise PipelineError("stage-2 augmentation failed to keep the lesion")


def build_initial_samples(index: data_mod.DatasetIndex,
                          records=None,
                          snake_cfg: pseudomask.SnakeConfig | None = None,
                          use_snake: bool = True) -> list[TrainingSample]:
    """Ellipse-from-RECIST plus morphological-snake refinement gives each
    record its initial tri-state pseudo mask."""
    snake_cfg = snake_cfg or pseudomask.SnakeConfig()
    samples = []
    for rec in (records if records is not None else index.records):
        sl = data_mod.load_slice(rec.image_path, rec.spacing_mm, rec.id)
        img = data_mod.window_normalize(sl.pixels)
        h, w = img.shape
        ellipse = geometry.ellipse_from_recist(rec.recist)
        emask = geometry.rasterize_ellipse(ellipse, h, w)
        labels = None
        if use_snake:
            refined, collapsed = pseudomask.morph_snake(img, emask, snake_cfg)
            if not collapsed:
                try:
                    labels = pseudomask.build_pseudo_mask(emask, refined).labels
                except pseudomask.PseudoMaskError:
                    labels = None
        if labels is None:
            labels = pseudomask.TriStateMask.from_binary(emask).labels
        gt = data_mod.load_mask(rec.mask_path) if rec.mask_path else None
        samples.append(TrainingSample(img, labels, rec.recist, gt, rec.id))
    return samples


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    decays = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr * (cfg.decay_factor ** decays)


def _per_draw_seed(seed: int, step: int, slot: int) -> int:
    return (seed * 1_000_003 + step * 131 + slot) % (2 ** 31 - 1)


def _batch_tensors(batch: list[AugmentedSample], stage: int,
                   seed_base: int) -> dict:
    """Augmented samples -> model inputs and per-resolution targets."""
    size = STAGE_INPUT[stage]
    sigma = STAGE_SIGMA[stage]
    images, fgs, igs, heat_targets = [], [], [], {1: [], 2: [], 4: []}
    for slot, s in enumerate(batch):
        ellipse = geometry.ellipse_from_recist(s.recist)
        click = geometry.sample_click(ellipse, _per_draw_seed(seed_base, 0, slot))
        click = Point2D(min(max(click.x, 0), size - 1),
                        min(max(click.y, 0), size - 1))
        c_img = geometry.make_click_image(click, size, size)
        d_img = geometry.make_distance_image(click, size, size)
        images.append(np.stack([s.image01, c_img, d_img]))
        fgs.append(s.labels == pseudomask.FG)
        igs.append(s.labels == pseudomask.IGNORE)
        for ds in (1, 2, 4):
            res = size // ds
            scale = np.array([[1 / ds, 0, 0], [0, 1 / ds, 0]])
            r = _transform_recist(scale, s.recist)
            heat_targets[ds].append(geometry.make_heatmaps(
                r, res, res, HeatmapConfig(sigma / ds)))
    x = torch.from_numpy(np.stack(images).astype(np.float32))
    fg = torch.from_numpy(np.stack(fgs))
    ig = torch.from_numpy(np.stack(igs))
    heats = [torch.from_numpy(np.stack(heat_targets[ds])) for ds in (1, 2, 4)]
    return {"x": x, "fg": fg, "ig": ig, "heats": heats}


def _mask_targets_for_sides(fg: torch.Tensor, ig: torch.Tensor,
                            size: int) -> list[tuple]:
    """Tri-state targets for the 11 mask side outputs: 5 PE scales, 5
    decoder scales, then full resolution."""
    fg4 = fg[:, None].float()
    ig4 = ig[:, None].float()
    per_scale = {}
    for k in range(NUM_SCALES):
        res = size // (2 ** (k + 1))
        per_scale[k] = losses.downsample_mask_targets(fg4, ig4, (res, res))
    full = (fg4, fg4 > 0.5, ig4 > 0.5)
    scales = [per_scale[k] for k in range(NUM_SCALES)]
    return scales + scales + [full]


def train_stage(stage: int, samples: list[TrainingSample],
                train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                loss_cfg: LossConfig = LossConfig(),
                aug_cfg: AugmentConfig = AugmentConfig(),
                out_dir: Path | str = "checkpoint",
                log_path: Path | str | None = None,
                fixed_batch: bool = False) -> Path:
    """Deterministic Adam training loop for one stage; writes a checkpoint
    directory and a JSON-lines metric log, and returns the checkpoint path."""
    if stage not in (1, 2):
        raise PipelineError("stage must be 1 or 2")
    size = STAGE_INPUT[stage]
    model_cfg = model_cfg or ModelConfig(input_size=size)
    if model_cfg.input_size != size:
        raise PipelineError(f"stage {stage} requires input_size {size}")
    torch.manual_seed(train_cfg.seed)
    np.random.seed(train_cfg.seed)
    model = PDNet(model_cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    augment = augment_stage1 if stage == 1 else augment_stage2

    n = len(samples)
    steps_per_epoch = max(1, math.ceil(n / train_cfg.batch_size))
    total_steps = train_cfg.max_steps or train_cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(train_cfg.seed)
    out_dir = Path(out_dir)
    log_path = Path(log_path) if log_path else out_dir / "train_log.jsonl"
    out_dir.mkdir(parents=True, exist_ok=True)
    log_f = open(log_path, "w")

    try:
        for step in range(total_steps):
            epoch = step // steps_per_epoch
            lr = lr_for_epoch(train_cfg, epoch)
            for g in opt.param_groups:
                g["lr"] = lr

            if fixed_batch:
                idx = np.arange(min(train_cfg.batch_size, n))
            else:
                idx = rng.integers(0, n, size=min(train_cfg.batch_size, n))
            batch = [augment(samples[i], aug_cfg,
                             _per_draw_seed(train_cfg.seed, 0 if fixed_batch else step, int(i) + 7))
                     for i in idx]
            tensors = _batch_tensors(batch, stage,
                                     _per_draw_seed(train_cfg.seed,
                                                    0 if fixed_batch else step, 0))
            side, _, _ = model(tensors["x"], tensors["x"])
            tri = _mask_targets_for_sides(tensors["fg"], tensors["ig"], size)
            l_seg = losses.seg_loss(side.mask_side, tri, loss_cfg.honor_ignore)
            l_dp = losses.diam_loss(side.diam_side,
                                    [tensors["heats"][0], tensors["heats"][1],
                                     tensors["heats"][2]])
            loss = losses.total_loss(l_seg, l_dp, loss_cfg)
            if not torch.isfinite(loss):
                dump = out_dir / f"nan_batch_step{step}.npz"
                np.savez(dump, x=tensors["x"].numpy())
                raise PipelineError(f"NaN loss at step {step}; batch dumped to {dump}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            log_f.write(json.dumps({"step": step, "lr": lr,
                                    "l_seg": float(l_seg.detach()),
                                    "l_dp": float(l_dp.detach()),
                                    "total": float(loss.detach())}) + "\n")
    finally:
        log_f.close()

    model.eval()
    save_checkpoint(model, out_dir, stage, STAGE_SIGMA[stage], loss_cfg.lam,
                    extra={"seed": train_cfg.seed})
    return out_dir


def read_loss_log(path: Path | str) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _forward_single(model: PDNet, image01: np.ndarray, click: Point2D):
    size = model.cfg.input_size
    c_img = geometry.make_click_image(click, size, size)
    d_img = geometry.make_distance_image(click, size, size)
    x = torch.from_numpy(np.stack([image01.astype(np.float32), c_img, d_img]))[None]
    with torch.no_grad():
        _, mask_logits, heat_logits = model(x, x)
    prob = torch.sigmoid(mask_logits)[0, 0].numpy()
    return prob, heat_logits[0].numpy()


def _component_at_click(mask: np.ndarray, click: Point2D) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask)
    cx, cy = int(round(click.x)), int(round(click.y))
    cy = min(max(cy, 0), mask.shape[0] - 1)
    cx = min(max(cx, 0), mask.shape[1] - 1)
    lab = labels[cy, cx]
    if lab == 0:
        ys, xs = np.nonzero(mask)
        d2 = (xs - click.x) ** 2 + (ys - click.y) ** 2
        lab = labels[ys[d2.argmin()], xs[d2.argmin()]]
    return labels == lab


def predict_stage2_native(model: PDNet, image01: np.ndarray,
                          center: Point2D, long_side_px: float,
                          crop_factor: float,
                          click_native: Point2D) -> tuple[np.ndarray, RecistAnnotation, LoiCrop]:
    """Crop the LOI, run the stage-2 model, and map results back to native
    slice coordinates. The returned annotation carries spacing 1 (pixels)."""
    h, w = image01.shape
    input_size = model.cfg.input_size
    side = max(crop_factor * long_side_px, 8.0)
    x0 = center.x - side / 2
    y0 = center.y - side / 2
    loi = LoiCrop(Point2D(x0, y0), side, input_size)
    m = _compose(np.array([[input_size / side, 0, 0], [0, input_size / side, 0]]),
                 np.array([[1, 0, -x0], [0, 1, -y0]], dtype=np.float64))
    crop = _warp(image01, m, input_size, False, float(image01.min()))
    click_loi = loi.to_loi(click_native)
    click_loi = Point2D(min(max(click_loi.x, 0), input_size - 1),
                        min(max(click_loi.y, 0), input_size - 1))
    prob, heat = _forward_single(model, crop, click_loi)
    mask_loi = prob >= 0.5
    if mask_loi.any():
        mask_loi = _component_at_click(mask_loi, click_loi)
    rec_loi = geometry.decode_endpoints(heat, 1.0)
    pts = [loi.to_full(p) for p in rec_loi.endpoints()]
    rec_native = RecistAnnotation(*pts, 1.0)
    # invert the crop affine to paste the mask back at native resolution
    inv = cv2.invertAffineTransform(m)
    mask_native = cv2.warpAffine(mask_loi.astype(np.uint8), inv, (w, h),
                                 flags=cv2.INTER_NEAREST) > 0
    return mask_native, rec_native, loi


def infer_two_stage(slice01: np.ndarray, click: Point2D, ckpt1: Path | str,
                    ckpt2: Path | str, spacing_mm: float,
                    aug_cfg: AugmentConfig = AugmentConfig()) -> MeasurementResult:
    """Full-slice click-to-measurement: stage-1 segmentation picks the LOI,
    stage-2 refines the mask and regresses the diameter endpoints."""
    model1, _ = load_checkpoint(ckpt1)
    model2, _ = load_checkpoint(ckpt2)
    return infer_two_stage_loaded(slice01, click, model1, model2, spacing_mm,
                                  aug_cfg)


def infer_two_stage_loaded(slice01: np.ndarray, click: Point2D,
                           model1: PDNet, model2: PDNet, spacing_mm: float,
                           aug_cfg: AugmentConfig = AugmentConfig()) -> MeasurementResult:
    h, w = slice01.shape
    if not (0 <= click.x < w and 0 <= click.y < h):
        raise geometry.GeometryError("click outside slice")
    s1 = model1.cfg.input_size
    img1 = cv2.resize(slice01, (s1, s1), interpolation=cv2.INTER_LINEAR)
    click1 = Point2D(click.x * s1 / w, click.y * s1 / h)
    prob1, _ = _forward_single(model1, img1, click1)
    mask1 = prob1 >= 0.5
    if not mask1.any():
        raise PipelineError("no lesion at click")
    comp = _component_at_click(mask1, click1)
    rec1 = geometry.diameters_from_mask(comp, 1.0)
    # back to native pixels
    long_native = rec1.long_px * w / s1
    ys, xs = np.nonzero(comp)
    center = Point2D(xs.mean() * w / s1, ys.mean() * h / s1)
    mask_native1 = cv2.resize(comp.astype(np.uint8), (w, h),
                              interpolation=cv2.INTER_NEAREST) > 0
    mask, rec_px, loi = predict_stage2_native(
        model2, slice01, center, long_native, aug_cfg.infer_crop_factor, click)
    recist = RecistAnnotation(*rec_px.endpoints(), spacing_mm)
    return MeasurementResult(mask, recist, loi, mask_native1)


def predict_training_masks(ckpt: Path | str, samples: list[TrainingSample],
                           crop_factor: float = 2.5) -> list[np.ndarray]:
    """Stage-2 predictions over the training set in native slice space,
    used by the iterative pseudo-mask refinement."""
    model, _ = load_checkpoint(ckpt)
    out = []
    for s in samples:
        pts = np.array([p.as_array() for p in s.recist.endpoints()])
        center = Point2D(*pts.mean(axis=0))
        ellipse = geometry.ellipse_from_recist(s.recist)
        click = geometry.sample_click(ellipse, 12345)
        mask, _, _ = predict_stage2_native(model, s.image01, center,
                                           s.recist.long_px, crop_factor, click)
        out.append(mask)
    return out


def iterative_refinement(samples: list[TrainingSample], rounds: int = 3,
                         train_cfg: TrainConfig = TrainConfig(),
                         model_cfg: ModelConfig | None = None,
                         loss_cfg: LossConfig = LossConfig(),
                         aug_cfg: AugmentConfig = AugmentConfig(),
                         snake_cfg: pseudomask.SnakeConfig | None = None,
                         out_dir: Path | str = "refined",
                         stage: int = 2) -> dict:
    """Train / predict / refine loop: each round retrains from scratch on
    the current tri-state masks, then rebuilds them from the model's own
    refined predictions. Returns per-round telemetry."""
    snake_cfg = snake_cfg or pseudomask.SnakeConfig(iterations=30)
    out_dir = Path(out_dir)
    history = {"rounds": [], "checkpoints": []}
    for rnd in range(1, rounds + 1):
        ckpt = train_stage(stage, samples, train_cfg, model_cfg, loss_cfg,
                           aug_cfg, out_dir / f"round{rnd}")
        history["checkpoints"].append(str(ckpt))
        telemetry = {"round": rnd}
        if samples[0].gt_mask is not None:
            preds = predict_training_masks(ckpt, samples)
            dices = [2 * (p & s.gt_mask).sum() /
                     max(p.sum() + s.gt_mask.sum(), 1)
                     for p, s in zip(preds, samples)]
            telemetry["train_dice"] = float(np.mean(dices))
        else:
            preds = predict_training_masks(ckpt, samples)
        if rnd < rounds:
            ig_fracs = []
            for s, pred in zip(samples, preds):
                if not pred.any():
                    continue  # keep previous mask
                ellipse = geometry.ellipse_from_recist(s.recist)
                emask = geometry.rasterize_ellipse(ellipse, *s.image01.shape)
                try:
                    tri = pseudomask.refine_round(pred, s.image01, emask,
                                                  snake_cfg)
                except pseudomask.PseudoMaskError:
                    continue
                s.labels = tri.labels
                ig_fracs.append(tri.ignore.mean())
            telemetry["ignore_fraction"] = float(np.mean(ig_fracs)) if ig_fracs else 0.0
        history["rounds"].append(telemetry)
    return history
