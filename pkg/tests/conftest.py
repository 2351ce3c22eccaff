"""Shared fixtures. Expensive artifacts (synthetic datasets, desk-scale
checkpoints) are cached under .cache/ keyed by their parameters so repeated
runs do not retrain."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from pdnet import data as data_mod
from pdnet import pipeline

CACHE = Path(__file__).resolve().parent.parent / ".cache"
CACHE.mkdir(exist_ok=True)

# desk-scale training configuration shared by the acceptance suite,
# the service tests, and the frontend end-to-end test
DESK_SEED = 11
DESK_TRAIN_N = 64
DESK_STEPS_STAGE2 = 2000
DESK_STEPS_STAGE1 = 400
DESK_BATCH = 2
# the stage-2 learning run uses the default batch so the epoch-based lr
# decay engages within 2000 steps; smaller batches never reach epoch 60
DESK_BATCH_STAGE2 = 8
# the strict-decrease smoke run uses a gentler lr than the main schedule:
# at 1e-3 Adam overshoots on individual steps even while converging overall
SMOKE_LR = 2e-4
SMOKE_STEPS = 50
REFINE_N = 16
REFINE_STEPS = 300


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 2 * float((a & b).sum()) / denom if denom else 1.0


def _cached_dataset(name: str, n: int, size: int, seed: int) -> data_mod.DatasetIndex:
    root = CACHE / name
    if (root / "index.csv").exists():
        return data_mod.DatasetIndex.load(root)
    return data_mod.synth_dataset(n, size, seed, root)


@pytest.fixture(scope="session")
def train_dataset():
    return _cached_dataset(f"train{DESK_TRAIN_N}", DESK_TRAIN_N, 256, DESK_SEED)


@pytest.fixture(scope="session")
def heldout_dataset():
    return _cached_dataset("heldout16", 16, 256, DESK_SEED + 1)


@pytest.fixture(scope="session")
def train_samples(train_dataset):
    return pipeline.build_initial_samples(train_dataset)


def _train_cached(name: str, stage: int, samples, steps: int,
                  seed: int = DESK_SEED, batch: int = DESK_BATCH) -> Path:
    out = CACHE / name
    if (out / "config.json").exists():
        return out
    cfg = pipeline.TrainConfig(batch_size=batch, seed=seed, max_steps=steps)
    return pipeline.train_stage(stage, samples, cfg, out_dir=out)


@pytest.fixture(scope="session")
def desk_ckpt2(train_samples):
    """Stage-2 checkpoint: the desk-scale learning criterion's 2000 steps."""
    return _train_cached("ckpt_stage2", 2, train_samples, DESK_STEPS_STAGE2,
                         batch=DESK_BATCH_STAGE2)


@pytest.fixture(scope="session")
def desk_ckpt1(train_samples):
    return _train_cached("ckpt_stage1", 1, train_samples, DESK_STEPS_STAGE1)


def _smoke_run(name: str, samples) -> Path:
    """50-step fixed-batch stage-2 run; returns the loss-log path."""
    out = CACHE / name
    log = out / "train_log.jsonl"
    if (out / "config.json").exists() and log.exists():
        return log
    cfg = pipeline.TrainConfig(lr=SMOKE_LR, batch_size=DESK_BATCH,
                               seed=DESK_SEED, max_steps=SMOKE_STEPS)
    pipeline.train_stage(2, samples, cfg, out_dir=out, fixed_batch=True)
    return log


@pytest.fixture(scope="session")
def smoke_logs(train_samples):
    """Two identically-seeded fixed-batch runs (monotonicity + determinism)."""
    return _smoke_run("smoke_a", train_samples), _smoke_run("smoke_b", train_samples)


@pytest.fixture(scope="session")
def refinement_history(train_samples):
    import copy

    path = CACHE / "refine" / "history.json"
    if path.exists():
        return json.loads(path.read_text())
    subset = [copy.deepcopy(s) for s in train_samples[:REFINE_N]]
    cfg = pipeline.TrainConfig(batch_size=DESK_BATCH, seed=DESK_SEED,
                               max_steps=REFINE_STEPS)
    hist = pipeline.iterative_refinement(subset, rounds=3, train_cfg=cfg,
                                         out_dir=CACHE / "refine")
    path.write_text(json.dumps(hist))
    return hist


def exhaustive_diameters(mask: np.ndarray, perp_tol_deg: float = 5.0):
    """Independent O(n^2) oracle for diameters_from_mask: plain loops over
    4-connected boundary pixels of the largest component."""
    from scipy import ndimage

    labels, n = ndimage.label(mask)
    if n > 1:
        counts = np.bincount(labels.ravel())
        counts[0] = 0
        mask = labels == counts.argmax()
    mask = np.asarray(mask, dtype=bool)
    pts = []
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            on_edge = (y == 0 or y == h - 1 or x == 0 or x == w - 1
                       or not (mask[y - 1, x] and mask[y + 1, x]
                               and mask[y, x - 1] and mask[y, x + 1]))
            if on_edge:
                pts.append((x, y))
    best = (0.0, pts[0], pts[0])
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d2 = (pts[i][0] - pts[j][0]) ** 2 + (pts[i][1] - pts[j][1]) ** 2
            if d2 > best[0]:
                best = (d2, pts[i], pts[j])
    d2l, la, lb = best
    ll = math.sqrt(d2l)
    ux, uy = (lb[0] - la[0]), (lb[1] - la[1])
    tol = math.sin(math.radians(perp_tol_deg)) + 1e-12
    best_s = (-1.0, la, la)
    for i in range(len(pts)):
        for j in range(len(pts)):
            if i == j:
                continue
            vx, vy = pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]
            d = math.hypot(vx, vy)
            if d == 0 or ll == 0:
                continue
            if abs(vx * ux + vy * uy) / (d * ll) <= tol and d ** 2 > best_s[0]:
                best_s = (d ** 2, pts[i], pts[j])
    if best_s[0] <= 0:
        mid = ((la[0] + lb[0]) / 2, (la[1] + lb[1]) / 2)
        sa = sb = mid
    else:
        sa, sb = best_s[1], best_s[2]
    return (la, lb, sa, sb)


def random_blob(rng: np.random.Generator, size: int = 48) -> np.ndarray:
    """Connected random blob: union of a few overlapping disks."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    cx, cy = size / 2, size / 2
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(4, size / 5)
        ox = cx + rng.uniform(-size / 6, size / 6)
        oy = cy + rng.uniform(-size / 6, size / 6)
        mask |= (xx - ox) ** 2 + (yy - oy) ** 2 <= r ** 2
        cx, cy = ox, oy
    return mask
