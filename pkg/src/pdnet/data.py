"""Dataset ingestion and the synthetic desk-scale lesion generator.

Slices follow the DeepLesion interchange convention: 16-bit grayscale PNG
storing Hounsfield units + 32768, with spacing carried in a CSV index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry
from .geometry import Point2D, RecistAnnotation

HU_OFFSET = 32768
DEFAULT_WINDOW = (-1024.0, 1050.0)

INDEX_COLUMNS = ["id", "image_path", "spacing_mm",
                 "x1", "y1", "x2", "y2", "x3", "y3", "x4", "y4",
                 "mask_path", "split"]


class DataError(ValueError):
    pass


@dataclass
class CtSlice:
    pixels: np.ndarray  # int32 HU
    spacing_mm: float
    id: str = ""

    def __post_init__(self):
        if self.spacing_mm <= 0:
            raise DataError("spacing must be positive")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class DatasetRecord:
    id: str
    image_path: Path
    spacing_mm: float
    recist: RecistAnnotation
    mask_path: Path | None = None
    split: str = "train"


@dataclass
class DatasetIndex:
    root: Path
    records: list[DatasetRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def split(self, tag: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == tag]

    def by_id(self, rid: str) -> DatasetRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def save(self, path: Path | None = None):
        path = path or self.root / "index.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(INDEX_COLUMNS)
            for r in self.records:
                pts = r.recist.endpoints()
                row = [r.id, str(r.image_path.relative_to(self.root)),
                       r.spacing_mm]
                for p in pts:
                    row += [p.x, p.y]
                row += [str(r.mask_path.relative_to(self.root)) if r.mask_path else "",
                        r.split]
                w.writerow(row)

    @classmethod
    def load(cls, root: Path) -> "DatasetIndex":
        root = Path(root)
        path = root / "index.csv"
        if not path.exists():
            raise DataError(f"missing index: {path}")
        records = []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                spacing = float(row["spacing_mm"])
                recist = RecistAnnotation(
                    Point2D(float(row["x1"]), float(row["y1"])),
                    Point2D(float(row["x2"]), float(row["y2"])),
                    Point2D(float(row["x3"]), float(row["y3"])),
                    Point2D(float(row["x4"]), float(row["y4"])),
                    spacing)
                img = root / row["image_path"]
                if not img.exists():
                    raise DataError(f"missing image: {img}")
                mask = root / row["mask_path"] if row.get("mask_path") else None
                if mask is not None and not mask.exists():
                    raise DataError(f"missing mask: {mask}")
                records.append(DatasetRecord(row["id"], img, spacing, recist,
                                             mask, row.get("split", "train")))
        return cls(root, records)


def save_slice(path: Path, pixels_hu: np.ndarray):
    stored = (np.asarray(pixels_hu, dtype=np.int64) + HU_OFFSET)
    if stored.min() < 0 or stored.max() > 65535:
        raise DataError("HU out of 16-bit storage range")
    Image.fromarray(stored.astype(np.uint16)).save(path)


def load_slice(path: Path, spacing_mm: float, slice_id: str = "") -> CtSlice:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32) or (arr.dtype == np.int32 and arr.max() > 65535):
        raise DataError(f"expected 16-bit grayscale image, got {arr.dtype}")
    pixels = arr.astype(np.int32) - HU_OFFSET
    return CtSlice(pixels, spacing_mm, slice_id or Path(path).stem)


def load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 0


def save_mask(path: Path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8)).save(path)


def window_normalize(pixels_hu: np.ndarray, lo_hu: float = DEFAULT_WINDOW[0],
                     hi_hu: float = DEFAULT_WINDOW[1]) -> np.ndarray:
    if lo_hu >= hi_hu:
        raise DataError("window lo must be below hi")
    x = np.clip(np.asarray(pixels_hu, dtype=np.float32), lo_hu, hi_hu)
    return (x - lo_hu) / (hi_hu - lo_hu)


def _perturbed_ellipse_mask(rng: np.random.Generator, size: int,
                            center, semi_major, semi_minor, theta,
                            perturb_amp: float) -> np.ndarray:
    """Ellipse whose radius is modulated by a low-order Fourier series in
    the boundary angle; amplitude 0 gives the exact ellipse."""
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - center[0]
    dy = yy - center[1]
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / semi_major
    v = (-dx * s + dy * c) / semi_minor
    rho = np.sqrt(u ** 2 + v ** 2)
    if perturb_amp == 0:
        return rho <= 1.0
    phi = np.arctan2(v, u)
    bound = np.ones_like(rho)
    for k in range(2, 5):
        amp = perturb_amp * rng.uniform(0.3, 1.0) / k
        phase = rng.uniform(0, 2 * math.pi)
        bound += amp * np.cos(k * phi + phase)
    return rho <= bound


def synth_dataset(n: int, size: int = 512, seed: int = 0,
                  out_dir: Path | str = "synthetic",
                  perturb_amp: float = 0.12,
                  contrast_range: tuple[float, float] = (0.25, 0.5),
                  split: str = "train",
                  spacing_range: tuple[float, float] = (0.6, 1.2),
                  axis_ratio_range: tuple[float, float] = (0.45, 0.68)) -> DatasetIndex:
    """Generate n synthetic lesion slices with exact masks and RECIST
    annotations derived the same way evaluation derives them."""
    from scipy import ndimage

    if n < 1:
        raise DataError("n must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lo, hi = DEFAULT_WINDOW
    records = []
    for i in range(n):
        spacing = float(rng.uniform(*spacing_range))
        # textured soft-tissue-like background
        bg = rng.normal(0.35, 0.03, (size, size))
        bg = ndimage.gaussian_filter(bg, 3.0) + rng.normal(0, 0.015, (size, size))

        a = rng.uniform(0.055, 0.12) * size
        # keep the minor axis well below the major one so the long-axis
        # orientation (and hence the RECIST endpoints) is unambiguous
        b = a * rng.uniform(*axis_ratio_range)
        theta = rng.uniform(0, math.pi)
        margin = a * 1.6
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        mask = _perturbed_ellipse_mask(rng, size, (cx, cy), a, b, theta, perturb_amp)

        delta = rng.uniform(*contrast_range)
        img = bg + delta * mask
        img = ndimage.gaussian_filter(img, rng.uniform(0.5, 1.2))
        img = np.clip(img, 0, 1)
        hu = np.round(lo + img * (hi - lo)).astype(np.int32)

        rid = f"synth_{seed}_{i:04d}"
        img_path = root / f"{rid}.png"
        mask_path = root / f"{rid}_mask.png"
        save_slice(img_path, hu)
        save_mask(mask_path, mask)
        recist = geometry.diameters_from_mask(mask, spacing)
        records.append(DatasetRecord(rid, img_path, spacing, recist,
                                     mask_path, split))
    index = DatasetIndex(root, records)
    index.save()
    return index


def validate_record(rec: DatasetRecord, height: int, width: int) -> None:
    for p in rec.recist.endpoints():
        if not (0 <= p.x < width and 0 <= p.y < height):
            raise DataError(f"{rec.id}: endpoint outside slice")
    if rec.spacing_mm <= 0:
        raise DataError(f"{rec.id}: bad spacing")
    if rec.mask_path is not None and not load_mask(rec.mask_path).any():
        raise DataError(f"{rec.id}: empty mask")
