"""Coordinate-level constructions: RECIST annotations, ellipses, click priors,
Gaussian keypoint heatmaps, and diameter extraction from binary masks.

All functions are pure; randomness is always driven by an explicit seed.
Coordinates are (x, y) = (column, row) throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_CLICK_RADIUS = 3.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError("non-finite point")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    def distance_to(self, other: "Point2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class RecistAnnotation:
    """Two perpendicular diameters: long axis endpoints first, then short."""

    long_a: Point2D
    long_b: Point2D
    short_a: Point2D
    short_b: Point2D
    spacing_mm: float

    def __post_init__(self):
        if self.spacing_mm <= 0:
            raise GeometryError("spacing must be positive")

    @property
    def long_px(self) -> float:
        return self.long_a.distance_to(self.long_b)

    @property
    def short_px(self) -> float:
        return self.short_a.distance_to(self.short_b)

    @property
    def long_mm(self) -> float:
        return self.long_px * self.spacing_mm

    @property
    def short_mm(self) -> float:
        return self.short_px * self.spacing_mm

    def endpoints(self) -> tuple[Point2D, Point2D, Point2D, Point2D]:
        return (self.long_a, self.long_b, self.short_a, self.short_b)

    def to_json(self) -> dict:
        return {
            "long": [[self.long_a.x, self.long_a.y], [self.long_b.x, self.long_b.y]],
            "short": [[self.short_a.x, self.short_a.y], [self.short_b.x, self.short_b.y]],
            "spacing_mm": self.spacing_mm,
        }

    @classmethod
    def from_json(cls, obj: dict | str) -> "RecistAnnotation":
        if isinstance(obj, str):
            obj = json.loads(obj)
        (lax, lay), (lbx, lby) = obj["long"]
        (sax, say), (sbx, sby) = obj["short"]
        return cls(
            Point2D(lax, lay), Point2D(lbx, lby),
            Point2D(sax, say), Point2D(sbx, sby),
            float(obj["spacing_mm"]),
        )


@dataclass(frozen=True)
class EllipseParams:
    center: Point2D
    semi_major: float
    semi_minor: float
    theta: float  # radians, major-axis orientation

    def __post_init__(self):
        if not (self.semi_major >= self.semi_minor > 0):
            raise GeometryError("require semi_major >= semi_minor > 0")

    def scaled(self, factor: float) -> "EllipseParams":
        return EllipseParams(self.center, self.semi_major * factor,
                             self.semi_minor * factor, self.theta)

    def contains(self, x, y) -> np.ndarray:
        """Vectorized canonical-frame inclusion test (boundary inclusive)."""
        dx = np.asarray(x, dtype=np.float64) - self.center.x
        dy = np.asarray(y, dtype=np.float64) - self.center.y
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.semi_major) ** 2 + (v / self.semi_minor) ** 2 <= 1.0


@dataclass(frozen=True)
class HeatmapConfig:
    sigma: float = 3.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise GeometryError("sigma must be positive")


def ellipse_from_recist(recist: RecistAnnotation) -> EllipseParams:
    """Fit an ellipse to a RECIST cross: centroid center, long-axis
    orientation, half-lengths as semi-axes. The short axis contributes only
    its length (manual diameters are rarely exactly perpendicular)."""
    long_len = recist.long_px
    short_len = recist.short_px
    if long_len == 0 or short_len == 0:
        raise GeometryError("degenerate RECIST")
    pts = np.array([p.as_array() for p in recist.endpoints()])
    cx, cy = pts.mean(axis=0)
    theta = math.atan2(recist.long_b.y - recist.long_a.y,
                       recist.long_b.x - recist.long_a.x)
    a = long_len / 2.0
    b = min(short_len / 2.0, a)
    return EllipseParams(Point2D(cx, cy), a, b, theta)


def rasterize_ellipse(params: EllipseParams, height: int, width: int) -> np.ndarray:
    if height <= 0 or width <= 0:
        raise GeometryError("non-positive shape")
    yy, xx = np.mgrid[0:height, 0:width]
    return params.contains(xx, yy)


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor outside the mask,
    returned as an (n, 2) array of (x, y)."""
    from scipy import ndimage

    eroded = ndimage.binary_erosion(mask, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool), border_value=0)
    ys, xs = np.nonzero(mask & ~eroded)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask.astype(bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == counts.argmax()


def diameters_from_mask(mask: np.ndarray, spacing_mm: float,
                        perp_tol_deg: float = 5.0) -> RecistAnnotation:
    """Long axis = farthest boundary-point pair; short axis = longest chord
    within `perp_tol_deg` of perpendicular to it. Brute force over boundary
    pairs of the largest connected component."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise GeometryError("empty mask")
    mask = _largest_component(mask)
    pts = _boundary_points(mask)
    if len(pts) == 1:
        p = Point2D(pts[0, 0], pts[0, 1])
        return RecistAnnotation(p, p, p, p, spacing_mm)

    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    long_a, long_b = pts[i], pts[j]
    long_dir = long_b - long_a
    long_len = math.sqrt(d2[i, j])

    # chords within tolerance of perpendicular: |cos(angle to long axis)| <= sin(tol)
    dots = np.abs(diff @ long_dir)
    norms = np.sqrt(d2) * long_len
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.where(norms > 0, dots / norms, 1.0)
    ok = cosang <= math.sin(math.radians(perp_tol_deg)) + 1e-12
    d2_perp = np.where(ok, d2, -1.0)
    k, l = np.unravel_index(np.argmax(d2_perp), d2_perp.shape)
    if d2_perp[k, l] <= 0:
        # no near-perpendicular chord (thin masks); fall back to midpoint
        mid = (long_a + long_b) / 2
        short_a = short_b = mid
    else:
        short_a, short_b = pts[k], pts[l]

    return RecistAnnotation(
        Point2D(*long_a), Point2D(*long_b),
        Point2D(*short_a), Point2D(*short_b), spacing_mm)


def _check_inside(p: Point2D, height: int, width: int, what: str):
    if not (0 <= p.x < width and 0 <= p.y < height):
        raise GeometryError(f"{what} ({p.x}, {p.y}) outside {width}x{height} image")


def make_click_image(click: Point2D, height: int, width: int,
                     radius: float = DEFAULT_CLICK_RADIUS) -> np.ndarray:
    _check_inside(click, height, width, "click")
    yy, xx = np.mgrid[0:height, 0:width]
    inside = (xx - click.x) ** 2 + (yy - click.y) ** 2 <= radius ** 2
    return inside.astype(np.float32)


def make_distance_image(click: Point2D, height: int, width: int) -> np.ndarray:
    """Inverted normalized distance: 1 at the click, decaying to just above 0
    at the far image corner."""
    _check_inside(click, height, width, "click")
    yy, xx = np.mgrid[0:height, 0:width]
    dist = np.sqrt((xx - click.x) ** 2 + (yy - click.y) ** 2)
    diag = math.hypot(height, width)
    return (1.0 - dist / diag).astype(np.float32)


def make_heatmaps(recist: RecistAnnotation, height: int, width: int,
                  cfg: HeatmapConfig) -> np.ndarray:
    """Four Gaussian maps (long_a, long_b, short_a, short_b), peak 1 at each
    endpoint, shape (4, height, width)."""
    for p in recist.endpoints():
        _check_inside(p, height, width, "endpoint")
    yy, xx = np.mgrid[0:height, 0:width]
    out = np.empty((4, height, width), dtype=np.float32)
    two_s2 = 2.0 * cfg.sigma ** 2
    for k, p in enumerate(recist.endpoints()):
        d2 = (xx - p.x) ** 2 + (yy - p.y) ** 2
        out[k] = np.exp(-d2 / two_s2)
    return out


def decode_endpoints(heatmaps: np.ndarray, spacing_mm: float) -> RecistAnnotation:
    """Argmax decoding; ties broken row-major (smallest row, then column)."""
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim != 3 or heatmaps.shape[0] != 4:
        raise GeometryError("expected 4 stacked heatmaps")
    pts = []
    for k in range(4):
        m = heatmaps[k]
        if np.ptp(m) == 0:
            raise GeometryError("no peak")
        flat = int(np.argmax(m))
        y, x = divmod(flat, m.shape[1])
        pts.append(Point2D(float(x), float(y)))
    la, lb, sa, sb = pts
    if la.distance_to(lb) < sa.distance_to(sb):
        la, lb, sa, sb = sa, sb, la, lb
    return RecistAnnotation(la, lb, sa, sb, spacing_mm)


def sample_click(ellipse: EllipseParams, rng_seed: int) -> Point2D:
    """Uniform point inside the ellipse eroded to half of its size."""
    rng = np.random.default_rng(rng_seed)
    half = ellipse.scaled(0.5)
    # uniform in unit disk, then stretch and rotate into the ellipse frame
    r = math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    u = r * math.cos(phi) * half.semi_major
    v = r * math.sin(phi) * half.semi_minor
    c, s = math.cos(half.theta), math.sin(half.theta)
    return Point2D(half.center.x + u * c - v * s,
                   half.center.y + u * s + v * c)


def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating background/foreground, first run
    background (possibly 0)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def decode_rle(runs: list[int], height: int, width: int) -> np.ndarray:
    total = sum(runs)
    if total != height * width:
        raise GeometryError("RLE length mismatch")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    fg = False
    for run in runs:
        if fg:
            flat[pos:pos + run] = True
        pos += run
        fg = not fg
    return flat.reshape(height, width)
