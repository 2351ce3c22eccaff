"""Weak supervision masks: morphological Chan-Vese refinement of the RECIST
ellipse and tri-state (foreground / background / ignore) mask algebra."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FG = 1
BG = 0
IGNORE = 2


class PseudoMaskError(ValueError):
    pass


@dataclass(frozen=True)
class SnakeConfig:
    iterations: int = 60
    smoothing_passes: int = 2
    lambda_in: float = 1.0
    lambda_out: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise PseudoMaskError("iterations must be >= 1")
        if self.lambda_in <= 0 or self.lambda_out <= 0:
            raise PseudoMaskError("region weights must be positive")


# Line structuring elements for the inf-sup / sup-inf curvature operator.
_LINES = [
    np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]], dtype=bool),
    np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]], dtype=bool),
    np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=bool),
    np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=bool),
]


def _sup_inf(u: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.binary_erosion(u, se, border_value=0)
                     for se in _LINES]).max(axis=0)


def _inf_sup(u: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.binary_dilation(u, se, border_value=0)
                     for se in _LINES]).min(axis=0)


def _curvature_smooth(u: np.ndarray, flip: bool) -> np.ndarray:
    # composing the two openings in alternating order approximates a
    # median/curvature flow without directional bias
    if flip:
        return _sup_inf(_inf_sup(u))
    return _inf_sup(_sup_inf(u))


def morph_snake(image: np.ndarray, init: np.ndarray,
                cfg: SnakeConfig = SnakeConfig()) -> tuple[np.ndarray, bool]:
    """Morphological active contours without edges.

    Alternates region competition (boundary pixels flip to whichever region
    mean explains them better) with morphological curvature smoothing.
    Returns (mask, collapsed): if the contour ever empties, the last
    non-empty iterate is returned with collapsed=True.
    """
    image = np.asarray(image, dtype=np.float64)
    u = np.asarray(init, dtype=bool).copy()
    if image.shape != u.shape:
        raise PseudoMaskError("image/init shape mismatch")
    if not u.any():
        raise PseudoMaskError("empty init")

    smooth_counter = 0
    for _ in range(cfg.iterations):
        inside = image[u]
        outside = image[~u]
        c_in = inside.mean()
        c_out = outside.mean() if outside.size else c_in

        force = cfg.lambda_in * (image - c_in) ** 2 \
            - cfg.lambda_out * (image - c_out) ** 2
        band = ndimage.binary_dilation(u) ^ ndimage.binary_erosion(u, border_value=0)
        nxt = u.copy()
        nxt[band & (force < 0)] = True
        nxt[band & (force > 0)] = False

        for _ in range(cfg.smoothing_passes):
            nxt = _curvature_smooth(nxt, flip=smooth_counter % 2 == 1)
            smooth_counter += 1

        if not nxt.any():
            return u, True
        u = nxt
    return u, False


@dataclass
class TriStateMask:
    """Per-pixel labels in {BG, FG, IGNORE}; IGNORE pixels are excluded from
    loss computation."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if not np.isin(self.labels, (BG, FG, IGNORE)).all():
            raise PseudoMaskError("labels must be in {BG, FG, IGNORE}")

    @property
    def shape(self):
        return self.labels.shape

    @property
    def fg(self) -> np.ndarray:
        return self.labels == FG

    @property
    def bg(self) -> np.ndarray:
        return self.labels == BG

    @property
    def ignore(self) -> np.ndarray:
        return self.labels == IGNORE

    @classmethod
    def from_binary(cls, mask: np.ndarray) -> "TriStateMask":
        return cls(np.where(np.asarray(mask, dtype=bool), FG, BG).astype(np.uint8))

    def to_bytes(self) -> bytes:
        """2 bits per pixel, row-major, preceded by a JSON header line."""
        h, w = self.labels.shape
        header = json.dumps({"h": h, "w": w}).encode() + b"\n"
        flat = self.labels.ravel()
        bits = np.zeros(flat.size * 2, dtype=np.uint8)
        bits[0::2] = (flat >> 1) & 1
        bits[1::2] = flat & 1
        return header + np.packbits(bits).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TriStateMask":
        nl = data.index(b"\n")
        meta = json.loads(data[:nl])
        h, w = meta["h"], meta["w"]
        bits = np.unpackbits(np.frombuffer(data[nl + 1:], dtype=np.uint8),
                             count=h * w * 2)
        labels = (bits[0::2] << 1) | bits[1::2]
        return cls(labels.reshape(h, w))


def build_pseudo_mask(ellipse_mask: np.ndarray, refined: np.ndarray) -> TriStateMask:
    """FG = intersection, IGNORE = symmetric difference, BG = the rest."""
    e = np.asarray(ellipse_mask, dtype=bool)
    r = np.asarray(refined, dtype=bool)
    if e.shape != r.shape:
        raise PseudoMaskError("shape mismatch")
    inter = e & r
    if not inter.any():
        raise PseudoMaskError("refinement diverged")
    labels = np.full(e.shape, BG, dtype=np.uint8)
    labels[e ^ r] = IGNORE
    labels[inter] = FG
    return TriStateMask(labels)


def refine_round(model_mask: np.ndarray, image: np.ndarray,
                 ellipse_mask: np.ndarray,
                 cfg: SnakeConfig = SnakeConfig()) -> TriStateMask:
    """One round of pseudo-mask refinement: snake-refine the model's current
    prediction, then intersect with the ellipse prior."""
    refined, _ = morph_snake(image, model_mask, cfg)
    return build_pseudo_mask(ellipse_mask, refined)
