"""Seeded elastic deformation shared between the student input and teacher output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidConfig, InvalidInput


@dataclass(frozen=True)
class ElasticParams:
    grid_sigma: float
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if not self.grid_sigma > 0:
            raise InvalidConfig(f"grid_sigma must be > 0, got {self.grid_sigma}")
        if not self.magnitude >= 0:
            raise InvalidConfig(f"magnitude must be >= 0, got {self.magnitude}")

    @classmethod
    def defaults(cls, h: int, seed: int = 0) -> "ElasticParams":
        return cls(grid_sigma=h / 8, magnitude=h / 32, seed=seed)


@dataclass(frozen=True)
class DisplacementField:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def shape(self):
        return self.dx.shape

    @classmethod
    def zeros(cls, h: int, w: int) -> "DisplacementField":
        return cls(np.zeros((h, w)), np.zeros((h, w)))


def make_displacement(h: int, w: int, params: ElasticParams) -> DisplacementField:
    if params.magnitude >= min(h, w) / 4:
        raise InvalidConfig(
            f"magnitude {params.magnitude} must stay below min(H, W)/4 = {min(h, w) / 4}"
        )
    if params.magnitude == 0:
        return DisplacementField.zeros(h, w)
    rng = np.random.default_rng(params.seed)
    raw = rng.uniform(-1.0, 1.0, size=(2, h, w))
    dx = gaussian_filter(raw[0], params.grid_sigma, mode="reflect")
    dy = gaussian_filter(raw[1], params.grid_sigma, mode="reflect")
    peak = max(np.abs(dx).max(), np.abs(dy).max())
    if peak == 0:
        return DisplacementField.zeros(h, w)
    # divide first so the peak entry becomes exactly +-1 before scaling
    return DisplacementField(dx / peak * params.magnitude, dy / peak * params.magnitude)


def warp(image, field: DisplacementField, interp: str = "bilinear") -> np.ndarray:
    """Backward-warp ``image``: out[p] = image(p + d[p]), edge-clamped."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != field.shape:
        raise InvalidInput(f"image {img.shape} and field {field.shape} dims differ")
    h, w = img.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = np.clip(rows + field.dy, 0, h - 1)
    x = np.clip(cols + field.dx, 0, w - 1)
    if interp == "nearest":
        yi = np.floor(y + 0.5).astype(np.intp)
        xi = np.floor(x + 0.5).astype(np.intp)
        return img[np.minimum(yi, h - 1), np.minimum(xi, w - 1)]
    if interp != "bilinear":
        raise InvalidConfig(f"unknown interpolation {interp!r}")
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    fy = y - y0
    fx = x - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    out = top * (1 - fy) + bot * fy
    # rounding can push a convex combination one ulp outside the data range
    return np.clip(out, img.min(), img.max())


def random_params(rng: np.random.Generator, h: int, grid_sigma=None, magnitude=None) -> ElasticParams:
    """One deformation per training iteration; only the seed is random."""
    base = ElasticParams.defaults(h)
    return ElasticParams(
        grid_sigma=base.grid_sigma if grid_sigma is None else grid_sigma,
        magnitude=base.magnitude if magnitude is None else magnitude,
        seed=int(rng.integers(0, 2**63 - 1)),
    )
