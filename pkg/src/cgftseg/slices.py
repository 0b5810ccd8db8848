"""Image containers passed between the ingestion, augmentation and training stages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInput

DOMAINS = ("source", "target", "transferred")


@dataclass(frozen=True)
class Slice:
    """Single-channel 2-D image with pixels in [0, 1] plus identity metadata."""

    pixels: np.ndarray
    patient_id: str = ""
    slice_index: int = 0
    domain: str = "source"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise InvalidInput(f"slice must be 2-D, got shape {px.shape}")
        h, w = px.shape
        if h < 8 or w < 8 or h % 2 or w % 2:
            raise InvalidInput(f"slice dims must be even and >= 8, got {h}x{w}")
        if not np.all(np.isfinite(px)):
            raise InvalidInput("slice contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInput("slice pixels must lie in [0, 1]")
        if self.domain not in DOMAINS:
            raise InvalidInput(f"unknown domain {self.domain!r}")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def slice_id(self):
        return f"{self.patient_id}/{self.slice_index:04d}"

    def with_pixels(self, pixels, domain=None):
        return replace(self, pixels=pixels, domain=domain or self.domain)


@dataclass(frozen=True)
class LabeledSlice:
    image: Slice
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.shape != self.image.shape:
            raise InvalidInput(f"mask shape {m.shape} != image shape {self.image.shape}")
        if not np.isin(m, (0, 1)).all():
            raise InvalidInput("mask must be binary")
        object.__setattr__(self, "mask", m.astype(np.uint8))


def as_pixels(x) -> np.ndarray:
    """Return the float64 pixel plane of a Slice or array-like."""
    if isinstance(x, Slice):
        return x.pixels
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def check_binary(mask, name="mask") -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise InvalidInput(f"{name} must be binary")
    return m.astype(bool)
