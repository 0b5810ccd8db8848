"""Low-frequency amplitude transfer between CT slices.

The source slice keeps its phase spectrum (anatomy and lesion layout) while the
low-frequency block of its amplitude spectrum is replaced by the target's,
which carries the global intensity profile of the target scanner/domain.

Conventions: forward DFT unnormalized with DC at index (0, 0); inverse carries
the 1/(H*W) factor. The low-frequency box is taken in wrap-around coordinates
of the unshifted spectrum, so no fftshift is ever applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, InvalidInput
from .slices import Slice, as_pixels


@dataclass(frozen=True)
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray


@dataclass(frozen=True)
class StyleMask:
    alpha: float
    mask: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _finite(a, what):
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{what} contains non-finite values")


def fft2(image) -> np.ndarray:
    """Unnormalized forward 2-D DFT of a Slice or 2-D array (complex128)."""
    px = as_pixels(image)
    _finite(px, "image")
    return np.fft.fft2(px)


def decompose(field) -> Spectrum:
    field = np.asarray(field, dtype=np.complex128)
    _finite(field, "field")
    # np.angle(0) is 0, which is the convention for empty bins
    return Spectrum(np.abs(field), np.angle(field))


def compose(spec: Spectrum) -> np.ndarray:
    amp = np.asarray(spec.amplitude, dtype=np.float64)
    phase = np.asarray(spec.phase, dtype=np.float64)
    if amp.shape != phase.shape:
        raise InvalidInput(f"amplitude {amp.shape} and phase {phase.shape} differ")
    if np.any(amp < 0):
        raise InvalidInput("amplitude must be non-negative")
    _finite(amp, "amplitude")
    _finite(phase, "phase")
    return amp * np.cos(phase) + 1j * (amp * np.sin(phase))


def ifft2(field, clamp=True) -> np.ndarray:
    """Real part of the normalized inverse DFT, clamped to [0, 1] unless ``clamp=False``."""
    field = np.asarray(field, dtype=np.complex128)
    _finite(field, "field")
    out = np.fft.ifft2(field).real
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def signed_freqs(n: int) -> np.ndarray:
    """Map array index u in [0, n) to the signed frequency in [-n/2, n/2)."""
    u = np.arange(n)
    return np.where(u < n // 2, u, u - n)


def low_freq_mask(h: int, w: int, alpha: float) -> StyleMask:
    if not 0.0 <= alpha <= 0.5:
        raise InvalidConfig(f"alpha must be in [0, 0.5], got {alpha}")
    if h < 8 or w < 8 or h % 2 or w % 2:
        raise InvalidInput(f"mask dims must be even and >= 8, got {h}x{w}")
    bh = int(np.floor(alpha * h))
    bw = int(np.floor(alpha * w))
    rows = np.abs(signed_freqs(h)) <= bh
    cols = np.abs(signed_freqs(w)) <= bw
    return StyleMask(float(alpha), np.outer(rows, cols).astype(np.uint8))


def amplitude_swap(a_src, a_tgt, mask) -> np.ndarray:
    m = mask.mask if isinstance(mask, StyleMask) else np.asarray(mask)
    a_src = np.asarray(a_src, dtype=np.float64)
    a_tgt = np.asarray(a_tgt, dtype=np.float64)
    if not (a_src.shape == a_tgt.shape == m.shape):
        raise InvalidInput(
            f"shape mismatch: source {a_src.shape}, target {a_tgt.shape}, mask {m.shape}"
        )
    return np.where(m.astype(bool), a_tgt, a_src)


def transfer_pixels(src, tgt, alpha: float, clamp=True) -> np.ndarray:
    """Pixel-level style transfer; ``clamp=False`` exposes the raw inverse for checks."""
    xs, xt = as_pixels(src), as_pixels(tgt)
    if xs.shape != xt.shape:
        raise InvalidInput(f"source {xs.shape} and target {xt.shape} dims differ")
    mask = low_freq_mask(*xs.shape, alpha)
    spec_s = decompose(fft2(xs))
    spec_t = decompose(fft2(xt))
    amp = amplitude_swap(spec_s.amplitude, spec_t.amplitude, mask)
    return ifft2(compose(Spectrum(amp, spec_s.phase)), clamp=clamp)


def transfer_style(x_src: Slice, x_tgt: Slice, alpha: float) -> Slice:
    """Render ``x_src`` in the intensity style of ``x_tgt``."""
    return x_src.with_pixels(transfer_pixels(x_src, x_tgt, alpha), domain="transferred")


def offline_pairing(n_source: int, n_target: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one target index per source index, uniformly with replacement."""
    if n_target < 1:
        raise InvalidInput("target pool is empty")
    return rng.integers(0, n_target, size=n_source)
