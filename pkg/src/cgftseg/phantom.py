"""Seeded two-domain lung phantom.

Source cases mimic labelled lung-cancer slices: a single oval nodule inside one
lung. Target cases mimic unlabelled infection slices: several patchy blobs
spread over both lungs, rendered with a brighter, noisier intensity profile.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, label

from . import ct_ingest
from .errors import InvalidConfig
from .slices import LabeledSlice, Slice


@dataclass
class SourceStyle:
    background_level: float = 0.05
    lung_level: float = 0.20
    lesion_level: float = 0.55
    noise_sigma: float = 0.03
    oval_axes: tuple = (3.5, 7.5)


@dataclass
class TargetStyle:
    background_level: float = 0.40
    lung_level: float = 0.55
    lesion_level: float = 0.80
    noise_sigma: float = 0.04
    blob_count: tuple = (2, 5)
    blob_scale: tuple = (1.0, 2.0)


@dataclass
class PhantomConfig:
    size: tuple = (64, 64)
    n_source_patients: int = 12
    n_target_patients: int = 10
    slices_per_patient: int = 8
    train_frac: float = 0.7
    source_style: SourceStyle = field(default_factory=SourceStyle)
    target_style: TargetStyle = field(default_factory=TargetStyle)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.source_style, dict):
            self.source_style = SourceStyle(**self.source_style)
        if isinstance(self.target_style, dict):
            self.target_style = TargetStyle(**self.target_style)
        self.size = tuple(int(v) for v in self.size)
        h, w = self.size
        if h < 32 or w < 32 or h % 2 or w % 2:
            raise InvalidConfig(f"phantom size must be even and >= 32, got {self.size}")
        for style in (self.source_style, self.target_style):
            for name in ("background_level", "lung_level", "lesion_level"):
                if not 0.0 <= getattr(style, name) <= 1.0:
                    raise InvalidConfig(f"{name} must be in [0, 1]")
        gap = abs(self.source_style.background_level - self.target_style.background_level)
        if gap < 0.15:
            raise InvalidConfig(f"background levels must differ by >= 0.15, got {gap:.3f}")
        if self.n_source_patients < 1 or self.n_target_patients < 2 or self.slices_per_patient < 1:
            raise InvalidConfig("need >= 1 source patient, >= 2 target patients and >= 1 slice each")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def to_dict(self):
        return asdict(self)


def _grid(h, w):
    return np.meshgrid(np.arange(h), np.arange(w), indexing="ij")


def ellipse_mask(h, w, cy, cx, ay, ax, angle=0.0):
    """Filled ellipse: pixel centres with ((y', x') / axes) inside the unit circle."""
    yy, xx = _grid(h, w)
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dy + s * dx) / ay
    v = (-s * dy + c * dx) / ax
    return u * u + v * v <= 1.0


def lung_fields(h, w, rng):
    """Two jittered elliptical lung regions, returned as (left, right) boolean masks."""
    cy = h / 2 + rng.uniform(-1.5, 1.5)
    ay = h * rng.uniform(0.30, 0.36)
    ax = w * rng.uniform(0.15, 0.18)
    off = w * rng.uniform(0.21, 0.24)
    left = ellipse_mask(h, w, cy, w / 2 - off, ay, ax)
    right = ellipse_mask(h, w, cy, w / 2 + off, ay, ax)
    return left, right


def _render(h, w, lungs, lesion, style, rng):
    img = np.full((h, w), style.background_level)
    img[lungs] = style.lung_level
    img[lesion] = style.lesion_level
    img = img + rng.normal(0.0, style.noise_sigma, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def source_lesion(h, w, lung, rng, axes):
    """Oval nodule placed so that it lies entirely inside ``lung``."""
    ys, xs = np.nonzero(lung)
    for _ in range(200):
        ay, ax = rng.uniform(*axes, size=2)
        angle = rng.uniform(0, np.pi)
        k = rng.integers(len(ys))
        cand = ellipse_mask(h, w, ys[k], xs[k], ay, ax, angle)
        if cand.any() and not (cand & ~lung).any():
            return cand, (float(ys[k]), float(xs[k]), float(ay), float(ax), float(angle))
    raise RuntimeError("could not place a nodule inside the lung field")


def gen_source_case(config: PhantomConfig, case_seed: int):
    """Return (LabeledSlice, geometry) for one unilateral oval-nodule slice."""
    rng = np.random.default_rng([config.seed, 0, case_seed])
    h, w = config.size
    left, right = lung_fields(h, w, rng)
    side = left if rng.random() < 0.5 else right
    lesion, geom = source_lesion(h, w, side, rng, config.source_style.oval_axes)
    img = _render(h, w, left | right, lesion, config.source_style, rng)
    return LabeledSlice(Slice(img, domain="source"), lesion.astype(np.uint8)), geom


def _patch(h, w, lung, rng, scale):
    """One irregular blob: thresholded smoothed noise around a random lung point."""
    ys, xs = np.nonzero(lung)
    k = rng.integers(len(ys))
    field = gaussian_filter(rng.standard_normal((h, w)), scale)
    field /= field.std()
    yy, xx = _grid(h, w)
    radius = rng.uniform(2.5, 5.0) * scale
    envelope = np.exp(-((yy - ys[k]) ** 2 + (xx - xs[k]) ** 2) / (2 * radius**2))
    blob = (field + 2.5 * envelope > 2.0) & lung
    # keep only the component that contains the seed point (or the largest)
    lab, n = label(blob)
    if n == 0:
        return blob
    pick = lab[ys[k], xs[k]]
    if pick == 0:
        pick = np.argmax(np.bincount(lab.ravel())[1:]) + 1
    return lab == pick


def gen_target_case(config: PhantomConfig, case_seed: int):
    """Return a LabeledSlice with bilateral patchy lesions (mask held out downstream)."""
    rng = np.random.default_rng([config.seed, 1, case_seed])
    h, w = config.size
    st = config.target_style
    left, right = lung_fields(h, w, rng)
    count = int(rng.integers(st.blob_count[0], st.blob_count[1] + 1))
    lesion = np.zeros((h, w), dtype=bool)
    for i in range(count):
        side = left if i % 2 == 0 else right
        for _ in range(20):
            blob = _patch(h, w, side, rng, rng.uniform(*st.blob_scale))
            if blob.sum() >= 6:
                lesion |= blob
                break
    img = _render(h, w, left | right, lesion, st, rng)
    return LabeledSlice(Slice(img, domain="target"), lesion.astype(np.uint8))


def source_cases(config: PhantomConfig, n: int, offset: int = 0):
    return [gen_source_case(config, offset + i)[0] for i in range(n)]


def target_cases(config: PhantomConfig, n: int, offset: int = 0):
    return [gen_target_case(config, offset + i) for i in range(n)]


def mean_intensity_accuracy(a_slices, b_slices) -> float:
    """Best single-threshold accuracy of a mean-intensity classifier separating two sets."""
    a = np.array([np.mean(getattr(s, "pixels", s)) for s in a_slices])
    b = np.array([np.mean(getattr(s, "pixels", s)) for s in b_slices])
    vals = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    order = np.argsort(vals, kind="stable")
    lab = labels[order]
    # predicting "b" above a cut after position i, in either orientation
    ones_right = np.concatenate([[lab.sum()], lab.sum() - np.cumsum(lab)])
    zeros_left = np.concatenate([[0], np.cumsum(1 - lab)])
    correct = zeros_left + ones_right
    best = max(correct.max(), (len(lab) - correct).max())
    return float(best / len(lab))


def gen_dataset(config: PhantomConfig, out_dir) -> dict:
    """Write slices, masks and a manifest; returns the manifest dict."""
    out = Path(out_dir)
    h, w = config.size
    entries = []
    case = 0
    for p in range(config.n_source_patients):
        pid = f"src{p:03d}"
        for s in range(config.slices_per_patient):
            item, _ = gen_source_case(config, case)
            case += 1
            entries.append(ct_ingest.write_pair(out, pid, s, "source", item.image.pixels, item.mask))
    case = 0
    for p in range(config.n_target_patients):
        pid = f"tgt{p:03d}"
        for s in range(config.slices_per_patient):
            item = gen_target_case(config, case)
            case += 1
            entries.append(ct_ingest.write_pair(out, pid, s, "target", item.image.pixels, item.mask))
    manifest = ct_ingest.make_manifest(entries, (h, w))
    manifest = ct_ingest.patient_split(manifest, config.train_frac, config.seed, domain="target")
    manifest["generator"] = {"kind": "phantom", "config": config.to_dict()}
    ct_ingest.write_manifest(out / "manifest.json", manifest)
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_from_json(path) -> PhantomConfig:
    return PhantomConfig.from_dict(json.loads(Path(path).read_text()))
