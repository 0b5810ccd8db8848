"""Model evaluation, feature projection and SVG report figures."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, segnet


def predict_masks(params, images, threshold=0.5, threads=1):
    def one(img):
        return metrics.binarize(segnet.predict(params, img), threshold)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, images))
    return [one(img) for img in images]


def evaluate(params, pairs, threshold=0.5, threads=1) -> metrics.MetricReport:
    preds = predict_masks(params, [p.image for p in pairs], threshold, threads)
    return metrics.build_report([p.image.slice_id for p in pairs], preds, [p.mask for p in pairs])


def mean_dice(params, pairs) -> float:
    return float(np.mean(evaluate(params, pairs).column("dice")))


def principal_directions(x, k=2, iters=500, seed=0):
    """Top-``k`` principal axes of centred rows of ``x`` by power iteration with deflation."""
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    rng = np.random.default_rng(seed)
    axes = []
    for _ in range(k):
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = cov @ v
            for a in axes:
                w -= (w @ a) * a
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            if np.abs(w - v).max() < 1e-12:
                v = w
                break
            v = w
        # fix the sign so the projection is reproducible
        j = np.argmax(np.abs(v))
        axes.append(v if v[j] >= 0 else -v)
    return np.array(axes)


def project_2d(features_a, features_b):
    """Project two feature sets onto the top-2 principal axes of their union."""
    x = np.vstack([features_a, features_b])
    axes = principal_directions(x)
    z = (x - x.mean(axis=0)) @ axes.T
    return z[: len(features_a)], z[len(features_a) :]


def domain_separation(za, zb) -> float:
    """Centroid distance between two point clouds divided by their pooled RMS spread."""
    ca, cb = za.mean(axis=0), zb.mean(axis=0)
    spread_a = np.mean(np.sum((za - ca) ** 2, axis=1))
    spread_b = np.mean(np.sum((zb - cb) ** 2, axis=1))
    pooled = np.sqrt((len(za) * spread_a + len(zb) * spread_b) / (len(za) + len(zb)))
    if pooled == 0:
        return float("inf") if np.any(ca != cb) else 0.0
    return float(np.linalg.norm(ca - cb) / pooled)


def feature_separation(params, source_images, target_images):
    fa = np.array([segnet.extract_features(params, s) for s in source_images])
    fb = np.array([segnet.extract_features(params, s) for s in target_images])
    za, zb = project_2d(fa, fb)
    return domain_separation(za, zb), za, zb


# --- SVG ---------------------------------------------------------------------


def _svg(width, height, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def boxplot_svg(path, boxes: dict):
    """Draw one box per metric on a shared [0, 1] axis."""
    w, h, pad = 120 * max(len(boxes), 1) + 60, 320, 40

    def y(v):
        return pad + (1 - v) * (h - 2 * pad)

    body = [f'<line x1="{pad}" y1="{y(0):.1f}" x2="{pad}" y2="{y(1):.1f}" stroke="black"/>']
    for t in np.linspace(0, 1, 6):
        body.append(f'<text x="{pad - 6}" y="{y(t) + 4:.1f}" font-size="10" text-anchor="end">{t:.1f}</text>')
    for i, (name, b) in enumerate(boxes.items()):
        cx = pad + 60 + 120 * i
        body += [
            f'<line x1="{cx}" y1="{y(b["whisker_lo"]):.1f}" x2="{cx}" y2="{y(b["whisker_hi"]):.1f}" stroke="black"/>',
            f'<rect x="{cx - 25}" y="{y(b["q3"]):.1f}" width="50" height="{y(b["q1"]) - y(b["q3"]):.1f}" '
            f'fill="#8fb7d9" stroke="black"/>',
            f'<line x1="{cx - 25}" y1="{y(b["median"]):.1f}" x2="{cx + 25}" y2="{y(b["median"]):.1f}" stroke="black" stroke-width="2"/>',
            f'<text x="{cx}" y="{h - 12}" font-size="12" text-anchor="middle">{name}</text>',
        ]
        for o in b["outliers"]:
            body.append(f'<circle cx="{cx}" cy="{y(o):.1f}" r="3" fill="none" stroke="black"/>')
    Path(path).write_text(_svg(w, h, body))


def scatter_svg(path, groups: dict, colors=("#1f77b4", "#d62728")):
    """Scatter of named 2-D point sets, auto-scaled to a square canvas."""
    size, pad = 360, 30
    allpts = np.vstack([g for g in groups.values() if len(g)])
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    body = []
    for (name, pts), color in zip(groups.items(), colors):
        for px, py in (pts - lo) / span:
            body.append(
                f'<circle cx="{pad + px * (size - 2 * pad):.1f}" cy="{size - pad - py * (size - 2 * pad):.1f}" '
                f'r="3" fill="{color}" fill-opacity="0.6"/>'
            )
    for i, (name, color) in enumerate(zip(groups, colors)):
        body.append(f'<text x="{pad}" y="{16 + 14 * i}" font-size="12" fill="{color}">{name}</text>')
    Path(path).write_text(_svg(size, size, body))
