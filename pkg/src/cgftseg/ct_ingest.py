"""CT preprocessing and the on-disk dataset layout.

Volumes are raw little-endian int16 files next to a JSON sidecar
``{"dims": [D, H, W], "spacing": [sz, sy, sx], "patient_id": str}``. An
optional ``<stem>.mask.raw`` (uint8, same dims) carries lesion labels.
Slices are written as 16-bit PGM, masks as 8-bit PGM (0 / 255), and a
``manifest.json`` indexes everything with a patient-level train/test split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import label

from .errors import HeldOutAccess, InvalidConfig, InvalidInput, MissingData
from .slices import LabeledSlice, Slice

HU_LO = -600.0
HU_HI = 1500.0
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class Volume:
    voxels: np.ndarray
    patient_id: str
    spacing: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None


def read_volume(sidecar) -> Volume:
    sidecar = Path(sidecar)
    try:
        meta = json.loads(sidecar.read_text())
        dims = [int(d) for d in meta["dims"]]
        pid = str(meta["patient_id"])
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidInput(f"{sidecar}: bad sidecar ({exc})") from None
    if len(dims) != 3 or dims[0] < 1:
        raise InvalidInput(f"{sidecar}: dims must be [D>=1, H, W]")
    raw = sidecar.with_suffix(".raw")
    vox = np.fromfile(raw, dtype="<i2")
    if vox.size != np.prod(dims):
        raise InvalidInput(f"{raw}: expected {np.prod(dims)} voxels, found {vox.size}")
    mask = None
    mpath = sidecar.with_suffix(".mask.raw")
    if mpath.exists():
        mask = np.fromfile(mpath, dtype=np.uint8)
        if mask.size != vox.size:
            raise InvalidInput(f"{mpath}: size does not match the volume")
        mask = (mask.reshape(dims) > 0).astype(np.uint8)
    return Volume(vox.reshape(dims).astype(np.int16), pid, tuple(meta.get("spacing", (1, 1, 1))), mask)


def write_volume(sidecar, volume: Volume):
    sidecar = Path(sidecar)
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    meta = {"dims": list(volume.voxels.shape), "spacing": list(volume.spacing), "patient_id": volume.patient_id}
    sidecar.write_text(json.dumps(meta, sort_keys=True))
    volume.voxels.astype("<i2").tofile(sidecar.with_suffix(".raw"))
    if volume.mask is not None:
        volume.mask.astype(np.uint8).tofile(sidecar.with_suffix(".mask.raw"))


def hu_window(voxels, lo: float = HU_LO, hi: float = HU_HI) -> np.ndarray:
    if lo >= hi:
        raise InvalidConfig(f"window lower bound {lo} must be below upper bound {hi}")
    v = np.asarray(voxels, dtype=np.float64)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def hu_unwindow(x, lo: float = HU_LO, hi: float = HU_HI) -> np.ndarray:
    return lo + np.asarray(x, dtype=np.float64) * (hi - lo)


def fit_to_size(plane, size=None):
    """Centre crop/zero-pad a 2-D plane to ``size``; with no size, trim odd dims by one."""
    a = np.asarray(plane)
    if size is None:
        size = (a.shape[0] - a.shape[0] % 2, a.shape[1] - a.shape[1] % 2)
    out = np.zeros(size, dtype=a.dtype)
    src, dst = [], []
    for n_in, n_out in zip(a.shape, size):
        if n_in >= n_out:
            start = (n_in - n_out) // 2
            src.append(slice(start, start + n_out))
            dst.append(slice(0, n_out))
        else:
            start = (n_out - n_in) // 2
            src.append(slice(0, n_in))
            dst.append(slice(start, start + n_in))
    out[tuple(dst)] = a[tuple(src)]
    return out


def volume_to_slices(windowed, patient_id="", size=None, domain="source"):
    """Axial slices of an already-windowed D x H x W array, in index order."""
    w = np.asarray(windowed, dtype=np.float64)
    return [Slice(fit_to_size(w[d], size), patient_id, d, domain) for d in range(w.shape[0])]


def component_sizes(mask) -> np.ndarray:
    lab, n = label(np.asarray(mask) > 0, structure=FOUR_CONNECTED)
    return np.bincount(lab.ravel(), minlength=n + 1)[1:]


def filter_small_lesions(pairs, min_pixels: int = 200):
    """Keep pairs whose every 4-connected lesion component has >= ``min_pixels`` pixels."""
    kept = []
    for pair in pairs:
        mask = pair.mask if isinstance(pair, LabeledSlice) else pair[1]
        sizes = component_sizes(mask)
        if sizes.size and sizes.min() >= min_pixels:
            kept.append(pair)
    return kept


# --- image files -------------------------------------------------------------


def write_pgm(path, data, maxval):
    arr = np.asarray(data)
    h, w = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + arr.astype(dtype).tobytes())


def read_pgm(path):
    """Return ``(array, maxval)`` for a binary (P5) graymap."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise InvalidInput(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos + 1 :], dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(np.int64), maxval


def save_slice_image(path, pixels):
    write_pgm(path, np.rint(np.clip(pixels, 0, 1) * 65535), 65535)


def load_slice_image(path) -> np.ndarray:
    data, maxval = read_pgm(path)
    return data / float(maxval)


def save_mask_image(path, mask):
    write_pgm(path, (np.asarray(mask) > 0) * 255, 255)


def load_mask_image(path) -> np.ndarray:
    data, _ = read_pgm(path)
    return (data > 0).astype(np.uint8)


# --- manifest ----------------------------------------------------------------


def write_pair(out_dir, patient_id, index, domain, pixels, mask=None) -> dict:
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    stem = f"{domain}_{patient_id}_{index:04d}"
    entry = {
        "patient_id": patient_id,
        "slice_index": int(index),
        "domain": domain,
        "slice_path": f"slices/{stem}.pgm",
        "mask_path": None,
        "split": "train",
        "mask_held_out": domain == "target",
    }
    save_slice_image(out / entry["slice_path"], pixels)
    if mask is not None:
        (out / "masks").mkdir(parents=True, exist_ok=True)
        entry["mask_path"] = f"masks/{stem}.pgm"
        save_mask_image(out / entry["mask_path"], mask)
    return entry


def make_manifest(entries, size) -> dict:
    return {"format": 1, "size": list(size), "entries": list(entries), "counts": summarize(entries)}


def summarize(entries) -> dict:
    """Dataset organisation table: patients and slices per domain and split."""
    counts = {}
    for dom in sorted({e["domain"] for e in entries}):
        rows = [e for e in entries if e["domain"] == dom]
        row = {"patients": len({e["patient_id"] for e in rows}), "slices": len(rows)}
        for split in ("train", "test"):
            part = [e for e in rows if e["split"] == split]
            row[f"{split}_patients"] = len({e["patient_id"] for e in part})
            row[f"{split}_slices"] = len(part)
        counts[dom] = row
    return counts


def patient_split(manifest: dict, train_frac: float = 0.7, seed: int = 0, domain=None) -> dict:
    """Assign whole patients to train until the slice fraction first reaches ``train_frac``.

    Only entries of ``domain`` are re-split when given; others are left as they are.
    """
    if not 0.0 < train_frac <= 1.0:
        raise InvalidConfig(f"train_frac must be in (0, 1], got {train_frac}")
    entries = [dict(e) for e in manifest["entries"]]
    chosen = [e for e in entries if domain is None or e["domain"] == domain]
    patients = sorted({e["patient_id"] for e in chosen})
    if len(patients) < 2:
        raise InvalidConfig("patient split needs at least 2 patients")
    per_patient = {p: sum(e["patient_id"] == p for e in chosen) for p in patients}
    order = np.random.default_rng(seed).permutation(len(patients))
    total = len(chosen)
    train, cum = set(), 0
    for i in order:
        if cum / total >= train_frac - 1e-12:
            break
        train.add(patients[i])
        cum += per_patient[patients[i]]
    for e in chosen:
        e["split"] = "train" if e["patient_id"] in train else "test"
    out = dict(manifest, entries=entries)
    out["counts"] = summarize(entries)
    return out


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise MissingData(f"{path}: cannot read manifest ({exc})") from None
    manifest["_root"] = str(path.parent)
    return manifest


def _root(manifest):
    return Path(manifest.get("_root", "."))


def load_image(manifest, entry) -> Slice:
    path = _root(manifest) / entry["slice_path"]
    if not path.exists():
        raise MissingData(f"missing slice file {path}")
    px = load_slice_image(path)
    return Slice(px, entry["patient_id"], entry["slice_index"], entry["domain"])


def load_mask(manifest, entry, for_training: bool) -> np.ndarray:
    if for_training and entry.get("mask_held_out", False):
        raise HeldOutAccess(f"mask of {entry['patient_id']}/{entry['slice_index']} is held out from training")
    if not entry.get("mask_path"):
        raise MissingData(f"no mask recorded for {entry['patient_id']}/{entry['slice_index']}")
    path = _root(manifest) / entry["mask_path"]
    if not path.exists():
        raise MissingData(f"missing mask file {path}")
    return load_mask_image(path)


def training_data(manifest):
    """Labelled source pairs and unlabelled target-train slices. Target masks are never read."""
    src, tgt = [], []
    for e in manifest["entries"]:
        if e["split"] != "train":
            continue
        if e["domain"] == "source":
            src.append(LabeledSlice(load_image(manifest, e), load_mask(manifest, e, for_training=True)))
        elif e["domain"] == "target":
            tgt.append(load_image(manifest, e))
    return src, tgt


def test_data(manifest, domain="target"):
    return [
        LabeledSlice(load_image(manifest, e), load_mask(manifest, e, for_training=False))
        for e in manifest["entries"]
        if e["domain"] == domain and e["split"] == "test"
    ]


def ingest_volumes(sidecars, out_dir, domain, size=None, lo=HU_LO, hi=HU_HI,
                   min_pixels=200, train_frac=0.7, seed=0) -> dict:
    """Window, slice and index a set of volumes into a manifest under ``out_dir``."""
    entries = []
    shape = None
    for sc in sidecars:
        vol = read_volume(sc)
        slices = volume_to_slices(hu_window(vol.voxels, lo, hi), vol.patient_id, size, domain)
        masks = [None] * len(slices) if vol.mask is None else [fit_to_size(m, slices[0].shape) for m in vol.mask]
        if domain == "source":
            if vol.mask is None:
                raise InvalidInput(f"{sc}: source volumes need a mask")
            pairs = filter_small_lesions([LabeledSlice(s, m) for s, m in zip(slices, masks)], min_pixels)
            items = [(p.image, p.mask) for p in pairs]
        else:
            items = list(zip(slices, masks))
        for s, m in items:
            shape = s.shape
            entries.append(write_pair(out_dir, s.patient_id, s.slice_index, domain, s.pixels, m))
    if not entries:
        raise MissingData("no slices survived ingestion")
    manifest = make_manifest(entries, shape)
    if domain == "target":
        manifest = patient_split(manifest, train_frac, seed, domain="target")
    write_manifest(Path(out_dir) / "manifest.json", manifest)
    return manifest
