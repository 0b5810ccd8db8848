import math

import numpy as np
import pytest
from scipy.ndimage import label

from cgftseg import ct_ingest, phantom
from cgftseg.errors import HeldOutAccess, InvalidConfig
from cgftseg.fourier_style import transfer_style

CFG = phantom.PhantomConfig()


def conic_oracle(h, w, cy, cx, ay, ax, angle):
    """Rasterize via the expanded quadratic form, one pixel at a time."""
    c, s = math.cos(angle), math.sin(angle)
    a = c * c / ay**2 + s * s / ax**2
    b = 2 * c * s * (1 / ay**2 - 1 / ax**2)
    d = s * s / ay**2 + c * c / ax**2
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for col in range(w):
            y, x = r - cy, col - cx
            out[r, col] = a * y * y + b * y * x + d * x * x <= 1.0 + 1e-12
    return out


@pytest.mark.parametrize("case", range(6))
def test_source_mask_matches_rasterization_oracle(case):
    item, geom = phantom.gen_source_case(CFG, case)
    oracle = conic_oracle(64, 64, *geom)
    assert int(item.mask.sum()) == int(oracle.sum())
    np.testing.assert_array_equal(item.mask.astype(bool), oracle)


def test_source_lesion_is_single_unilateral_component():
    for case in range(20):
        item, _ = phantom.gen_source_case(CFG, case)
        lab, n = label(item.mask)
        assert n == 1
        cols = np.nonzero(item.mask)[1]
        assert cols.max() < 32 or cols.min() >= 32


def test_target_has_lesions_in_both_lungs():
    for case in range(20):
        m = phantom.gen_target_case(CFG, case).mask
        assert m[:, :32].any() and m[:, 32:].any()
        assert 2 <= label(m)[1]


def test_lesion_brighter_than_lung_by_construction():
    for style in (CFG.source_style, CFG.target_style):
        assert style.lesion_level > style.lung_level > style.background_level


def test_cases_are_deterministic():
    a, _ = phantom.gen_source_case(CFG, 3)
    b, _ = phantom.gen_source_case(CFG, 3)
    assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
    t1, t2 = phantom.gen_target_case(CFG, 3), phantom.gen_target_case(CFG, 3)
    assert t1.image.pixels.tobytes() == t2.image.pixels.tobytes()
    other = phantom.gen_source_case(phantom.PhantomConfig(seed=1), 3)[0]
    assert other.image.pixels.tobytes() != a.image.pixels.tobytes()


def test_masks_binary_and_nonempty():
    for item in phantom.source_cases(CFG, 10) + phantom.target_cases(CFG, 10):
        assert set(np.unique(item.mask)) == {0, 1}


def test_domain_gap_and_closure():
    src = [s.image for s in phantom.source_cases(CFG, 100)]
    tgt = [t.image for t in phantom.target_cases(CFG, 100)]
    gap = abs(np.mean([s.pixels.mean() for s in src]) - np.mean([t.pixels.mean() for t in tgt]))
    assert gap >= 0.1
    assert phantom.mean_intensity_accuracy(src, tgt) >= 0.95
    partners = np.random.default_rng(0).integers(0, 100, size=100)
    moved = [transfer_style(s, tgt[j], 0.005) for s, j in zip(src, partners)]
    assert phantom.mean_intensity_accuracy(moved, tgt) < 0.65


def test_classifier_oracle():
    a = [np.full((8, 8), v) for v in (0.1, 0.2, 0.3)]
    b = [np.full((8, 8), v) for v in (0.25, 0.4, 0.5)]
    # best cut between 0.2 and 0.25 misclassifies only 0.3
    assert phantom.mean_intensity_accuracy(a, b) == pytest.approx(5 / 6)
    assert phantom.mean_intensity_accuracy(b, a) == pytest.approx(5 / 6)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        phantom.PhantomConfig(target_style={"background_level": 0.15})
    with pytest.raises(InvalidConfig):
        phantom.PhantomConfig(size=(30, 30))
    with pytest.raises(InvalidConfig):
        phantom.PhantomConfig.from_dict({"bogus": 1})


def test_dataset_counts_regeneration_and_guard(tmp_path):
    cfg = phantom.PhantomConfig(n_source_patients=2, n_target_patients=4, slices_per_patient=3)
    m1 = phantom.gen_dataset(cfg, tmp_path / "a")
    m2 = phantom.gen_dataset(cfg, tmp_path / "b")
    c = m1["counts"]
    assert c["source"]["slices"] == 6 and c["source"]["patients"] == 2
    assert c["target"]["slices"] == 12 and c["target"]["patients"] == 4
    assert c["target"]["train_patients"] + c["target"]["test_patients"] == 4
    assert c["target"]["train_patients"] == 3  # 3 of 4 equal patients first reach 70%
    for e in m1["entries"]:
        for key in ("slice_path", "mask_path"):
            assert phantom.file_digest(tmp_path / "a" / e[key]) == phantom.file_digest(tmp_path / "b" / e[key])
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert m1 == m2

    manifest = ct_ingest.read_manifest(tmp_path / "a" / "manifest.json")
    target_train = [e for e in manifest["entries"] if e["domain"] == "target" and e["split"] == "train"]
    with pytest.raises(HeldOutAccess):
        ct_ingest.load_mask(manifest, target_train[0], for_training=True)
    src, tgt = ct_ingest.training_data(manifest)
    assert len(src) == 6 and len(tgt) == 9
