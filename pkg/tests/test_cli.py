import csv
import hashlib
import json
import time

import numpy as np
import pytest

from cgftseg import cli, ct_ingest, fourier_style, metrics, segnet, trainer

SMALL_PHANTOM = {"size": [48, 48], "n_source_patients": 2, "n_target_patients": 5, "slices_per_patient": 4}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = write_json(root / "phantom.json", SMALL_PHANTOM)
    assert cli.main(["phantom", "--config", cfg, "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def small_run(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_json(out / "train.json", {"epochs": 2, "depth": 2, "base_channels": 4})
    args = ["train", "--config", cfg, "--manifest", str(small_data / "manifest.json"), "--out", str(out / "a")]
    assert cli.main(args) == 0
    return out


def test_phantom_default_and_rerun_hash(tmp_path, capsys):
    assert cli.main(["phantom", "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    table = capsys.readouterr().out
    assert "source" in table and "target" in table
    assert cli.main(["phantom", "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    assert sha(tmp_path / "a" / "manifest.json") == sha(tmp_path / "b" / "manifest.json")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["counts"]["source"]["slices"] == 12 * 8
    assert manifest["counts"]["target"]["slices"] == 10 * 8
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["config"]["seed"] == 4 and run["build"]


def test_invalid_json_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["phantom", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["phantom", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["frobnicate"]) == 2


def _gray(path, arr, maxval=255):
    ct_ingest.write_pgm(path, np.rint(arr * maxval), maxval)
    return str(path)


def test_augment_self_transfer_within_quantisation(tmp_path):
    img = np.random.default_rng(0).uniform(0.1, 0.9, (16, 16))
    src = _gray(tmp_path / "a.pgm", img)
    assert cli.main(["augment", src, src, str(tmp_path / "o.pgm")]) == 0
    a, _ = ct_ingest.read_pgm(src)
    o, _ = ct_ingest.read_pgm(tmp_path / "o.pgm")
    assert np.abs(a - o).max() <= 1


def test_augment_half_alpha_takes_target_amplitude(tmp_path):
    rng = np.random.default_rng(1)
    src = _gray(tmp_path / "s.pgm", rng.uniform(0.3, 0.6, (16, 16)), 65535)
    tgt = _gray(tmp_path / "t.pgm", rng.uniform(0.3, 0.6, (16, 16)), 65535)
    assert cli.main(["augment", src, tgt, str(tmp_path / "o.pgm"), "--alpha", "0.5"]) == 0
    out = ct_ingest.load_slice_image(tmp_path / "o.pgm")
    t = ct_ingest.load_slice_image(tgt)
    # residual error is 16-bit quantisation spread over the spectrum
    assert np.abs(np.abs(fourier_style.fft2(out)) - np.abs(fourier_style.fft2(t))).max() < 256 / 65535


def test_augment_errors(tmp_path):
    a = _gray(tmp_path / "a.pgm", np.full((16, 16), 0.5))
    b = _gray(tmp_path / "b.pgm", np.full((16, 8), 0.5))
    assert cli.main(["augment", a, b, str(tmp_path / "o.pgm")]) == 3
    assert cli.main(["augment", a, str(tmp_path / "nope.pgm"), str(tmp_path / "o.pgm")]) == 2
    assert cli.main(["augment", a, str(tmp_path / "o.pgm")]) == 2


def test_augment_elastic(tmp_path):
    img = np.random.default_rng(2).uniform(0.2, 0.8, (16, 16))
    a = _gray(tmp_path / "a.pgm", img)
    for name in ("x.pgm", "y.pgm"):
        assert cli.main(["augment", a, str(tmp_path / name), "--elastic", "7", "2.0", "1.0"]) == 0
    assert (tmp_path / "x.pgm").read_bytes() == (tmp_path / "y.pgm").read_bytes()
    assert cli.main(["augment", a, str(tmp_path / "z.pgm"), "--elastic", "7", "2.0", "9.0"]) == 2


def test_train_identical_seeds_identical_hashes(small_data, small_run):
    cfg = str(small_run / "train.json")
    args = ["train", "--config", cfg, "--manifest", str(small_data / "manifest.json"), "--out", str(small_run / "b")]
    assert cli.main(args) == 0
    for name in ("train_log.csv", "student.ckpt", "teacher.ckpt"):
        assert sha(small_run / "a" / name) == sha(small_run / "b" / name)
    run = json.loads((small_run / "a" / "run.json").read_text())
    assert run["config"]["epochs"] == 2


def test_train_source_only_matches_library_baseline(small_data, tmp_path):
    cfg = write_json(tmp_path / "c.json", {"epochs": 1, "depth": 2, "base_channels": 4})
    args = ["train", "--config", cfg, "--manifest", str(small_data / "manifest.json"),
            "--ablation", "source-only", "--seed", "5", "--out", str(tmp_path / "r")]
    assert cli.main(args) == 0
    src, tgt = ct_ingest.training_data(ct_ingest.read_manifest(small_data / "manifest.json"))
    ref = trainer.train(
        trainer.TrainConfig(epochs=1, depth=2, base_channels=4, ablation=trainer.Ablation.named("source-only"),
                            seeds=trainer.Seeds(5, 5, 5)),
        src, tgt,
    )
    student, _ = segnet.load_checkpoint(tmp_path / "r" / "student.ckpt")
    assert student.equal(ref.student)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_4(small_data, tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"epochs": 1, "depth": 2, "base_channels": 4, "lr": 1e200})
    args = ["train", "--config", cfg, "--manifest", str(small_data / "manifest.json"), "--out", str(tmp_path)]
    assert cli.main(args) == 4
    assert "last good step" in capsys.readouterr().err


def test_train_without_manifest_exits_2(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path)]) == 2


def test_eval_gt_as_pred_and_recompute(small_data, small_run, tmp_path):
    ckpt = str(small_run / "a" / "student.ckpt")
    manifest = str(small_data / "manifest.json")
    assert cli.main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--gt-as-pred", "--out", str(tmp_path / "gt")]) == 0
    report = json.loads((tmp_path / "gt" / "report.json").read_text())
    assert all(row["dice"] == 1.0 for row in report["per_slice"])

    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", str(out), "--threads", "2"]) == 0
    report = json.loads((out / "report.json").read_text())
    rows = metrics.read_per_slice_csv(out / "per_slice.csv")
    for m in metrics.METRICS:
        col = [r[m] for r in rows]
        mean, half = metrics.aggregate(col)
        assert report["aggregate"][m] == {"mean": mean, "ci95_half_width": half}
    for name in ("boxplot.csv", "boxplot.svg", "features.svg", "features.csv", "separation.json"):
        assert (out / name).exists()
    with open(out / "boxplot.csv") as fh:
        assert [r["metric"] for r in csv.DictReader(fh)] == list(metrics.METRICS)
    again = tmp_path / "ev2"
    assert cli.main(["eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", str(again)]) == 0
    for name in ("report.json", "per_slice.csv", "features.csv", "boxplot.svg"):
        assert sha(out / name) == sha(again / name)


def test_eval_errors(small_data, tmp_path):
    manifest = small_data / "manifest.json"
    wrong = segnet.init_params(segnet.NetConfig(2, 4, (32, 32)), 0)
    segnet.save_checkpoint(tmp_path / "w.ckpt", wrong, 0)
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "w.ckpt"), "--manifest", str(manifest), "--out", str(tmp_path)]) == 3

    good = segnet.init_params(segnet.NetConfig(2, 4, (48, 48)), 0)
    segnet.save_checkpoint(tmp_path / "g.ckpt", good, 0)
    data = json.loads(manifest.read_text())
    victim = next(e for e in data["entries"] if e["domain"] == "target" and e["split"] == "test")
    victim["mask_path"] = "masks/absent.pgm"
    broken = tmp_path / "m" / "manifest.json"
    broken.parent.mkdir()
    broken.write_text(json.dumps(data))
    for key in ("slices", "masks"):
        (broken.parent / key).symlink_to(small_data / key)
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "g.ckpt"), "--manifest", str(broken), "--out", str(tmp_path)]) == 2


def test_train_smoke_default_phantom(tmp_path):
    assert cli.main(["phantom", "--out", str(tmp_path / "data")]) == 0
    start = time.perf_counter()
    rc = cli.main(["train", "--manifest", str(tmp_path / "data" / "manifest.json"), "--epochs", "5",
                   "--out", str(tmp_path / "run")])
    elapsed = time.perf_counter() - start
    assert rc == 0
    assert elapsed < 180
    log = trainer.read_log(tmp_path / "run" / "train_log.csv")
    assert log[-1]["epoch"] == 4 and log[-1]["lambda"] == 1.5
