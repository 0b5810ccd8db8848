"""Command-line entry point: ``cgftseg {phantom,ingest,augment,train,eval}``.

Exit codes: 0 success, 2 input/config error, 3 shape/compatibility error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, ct_ingest, elastic, evaluation, fourier_style, phantom, segnet, trainer
from .errors import CgftError, InvalidConfig, InvalidInput, MissingData, NumericalFailure

log = logging.getLogger("cgftseg")

EXIT_OK, EXIT_INPUT, EXIT_SHAPE, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_json(out_dir, command, resolved, argv):
    info = {
        "command": command,
        "argv": list(argv),
        "config": resolved,
        "build": build_id(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    Path(out_dir, "run.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingData(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: invalid JSON ({exc})") from None


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ---------------------------------------------------------------


def format_counts(counts) -> str:
    lines = [f"{'domain':<8} {'patients':>8} {'train pts':>9} {'test pts':>8} {'train sl':>8} {'test sl':>7}"]
    for dom, c in counts.items():
        lines.append(
            f"{dom:<8} {c['patients']:>8} {c['train_patients']:>9} {c['test_patients']:>8} "
            f"{c['train_slices']:>8} {c['test_slices']:>7}"
        )
    return "\n".join(lines)


def cmd_phantom(args, argv):
    data = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = phantom.PhantomConfig.from_dict(data)
    out = _out_dir(args, "phantom_data")
    manifest = phantom.gen_dataset(cfg, out)
    print(format_counts(manifest["counts"]))
    write_run_json(out, "phantom", cfg.to_dict(), argv)
    return EXIT_OK


def cmd_ingest(args, argv):
    sidecars = []
    for item in args.volumes:
        p = Path(item)
        sidecars += sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not sidecars:
        raise MissingData("no volume sidecars given")
    out = _out_dir(args, "ingested")
    size = tuple(args.size) if args.size else None
    manifest = ct_ingest.ingest_volumes(
        sidecars, out, args.domain, size=size, lo=args.hu_lo, hi=args.hu_hi,
        min_pixels=args.min_pixels, train_frac=args.train_frac, seed=args.seed or 0,
    )
    print(format_counts(manifest["counts"]))
    write_run_json(out, "ingest", vars(args) | {"volumes": [str(s) for s in sidecars]}, argv)
    return EXIT_OK


def _read_image(path):
    if not Path(path).exists():
        raise MissingData(f"image not found: {path}")
    data, maxval = ct_ingest.read_pgm(path)
    return data / float(maxval), maxval


def cmd_augment(args, argv):
    src, maxval = _read_image(args.source)
    if args.elastic:
        seed, sigma, magnitude = args.elastic
        params = elastic.ElasticParams(float(sigma), float(magnitude), int(seed))
        out = elastic.warp(src, elastic.make_displacement(*src.shape, params), "bilinear")
    else:
        if not args.target:
            raise UsageError("augment needs a target image unless --elastic is given")
        tgt, _ = _read_image(args.target)
        if src.shape != tgt.shape:
            raise InvalidInput(f"source {src.shape} and target {tgt.shape} sizes differ")
        out = fourier_style.transfer_pixels(src, tgt, args.alpha)
    ct_ingest.write_pgm(args.output, np.rint(np.clip(out, 0, 1) * maxval), maxval)
    return EXIT_OK


def resolve_train_config(args) -> trainer.TrainConfig:
    data = _load_json(args.config) if args.config else {}
    cfg = trainer.TrainConfig.from_dict(data)
    if args.ablation:
        cfg.ablation = trainer.Ablation.named(args.ablation)
    if args.seed is not None:
        cfg.seeds = trainer.Seeds(args.seed, args.seed, args.seed)
    if args.manifest:
        cfg.manifest = str(args.manifest)
    if args.epochs:
        cfg.epochs = args.epochs
    if not cfg.manifest:
        raise InvalidConfig("no dataset manifest given (config key 'manifest' or --manifest)")
    return cfg


def cmd_train(args, argv):
    cfg = resolve_train_config(args)
    manifest_path = Path(cfg.manifest)
    if args.config and not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = Path(args.config).parent / manifest_path
    manifest = ct_ingest.read_manifest(manifest_path)
    src, tgt = ct_ingest.training_data(manifest)
    out = _out_dir(args, "run")
    last = {}

    def remember(state, row):
        last.update(row)

    try:
        result = trainer.train(cfg, src, tgt, on_step=remember)
    except NumericalFailure as exc:
        print(f"error: {exc}; last good step {last.get('step', 0)}", file=sys.stderr)
        return EXIT_NUMERIC
    trainer.save_run(result, out)
    write_run_json(out, "train", cfg.to_dict(), argv)
    return EXIT_OK


def cmd_eval(args, argv):
    params, header = segnet.load_checkpoint(args.checkpoint)
    manifest = ct_ingest.read_manifest(args.manifest)
    if tuple(manifest["size"]) != params.config.input_size:
        raise InvalidInput(
            f"checkpoint expects {params.config.input_size} slices, manifest has {tuple(manifest['size'])}"
        )
    pairs = ct_ingest.test_data(manifest, "target")
    if not pairs:
        raise MissingData("manifest has no target test slices")
    out = _out_dir(args, "eval")
    if args.gt_as_pred:
        from . import metrics

        report = metrics.build_report([p.image.slice_id for p in pairs], [p.mask for p in pairs], [p.mask for p in pairs])
    else:
        report = evaluation.evaluate(params, pairs, args.threshold, args.threads)
    report.to_json(out / "report.json")
    report.write_per_slice_csv(out / "per_slice.csv")
    report.write_boxplot_csv(out / "boxplot.csv")
    if report.boxplot:
        evaluation.boxplot_svg(out / "boxplot.svg", report.boxplot)
    sources = [e for e in manifest["entries"] if e["domain"] == "source" and e["split"] == "train"]
    if len(sources) >= 2 and len(pairs) >= 2:
        sep, za, zb = evaluation.feature_separation(
            params, [ct_ingest.load_image(manifest, e) for e in sources], [p.image for p in pairs]
        )
        evaluation.scatter_svg(out / "features.svg", {"source": za, "target": zb})
        with open(out / "features.csv", "w") as fh:
            fh.write("domain,x,y\n")
            for dom, pts in (("source", za), ("target", zb)):
                for x, y in pts:
                    fh.write(f"{dom},{x!r},{y!r}\n")
        Path(out / "separation.json").write_text(json.dumps({"separation": sep}) + "\n")
    for m, agg in report.aggregate.items():
        print(f"{m}: {agg['mean']:.4f} +- {agg['ci95_half_width']:.4f}")
    write_run_json(out, "eval", {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                                 "step": header["step"], "threshold": args.threshold}, argv)
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-slice work")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cgftseg", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="generate the synthetic two-domain dataset")

    p = sub.add_parser("ingest", parents=[common], help="window, slice and index raw CT volumes")
    p.add_argument("volumes", nargs="+", help="sidecar JSON files or directories containing them")
    p.add_argument("--domain", choices=("source", "target"), required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--hu-lo", type=float, default=ct_ingest.HU_LO)
    p.add_argument("--hu-hi", type=float, default=ct_ingest.HU_HI)
    p.add_argument("--min-pixels", type=int, default=200)
    p.add_argument("--train-frac", type=float, default=0.7)

    p = sub.add_parser("augment", parents=[common], help="style-transfer or elastically warp one image")
    p.add_argument("source")
    p.add_argument("target", nargs="?")
    p.add_argument("output")
    p.add_argument("--alpha", type=float, default=0.005)
    p.add_argument("--elastic", nargs=3, metavar=("SEED", "SIGMA", "MAGNITUDE"))

    p = sub.add_parser("train", parents=[common], help="train student and teacher networks")
    p.add_argument("--manifest")
    p.add_argument("--ablation", choices=sorted(trainer.ABLATIONS))
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the target test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--gt-as-pred", action="store_true", help="debug: score ground truth against itself")
    return parser


COMMANDS = {
    "phantom": cmd_phantom,
    "ingest": cmd_ingest,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CgftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
