"""Command line entry point: ``flowmend <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .dataset import DatasetError, PairStrategy, SynthConfig, enumerate_pairs, save_sequences, synth_dataset
from .flow_core import (
    FlowError, FlowParams, ResizeSpec, estimate_flow, flow_to_rgb, load_image, resize_flow, save_image, save_rgb,
    write_flo,
)
from .harness import (
    ABLATION_AXES, Experiment, ExperimentManifest, benchmark_manifest, emit_report, fmt, read_report,
    run_size_sweep,
)
from .nn import CheckpointError
from .occlusion import EyeAnchors, MaskKind, OcclusionError, OcclusionMask, apply_occlusion, crop_face
from .reconstructor import ConfigError, train_reconstructor

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("flowmend")


def _manifest(args) -> ExperimentManifest:
    if args.config in (None, "benchmark"):
        m = benchmark_manifest()
    elif not Path(args.config).is_file():
        raise ConfigError(f"config file {args.config} not found")
    else:
        m = ExperimentManifest.load(args.config)
    if args.seed is not None:
        m = m.with_seed(args.seed)
    return m


def _out_dir(args, default="flowmend-out") -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _flow_params(args) -> FlowParams:
    if not args.config:
        return FlowParams()
    if not Path(args.config).is_file():
        raise ConfigError(f"config file {args.config} not found")
    try:
        data = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    data = data.get("flow", data)
    try:
        return FlowParams(**data)
    except (TypeError, FlowError) as exc:
        raise ConfigError(f"invalid flow parameters: {exc}") from exc


def _mask(spec: str) -> OcclusionMask:
    if spec in {k.value for k in MaskKind} - {"custom"}:
        return OcclusionMask.preset(spec)
    try:
        return OcclusionMask.load(spec)
    except FileNotFoundError:
        raise ConfigError(f"mask {spec!r} is neither a preset nor a readable mask file") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid mask file {spec}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands

def cmd_flow(args):
    params = _flow_params(args)
    flow = estimate_flow(load_image(args.prev), load_image(args.next), params)
    if args.size:
        flow = resize_flow(flow, ResizeSpec(flow.width, flow.height, args.size, args.size))
    out = _out_dir(args, ".")
    write_flo(flow, out / args.name)
    if args.hsv:
        save_rgb(flow_to_rgb(flow), out / args.hsv)
    print(f"{out / args.name}: {flow.width}x{flow.height}")


def cmd_occlude(args):
    mask = _mask(args.mask)
    img = load_image(args.image)
    if args.anchors:
        lx, ly, rx, ry = args.anchors
        img = crop_face(img, EyeAnchors((lx, ly), (rx, ry)))
    out = _out_dir(args, ".")
    save_image(apply_occlusion(img, mask), out / args.name)
    mask.save(out / (Path(args.name).stem + "_mask.json"))
    print(out / args.name)


def cmd_pairs(args):
    for prvs, nxt in enumerate_pairs(args.n, args.strategy):
        print(f"{prvs},{nxt}")


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    seqs = synth_dataset(args.per_class, args.frames, args.canvas, seed, SynthConfig(magnitude=args.magnitude))
    out = _out_dir(args, "synthetic")
    save_sequences(seqs, out)
    print(f"{len(seqs)} sequences written to {out}")


def _fold_setup(args):
    m = _manifest(args)
    if not 0 <= args.fold < m.k:
        raise ConfigError(f"fold must be in [0, {m.k})")
    return m, Experiment(m)


def cmd_train_ae(args):
    m, exp = _fold_setup(args)
    train, val, _ = exp.rotation(args.fold)
    model, hist = train_reconstructor(m.ae, exp.bank.training_pairs(train, m.strategy),
                                      exp.bank.training_pairs(val, m.strategy))
    out = _out_dir(args)
    model.save(out / f"ae_fold{args.fold:02d}.ckpt")
    hist.to_csv(out / f"ae_fold{args.fold:02d}_history.csv")
    m.save(out / "manifest.json")
    print(f"best epoch {hist.best_epoch}, val loss {fmt(hist.val_loss[hist.best_epoch - 1])}")


def cmd_train_cnn(args):
    m, exp = _fold_setup(args)
    model, hist = exp.classifier(args.fold)
    out = _out_dir(args)
    model.save(out / f"cnn_fold{args.fold:02d}.ckpt")
    hist.to_csv(out / f"cnn_fold{args.fold:02d}_history.csv")
    m.save(out / "manifest.json")
    print(f"best epoch {hist.best_epoch}, val accuracy {fmt(hist.val_accuracy[hist.best_epoch - 1])}")


def _print_summary(report):
    for name, value in report.summary().items():
        print(f"{name:24s} {fmt(value)}")


def cmd_cv(args):
    m = _manifest(args)
    exp = Experiment(m)
    report = exp.baselines() if args.baselines_only else exp.reconstruction_cv()
    emit_report(report, _out_dir(args), m, exp.plan)
    _print_summary(report)


def cmd_ablate(args):
    m = _manifest(args)
    exp = Experiment(m)
    table = exp.ablation(args.axis)
    out = _out_dir(args)
    table.to_csv(out / f"ablation_{args.axis}.csv")
    for value, rep in table.rows:
        slug = "none" if value == "/" else value.replace("+", "_")
        emit_report(rep, out / f"{args.axis}_{slug}")
    m.save(out / "manifest.json")
    exp.plan.save(out / "folds.json")
    for value, rep in table.rows:
        print(f"{value:16s} {fmt(rep.mean('reconstructed_acc'))}")


def cmd_report(args):
    path = Path(args.run)
    if path.is_dir():
        path = path / "cv_report.csv"
    if not path.exists():
        raise DatasetError(f"no report at {path}")
    report = read_report(path)
    print(f"{len(report.folds)} folds")
    _print_summary(report)


def cmd_sweep_size(args):
    m = _manifest(args)
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise ConfigError(f"--sizes needs comma-separated integers, got {args.sizes!r}") from None
    rows = run_size_sweep(m, sizes, range(args.seeds))
    out = _out_dir(args)
    with open(out / "size_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "mean_clean_acc", "median_clean_acc", "n_seeds"])
        for r in rows:
            w.writerow([r["size"], fmt(r["mean"]), fmt(r["median"]), r["n_seeds"]])
    for r in rows:
        print(f"{r['size']:4d} mean {fmt(r['mean'])} median {fmt(r['median'])}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment manifest JSON ('benchmark' for the shipped benchmark)")
    common.add_argument("--seed", type=int, help="override every seed in the manifest")
    common.add_argument("--out-dir", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flowmend", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("flow", parents=[common], help="dense flow between two grayscale images")
    s.add_argument("prev")
    s.add_argument("next")
    s.add_argument("--name", default="flow.flo", help="output .flo file name")
    s.add_argument("--size", type=int, help="resize the flow to SIZE x SIZE")
    s.add_argument("--hsv", help="also write an HSV visualisation PNG")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("occlude", parents=[common], help="crop (optional) and occlude an image")
    s.add_argument("image")
    s.add_argument("--mask", default="lower_part", help="eyes | mouth | lower_part | mask JSON file")
    s.add_argument("--anchors", type=float, nargs=4, metavar=("LX", "LY", "RX", "RY"),
                   help="eye centres; crop the face before occluding")
    s.add_argument("--name", default="occluded.png")
    s.set_defaults(func=cmd_occlude)

    s = sub.add_parser("pairs", parents=[common], help="list (prvs, next) frame pairs")
    s.add_argument("n", type=int)
    s.add_argument("--strategy", default="mid_flows", choices=[p.value for p in PairStrategy])
    s.set_defaults(func=cmd_pairs)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic expression dataset")
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--frames", type=int, default=6)
    s.add_argument("--canvas", type=int, default=80)
    s.add_argument("--magnitude", type=float, default=SynthConfig.magnitude)
    s.set_defaults(func=cmd_synth)

    for name, func, text in (("train-ae", cmd_train_ae, "train the autoencoder for one fold"),
                             ("train-cnn", cmd_train_cnn, "train the classifier for one fold")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--fold", type=int, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("cv", parents=[common], help="10-fold reconstruction cross-validation")
    s.add_argument("--baselines-only", action="store_true")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("ablate", parents=[common], help="grid over loss, skips or strategy")
    s.add_argument("--axis", required=True, choices=ABLATION_AXES)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="summarise a cv_report.csv")
    s.add_argument("run", help="run directory or cv_report.csv")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep-size", parents=[common], help="classifier accuracy vs input size over seeds")
    s.add_argument("--sizes", default="24,48,64,96,128")
    s.add_argument("--seeds", type=int, default=100)
    s.set_defaults(func=cmd_sweep_size)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FlowError, OcclusionError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
