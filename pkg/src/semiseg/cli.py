"""Command-line entry points.

    semiseg synth     --out DIR [--videos N --frames N --size S --seed S ...]
    semiseg ingest    --video FILE --out DIR [--fps 3 --size 256]
    semiseg train     --manifest FILE --out RUN [--method endo-semis ...]
    semiseg train-st  --manifest FILE --out RUN
    semiseg correct   --manifest FILE --st-checkpoint FILE --out DIR (--run RUN | --predictions DIR)
    semiseg evaluate  --manifest FILE --out FILE (--run RUN | --predictions DIR) [--st-checkpoint FILE]
    semiseg bench     --out DIR

Every command accepts ``--config FILE``: flat ``key = value`` lines whose
keys are the long option names (dashes or underscores). Flags given on the
command line win over the file. ``SEMISEG_OUTPUT_ROOT`` is prepended to
relative ``--out`` paths.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("semiseg")

OUTPUT_ROOT_ENV = "SEMISEG_OUTPUT_ROOT"


class UsageError(Exception):
    """Bad arguments, configuration or missing inputs (exit code 2)."""


# --------------------------------------------------------------------------
# config files


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config_file(values: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {'none' if v is None else v}" for k, v in sorted(values.items())]
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(action: argparse.Action, value: str):
    if value.lower() == "none":
        return None
    if isinstance(action, (argparse.BooleanOptionalAction, argparse._StoreTrueAction)):
        return _parse_bool(value)
    conv = action.type or str
    result = conv(value)
    if action.choices is not None and result not in action.choices:
        raise ValueError(f"{value!r} not in {list(action.choices)}")
    return result


def apply_config(parser: argparse.ArgumentParser, path) -> None:
    """Use the file's values as defaults of ``parser`` so flags still win."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in read_config_file(path).items():
        if key not in actions or key in ("help", "config"):
            raise UsageError(f"{path}: unknown key {key!r}")
        try:
            defaults[key] = _convert(actions[key], value)
        except ValueError as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from exc
        actions[key].required = False
    parser.set_defaults(**defaults)


def output_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# --------------------------------------------------------------------------
# argument definitions


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _ratio(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {text}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; command-line flags override it")
    p.add_argument("--out", required=True, help="output path (relative paths go under $%s)" % OUTPUT_ROOT_ENV)
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="manifest.jsonl of the dataset")
    p.add_argument("--size", type=_positive_int, default=None,
                   help="resize frames to SIZE x SIZE (default: native size)")
    p.add_argument("--split-fractions", default="0.75,0.05,0.20",
                   help="train,val,test video fractions used when the manifest has no split")
    p.add_argument("--split-seed", type=int, default=0)


def _prediction_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--run", help="training run directory holding net1_best.pt / net2_best.pt")
    p.add_argument("--network", type=int, default=1, choices=(1, 2))
    p.add_argument("--predictions", help="directory of predicted masks <video>/<frame:05d>.png")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiseg", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic moving-object clip dataset")
    _common(p)
    p.add_argument("--videos", type=int, default=12)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--object", default="mixed", choices=("disc", "ellipse", "mixed"))
    p.add_argument("--motion", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.06)
    p.add_argument("--blur", type=float, default=0.2)
    p.add_argument("--empty-prob", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="extract frames of a video file into a manifest")
    _common(p)
    p.add_argument("--video", required=True)
    p.add_argument("--fps", type=float, default=3.0)
    p.add_argument("--size", type=_positive_int, default=256)
    p.add_argument("--video-id")

    p = sub.add_parser("train", help="train a pair of segmentation networks")
    _common(p)
    _data_args(p)
    p.add_argument("--method", default="endo-semis", choices=("endo-semis", "cps", "generic", "supervised"))
    for t, what in (("au", "weak/strong views and CutMix"), ("eu", "MC-dropout filtering"),
                    ("jps", "joint pseudo-label"), ("ml-d", "logit mutual term"),
                    ("ml-eb", "encoder/bottleneck mutual terms")):
        p.add_argument(f"--{t}", action=argparse.BooleanOptionalAction, default=None,
                       help=f"toggle {what} (default: on for endo-semis, off otherwise)")
    p.add_argument("--ratio", type=_ratio, default=0.1, help="fraction of training frames labeled")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-final", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--k", type=_positive_int, default=5, help="MC-dropout passes")
    p.add_argument("--width", type=_positive_int, default=32, help="channels of the first encoder level")
    p.add_argument("--depth", type=_positive_int, default=4)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--cutmix-p", type=float, default=0.5)
    p.add_argument("--steps-per-epoch", type=_positive_int, default=None,
                   help="fixed optimiser steps per epoch (default: one pass over the unlabeled frames)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("train-st", help="train the temporal correction network")
    _common(p)
    _data_args(p)
    p.add_argument("--ratio", type=_ratio, default=0.1)
    p.add_argument("--all-train", action="store_true", help="use every training frame, not only labeled ones")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=_positive_int, default=16)
    p.add_argument("--depth", type=_positive_int, default=3)
    p.add_argument("--windows-per-epoch", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("correct", help="detect FP/FN frames and re-predict them")
    _common(p)
    _data_args(p)
    _prediction_args(p)
    p.add_argument("--st-checkpoint", required=True)

    p = sub.add_parser("evaluate", help="metric table for net1, net2, with and without correction")
    _common(p)
    _data_args(p)
    _prediction_args(p)
    p.add_argument("--st-checkpoint")
    p.add_argument("--overlays", action="store_true", help="also write contour overlay images")

    p = sub.add_parser("bench", help="scaled-down semi-supervised vs supervised comparison")
    _common(p)
    p.add_argument("--methods", default="endo-semis,supervised")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--width", type=_positive_int, default=8)
    return parser


# --------------------------------------------------------------------------
# shared helpers


def _load_manifest(args):
    from .data import DatasetManifest, split_by_video

    path = Path(args.manifest)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    try:
        manifest = DatasetManifest.load(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if len(manifest) == 0:
        raise UsageError(f"manifest {path} is empty")
    if any(r.split is None for r in manifest.records):
        try:
            fractions = tuple(float(f) for f in args.split_fractions.split(","))
            manifest = split_by_video(manifest, fractions, seed=args.split_seed)
        except ValueError as exc:
            raise UsageError(f"cannot split manifest: {exc}") from exc
    return manifest


def _labeled_manifest(args, manifest):
    from .data import sample_labeled

    try:
        return sample_labeled(manifest, args.ratio, seed=args.split_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing {what}: {p}")
    return p


def _read_predictions(pred_dir: Path, data) -> np.ndarray:
    from .data import read_mask

    masks = []
    for r, gt in zip(data.records, data.masks):
        p = pred_dir / r.video_id / f"{r.frame_index:05d}.png"
        if not p.exists():
            raise UsageError(f"missing prediction {p}")
        m = read_mask(p)
        if m.shape != gt.shape:
            raise UsageError(f"{p}: prediction shape {m.shape} differs from frame shape {gt.shape}")
        masks.append(m)
    return np.stack(masks) if masks else np.zeros((0,) + data.masks.shape[1:], np.uint8)


def _predictions(args, data, network: int) -> np.ndarray:
    from .trainer import load_net, predict_masks

    if args.predictions:
        return _read_predictions(_require(args.predictions, "prediction directory"), data)
    if not args.run:
        raise UsageError("give --run or --predictions")
    net = load_net(_require(Path(args.run) / f"net{network}_best.pt", "checkpoint"))
    return predict_masks(net, data.images)


def _eval_set(args):
    from .data import FrameStore

    data = FrameStore(_load_manifest(args), args.size).evaluation(args.split)
    if len(data) == 0:
        raise UsageError(f"split {args.split!r} has no frames")
    return data


def _snapshot(args, path) -> None:
    values = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose")}
    write_config_file(values, path)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .data import SynthConfig, generate_synthetic

    cfg = SynthConfig(n_videos=args.videos, frames_per_video=args.frames, image_size=args.size,
                      object_kind=args.object, motion_amplitude=args.motion, noise_level=args.noise,
                      blur_prob=args.blur, empty_prob=args.empty_prob, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = generate_synthetic(cfg, output_path(args.out))
    print(f"wrote {len(manifest)} frames of {cfg.n_videos} videos to {output_path(args.out)}")
    return 0


def cmd_ingest(args) -> int:
    from .data import DatasetManifest, ingest_video

    out = output_path(args.out)
    if args.fps <= 0:
        raise UsageError("--fps must be positive")
    records = ingest_video(_require(args.video, "video"), out, args.fps, args.size, args.video_id)
    DatasetManifest(records, out).save(out / "manifest.jsonl")
    print(f"extracted {len(records)} frames to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import FrameStore
    from .trainer import TrainConfig, fit

    manifest = _labeled_manifest(args, _load_manifest(args))
    store = FrameStore(manifest, args.size)
    labeled = store.labeled()
    try:
        cfg = TrainConfig(method=args.method, au=args.au, eu=args.eu, jps=args.jps, ml_d=args.ml_d,
                          ml_eb=args.ml_eb, labeled_ratio=args.ratio, batch_size=args.batch_size,
                          epochs=args.epochs, lr_init=args.lr, lr_final=args.lr_final,
                          weight_decay=args.weight_decay, k=args.k, seed=args.seed,
                          image_size=int(labeled.images.shape[-1]), base_width=args.width, depth=args.depth,
                          dropout_rate=args.dropout, cutmix_p=args.cutmix_p,
                          steps_per_epoch=args.steps_per_epoch)
        cfg.net_config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    run = output_path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    _snapshot(args, run / "run_config.txt")
    manifest.save(run / "manifest.jsonl")
    unlabeled = store.unlabeled() if cfg.uses_unlabeled else None
    val = store.evaluation("val") if manifest.select("val") else None
    result = fit(labeled, unlabeled, val, cfg, run_dir=run, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.method} for {cfg.epochs} epochs: "
          f"val dice net1 {last.get('val_dice_net1', float('nan')):.4f} "
          f"net2 {last.get('val_dice_net2', float('nan')):.4f}; checkpoints in {run}")
    return 0


def cmd_train_st(args) -> int:
    from .data import FrameStore
    from .trainer import CorrectionConfig, fit_correction

    manifest = _load_manifest(args)
    store = FrameStore(manifest, args.size)
    if args.all_train:
        data = store.evaluation("train")
    else:
        data = FrameStore(_labeled_manifest(args, manifest), args.size).labeled()
    cfg = CorrectionConfig(epochs=args.epochs, batch_size=args.batch_size, lr_init=args.lr,
                           lr_final=min(1e-5, args.lr), base_width=args.width, depth=args.depth,
                           seed=args.seed, windows_per_epoch=args.windows_per_epoch)
    run = output_path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    _snapshot(args, run / "run_config.txt")
    try:
        _, history = fit_correction(data, cfg, run)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"correction network trained, final loss {history[-1]['loss']:.4f}; {run / 'stnet_best.pt'}")
    return 0


def cmd_correct(args) -> int:
    from .data import write_mask
    from .evaluate import apply_temporal_correction
    from .temporal import flag_report
    from .trainer import load_net

    data = _eval_set(args)
    st_net = load_net(_require(args.st_checkpoint, "correction checkpoint"))
    preds = _predictions(args, data, args.network)
    corrected, flags = apply_temporal_correction(data, preds, st_net)
    out = output_path(args.out)
    for r, m in zip(data.records, corrected):
        (out / "masks" / r.video_id).mkdir(parents=True, exist_ok=True)
        write_mask(out / "masks" / r.video_id / f"{r.frame_index:05d}.png", m)
    flag_report(flags, out / "flags.json")
    n = sum(len(f) for f in flags.values())
    print(f"{n} frames flagged and corrected; masks in {out / 'masks'}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import apply_temporal_correction, evaluate_predictions
    from .metrics import format_table, overlay, report_row, write_report
    from .trainer import load_net

    data = _eval_set(args)
    st_net = load_net(_require(args.st_checkpoint, "correction checkpoint")) if args.st_checkpoint else None
    sources = [("predictions", None)] if args.predictions else [(f"net{i}", i) for i in (1, 2)]
    rows = []
    out = output_path(args.out)
    for name, network in sources:
        preds = _predictions(args, data, network)
        rows.append(report_row(name, *evaluate_predictions(preds, data.masks)))
        if st_net is not None:
            corrected, _ = apply_temporal_correction(data, preds, st_net)
            rows.append(report_row(f"{name}+ST", *evaluate_predictions(corrected, data.masks)))
        if args.overlays:
            from PIL import Image

            odir = out.parent / f"overlays_{name}"
            odir.mkdir(parents=True, exist_ok=True)
            for r, img, p, g in zip(data.records, data.images, preds, data.masks):
                Image.fromarray(overlay(img, p, g)).save(odir / f"{r.video_id}_{r.frame_index:05d}.png")
    write_report(rows, out)
    print(format_table(rows))
    return 0


def cmd_bench(args) -> int:
    from dataclasses import replace

    from .experiment import BenchConfig, run_bench, summarise

    bench = BenchConfig(methods=tuple(args.methods.split(",")), seeds=tuple(int(s) for s in args.seeds.split(",")))
    bench.train = replace(bench.train, epochs=args.epochs, base_width=args.width)
    rows = run_bench(bench, output_path(args.out))
    for k, v in summarise(rows).items():
        print(f"{k}: mean test dice {v:.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "train-st": cmd_train_st,
            "correct": cmd_correct, "evaluate": cmd_evaluate, "bench": cmd_bench}


def _config_arg(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    config = _config_arg(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if config and command in subparsers:
        # file values become defaults, so explicit flags still take precedence
        apply_config(subparsers[command], config)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"semiseg: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"semiseg: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"semiseg: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort boundary of the process
        log.debug("failure", exc_info=True)
        print(f"semiseg: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
