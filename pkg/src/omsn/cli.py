"""``omsn`` command line: synth, train, predict, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
``OMSN_THREADS`` caps BLAS threads (default 1, for bitwise determinism).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .archive import ArchiveError, ModelArchive, restore_model
from .checks import SCOPES, format_table, run_suite
from .data import (DatasetError, SynthConfig, image_to_uint8, load_dataset, read_manifest, read_png,
                   save_dataset, split, synth_dataset)
from .network import OMSN, PRESETS, preset
from .postprocess import CLASS_NAMES, FAZ, VESSEL, PostprocessConfig, decode_labels
from .trainer import TrainConfig, channel_classes, evaluate, fit, predict_probabilities

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
TARGETS = {"vessel": VESSEL, "faz": FAZ}

log = logging.getLogger("omsn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def thread_limit() -> int:
    raw = os.environ.get("OMSN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"OMSN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"OMSN_THREADS must be a positive integer, got {raw!r}")
    return n


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_archive(path) -> ModelArchive:
    try:
        return ModelArchive.load(path)
    except FileNotFoundError:
        raise DataError(f"{path}: model file not found") from None
    except ArchiveError as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_samples(root):
    try:
        return load_dataset(root)
    except DatasetError as exc:
        raise DataError(str(exc)) from None


# ---------------------------------------------------------------- synth
def cmd_synth(args) -> int:
    if args.count <= 0:
        raise UsageError("--count must be positive")
    try:
        cfg = SynthConfig(size=args.size, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    samples = synth_dataset(args.count, cfg)
    manifest = split(samples, args.seed) if args.count >= 5 else None
    try:
        save_dataset(samples, args.out, manifest)
    except OSError as exc:
        raise DataError(f"{args.out}: cannot write dataset ({exc.strerror or exc})") from None
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train
def _train_setup(args, image_size: int):
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"{args.config}: cannot read config ({exc})") from None
    unknown = set(file_cfg) - {"preset", "model", "train", "postprocess"}
    if unknown:
        raise UsageError(f"{args.config}: unknown config sections {sorted(unknown)}")
    name = args.preset or file_cfg.get("preset", "tiny")
    if name not in PRESETS or name == "gradcheck":
        raise UsageError(f"--preset must be 'tiny' or 'paper', got {name!r}")
    oc = 3 if args.task == "multi" else 1
    try:
        model_cfg = preset(name, **{**file_cfg.get("model", {}), "output_channels": oc,
                                    "input_size": image_size})
        base = TrainConfig.desk() if name == "tiny" else TrainConfig()
        overrides = dict(file_cfg.get("train", {}))
        overrides["task"] = args.task
        overrides["target_class"] = TARGETS[args.target] if args.target else VESSEL
        for flag, key in (("epochs", "max_epochs"), ("seed", "seed"), ("lr", "lr_init"),
                          ("patience", "patience")):
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        train_cfg = TrainConfig.from_dict({**base.to_dict(), **overrides})
        pp = PostprocessConfig.from_dict(file_cfg.get("postprocess", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model_cfg, train_cfg, pp


def cmd_train(args) -> int:
    if args.task == "single" and not args.target:
        raise UsageError("--task single requires --class {vessel,faz}")
    if args.task == "multi" and args.target:
        raise UsageError("--class only applies to --task single")
    samples = _load_samples(args.data)
    sizes = {s.image.shape for s in samples}
    if len(sizes) != 1 or len(next(iter(sizes))) != 2 or len(set(next(iter(sizes)))) != 1:
        raise DataError(f"{args.data}: training needs square images of one size, found {sorted(sizes)}")
    model_cfg, train_cfg, pp = _train_setup(args, next(iter(sizes))[0])

    try:
        manifest = read_manifest(args.data)
        if manifest is None or set(manifest.ids) != {s.id for s in samples}:
            manifest = split(samples, train_cfg.seed)
        train, val = manifest.select(samples, "train"), manifest.select(samples, "val")
    except (DatasetError, ValueError, KeyError) as exc:
        raise DataError(f"{args.data}: {exc}") from None
    if not val:
        raise DataError(f"{args.data}: validation split is empty")

    model = OMSN(model_cfg, seed=train_cfg.seed)
    provenance = {"data": Path(args.data).name, "split": manifest.to_dict()}
    result = fit(model, train, val, train_cfg, pp, provenance=provenance)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.archive.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    log_path.write_text(result.log_csv(), encoding="utf-8")
    _dump_json(out.with_suffix(".summary.json"), result.summary())
    print(f"best val dice {result.best_dice:.4f} at epoch {result.best_epoch}; wrote {out}")
    return EXIT_OK


# -------------------------------------------------------------- predict
def _archive_setup(archive: ModelArchive):
    model = restore_model(archive)
    task = archive.config.get("task", "multi" if model.config.output_channels == 3 else "single")
    target = int(archive.config.get("target_class", VESSEL))
    pp = PostprocessConfig.from_dict(archive.config.get("postprocess", {}))
    return model, task, target, pp


def overlay_rgb(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Grayscale image as RGB with vessel pixels red and FAZ pixels green."""
    gray = image_to_uint8(image)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[labels == VESSEL] = (255, 0, 0)
    rgb[labels == FAZ] = (0, 255, 0)
    return rgb


def cmd_predict(args) -> int:
    model, task, target, pp = _archive_setup(_load_archive(args.model))
    try:
        raw = read_png(Path(args.image))
    except (OSError, ValueError) as exc:
        raise DataError(f"{args.image}: cannot read image ({exc})") from None
    s = model.config.input_size
    if raw.shape != (s, s):
        raise DataError(f"{args.image}: image size {raw.shape[1]}x{raw.shape[0]} does not match "
                        f"the model input size {s}x{s}")
    image = (raw / 255.0).astype(np.float32)
    probs = predict_probabilities(model, image[None], task)[0]
    chans = channel_classes(task, target, probs.shape[0])
    labels = decode_labels(probs, pp, chans)

    Image.fromarray(labels, mode="L").save(args.out_mask, format="PNG")
    if args.out_prob:
        base = Path(args.out_prob)
        for ch, cls in enumerate(chans):
            path = base.with_name(f"{base.stem}_{CLASS_NAMES[cls]}{base.suffix or '.png'}")
            Image.fromarray(image_to_uint8(probs[ch]), mode="L").save(path, format="PNG")
    if args.overlay:
        Image.fromarray(overlay_rgb(image, labels), mode="RGB").save(args.overlay, format="PNG")
    print(f"wrote {args.out_mask}")
    return EXIT_OK


# ----------------------------------------------------------------- eval
def cmd_eval(args) -> int:
    model, task, target, pp = _archive_setup(_load_archive(args.model))
    samples = _load_samples(args.data)
    manifest = read_manifest(args.data)
    if manifest is None and args.split != "all":
        manifest = split(samples, args.seed)
    try:
        chosen = samples if args.split == "all" else manifest.select(samples, args.split)
    except (DatasetError, KeyError) as exc:
        raise DataError(f"{args.data}: {exc}") from None
    if not chosen:
        raise DataError(f"{args.data}: split {args.split!r} is empty")
    s = model.config.input_size
    bad = [x.id for x in chosen if x.image.shape != (s, s)]
    if bad:
        raise DataError(f"{args.data}: {bad[0]} has size {chosen[0].image.shape}, model expects {s}x{s}")

    result = evaluate(chosen, lambda imgs: predict_probabilities(model, imgs, task), task, target, pp)
    result["split"] = args.split
    _dump_json(Path(args.report), result)
    for cls, metrics in result["mean"].items():
        line = "  ".join(f"{m} {metrics[m]:.4f}±{result['std'][cls][m]:.4f}"
                         for m in ("dice", "jac", "bacc", "gmeans"))
        print(f"{cls:7} {line}")
    return EXIT_OK


# ------------------------------------------------------------ gradcheck
def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope, seed=args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="omsn", description="Multi-scale skip-connection segmentation for OCTA images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write the best archive")
    t.add_argument("--data", required=True)
    t.add_argument("--task", choices=("single", "multi"), required=True)
    t.add_argument("--class", dest="target", choices=sorted(TARGETS))
    t.add_argument("--config", help="JSON with optional preset/model/train/postprocess sections")
    t.add_argument("--preset", choices=("tiny", "paper"))
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="segment one image")
    r.add_argument("--model", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out-mask", required=True)
    r.add_argument("--out-prob", help="base path; one PNG per output class is written")
    r.add_argument("--overlay")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metrics over a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0, help="split seed when the data has no manifest")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--scope", choices=("all",) + SCOPES, default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = thread_limit()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(threads):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
