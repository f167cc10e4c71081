"""Command-line entry point: ``veinseg {gen-phantom,train,eval,infer,navigate}``.

Settings resolve as built-in defaults, then a JSON ``--config`` file, then
flags given on the command line. Every run writes ``manifest.json`` next to
its outputs with the resolved settings, the seed and every file produced.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import __version__
from .data_io import (DatasetEntry, DatasetError, generate_dataset, load_checkpoint,
                      load_dataset, read_pgm, save_checkpoint, write_dataset, write_pgm)
from .experiment import FoldArtifacts, benchmark_config, run_cross_validation, split_validation
from .metrics import write_results_csv, write_summary_csv
from .network import NetConfig, predict_proba
from .postprocess import navigate as navigate_record
from .trainer import (METHODS, TrainConfig, predict_masks, prepare_eval, prepare_masks, select_inference_model,
                      to_input, train_semi, train_supervised)

log = logging.getLogger("veinseg")

COMMANDS = ("gen-phantom", "train", "eval", "infer", "navigate")
PROFILES = ("cpu", "full")

# defaults shared by every command; per-command extras below
COMMON_DEFAULTS = {"seed": 0, "out": "out", "verbose": False}
COMMAND_DEFAULTS: Dict[str, dict] = {
    "gen-phantom": {"subjects": 10, "images_per_subject": 30, "labeled_per_subject": 6},
    "train": {"data": None, "method": "mean_teacher", "val_fraction": 0.2},
    "eval": {"data": None, "method": "mean_teacher", "folds": 5, "val_fraction": 0.2, "overlays": True},
    "infer": {"data": None, "checkpoint": None},
    "navigate": {"data": None, "checkpoint": None, "mm_per_pixel": 0.3, "needle_angle_deg": 17.0,
                 "skin_row": 0.0},
}
# training hyperparameters (train / eval); None means "take the profile's value"
TRAIN_KEYS = {
    "profile": "cpu", "alpha": None, "lambda1": None, "lambda2": None, "gamma": None, "alpha_focal": None,
    "threshold": None, "epochs": None, "focal_epochs": None, "bce_epochs": None, "patience": None,
    "lr_bce": None, "lr_focal": None, "batch_size": None, "width_div": None, "cardinality": None,
    "optimizer": None,
}
_TRAIN_FIELD = {"alpha": "ema_alpha", "alpha_focal": "alpha_focal", "epochs": "semi_epochs",
                "focal_epochs": "focal_max_epochs", "bce_epochs": "bce_max_epochs"}


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", type=Path, default=S, help="JSON file of settings (flags override it)")
    p.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    p.add_argument("--out", default=S, help="output directory (default ./out)")
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def _add_train(p: argparse.ArgumentParser, several: bool = False) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("training")
    if several:
        g.add_argument("--method", choices=METHODS, nargs="+", default=S,
                       help="one or more methods, each compared with the supervised baseline")
    else:
        g.add_argument("--method", choices=METHODS, default=S)
    g.add_argument("--profile", choices=PROFILES, default=S,
                   help="cpu: narrow network, fast schedule (default); full: full-width network")
    g.add_argument("--alpha", type=float, default=S, help="EMA decay")
    g.add_argument("--lambda1", type=float, default=S)
    g.add_argument("--lambda2", type=float, default=S)
    g.add_argument("--gamma", type=float, default=S, help="focal gamma")
    g.add_argument("--alpha-focal", type=float, default=S)
    g.add_argument("--threshold", type=float, default=S)
    g.add_argument("--epochs", type=int, default=S, help="semi-supervised epochs")
    g.add_argument("--focal-epochs", type=int, default=S)
    g.add_argument("--bce-epochs", type=int, default=S)
    g.add_argument("--patience", type=int, default=S)
    g.add_argument("--lr-bce", type=float, default=S)
    g.add_argument("--lr-focal", type=float, default=S)
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--width-div", type=int, default=S)
    g.add_argument("--cardinality", type=int, default=S)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default=S)
    g.add_argument("--val-fraction", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    ap = argparse.ArgumentParser(prog="veinseg", description="Vein segmentation and puncture planning.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-phantom", help="write a synthetic phantom dataset")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=S)
    p.add_argument("--images-per-subject", type=int, default=S)
    p.add_argument("--labeled-per-subject", type=int, default=S)

    p = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    _add_common(p)
    p.add_argument("--data", default=S, help="dataset directory")
    _add_train(p)

    p = sub.add_parser("eval", help="subject-grouped cross-validation")
    _add_common(p)
    p.add_argument("--data", default=S, help="dataset directory")
    p.add_argument("--folds", type=int, default=S)
    p.add_argument("--no-overlays", dest="overlays", action="store_false", default=S)
    _add_train(p, several=True)

    for name, text in (("infer", "write predicted masks"), ("navigate", "write puncture commands")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--data", default=S, help="dataset directory, image directory or .pgm file")
        p.add_argument("--checkpoint", default=S, help="checkpoint written by `train`")
        p.add_argument("--threshold", type=float, default=S)
        if name == "navigate":
            p.add_argument("--mm-per-pixel", type=float, default=S)
            p.add_argument("--needle-angle-deg", type=float, default=S)
            p.add_argument("--skin-row", type=float, default=S)
    return ap


def resolve_settings(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cmd = args.command
    settings = dict(COMMON_DEFAULTS)
    settings.update(COMMAND_DEFAULTS[cmd])
    if cmd in ("train", "eval"):
        settings.update(TRAIN_KEYS)
    if cmd in ("infer", "navigate"):
        settings["threshold"] = 0.5
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            from_file = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError(f"config file {cfg_path} must hold a JSON object")
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()}
        unknown = set(from_file) - set(settings)
        if unknown:
            raise UsageError(f"unknown keys in {cfg_path}: {', '.join(sorted(unknown))}")
        settings.update(from_file)
    settings.update(flags)
    settings["command"] = cmd
    if "method" in settings:
        ms = settings["method"]
        listed = [ms] if isinstance(ms, str) else list(ms)
        if not listed or any(m not in METHODS for m in listed) or (cmd == "train" and len(listed) != 1):
            raise UsageError(f"invalid method {ms!r}; choose from {', '.join(METHODS)}")
        settings["method"] = listed[0] if cmd == "train" else (ms if isinstance(ms, str) else listed)
    return settings


def train_config_from(settings: dict) -> TrainConfig:
    if settings["profile"] == "full":
        cfg = TrainConfig()
    elif settings["profile"] == "cpu":
        cfg = benchmark_config()
    else:
        raise UsageError(f"unknown profile {settings['profile']!r}")
    net = {k: settings[k] for k in ("width_div", "cardinality") if settings.get(k) is not None}
    fields = {}
    for key in TRAIN_KEYS:
        if key in ("profile", "width_div", "cardinality") or settings.get(key) is None:
            continue
        fields[_TRAIN_FIELD.get(key, key)] = settings[key]
    try:
        if net:
            merged = cfg.net.to_dict()
            merged.update(net)
            fields["net"] = NetConfig.from_dict(merged)
            fields["net"].validate()
        return replace(cfg, **fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def _require_dataset(settings: dict) -> List[DatasetEntry]:
    if not settings.get("data"):
        raise UsageError("--data is required")
    return load_dataset(settings["data"])


def _write_manifest(out: Path, settings: dict, artifacts: Sequence[Path], extra: Optional[dict] = None) -> Path:
    manifest = {
        "version": __version__,
        "command": settings["command"],
        "seed": settings["seed"],
        "settings": {k: v for k, v in sorted(settings.items())},
        "artifacts": sorted(str(Path(a)) for a in artifacts),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    manifest["artifacts"].append(str(path))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def cmd_gen_phantom(settings: dict, out: Path) -> List[Path]:
    entries = generate_dataset(settings["seed"], settings["subjects"], settings["images_per_subject"],
                               settings["labeled_per_subject"])
    paths = write_dataset(out, entries)
    print(f"wrote {len(entries)} phantoms to {out}")
    return paths


def cmd_train(settings: dict, out: Path, cfg: TrainConfig) -> List[Path]:
    entries = _require_dataset(settings)
    seed, method = settings["seed"], settings["method"]
    lab, val = split_validation(entries, settings["val_fraction"], seed)
    images, masks = [e.image for e in lab], [e.mask for e in lab]
    val_pair = None
    if val:
        val_pair = (prepare_eval([e.image for e in val], cfg.input_size),
                    prepare_masks([e.mask for e in val], cfg.input_size))
    sup = train_supervised(images, masks, cfg, seed=seed, val=val_pair)
    rows = list(sup.log.rows)
    models = {"model": sup.model}
    meta = {"method": method, "seed": seed, "train": cfg.to_dict()}
    if method != "supervised":
        unl = [e.image for e in entries if e.split == "unlabeled"]
        semi = train_semi(images, masks, unl, method, sup.model, cfg, seed=seed, val=val_pair)
        offset = len(rows)
        rows += [[r[0] + offset] + r[1:] for r in semi.log.rows]
        models = {"model": semi.student, "student": semi.student}
        if method == "mean_teacher":
            sel = val_pair or (prepare_eval(images, cfg.input_size), prepare_masks(masks, cfg.input_size))
            best, which, scores = select_inference_model(semi.teacher, semi.student, *sel, cfg)
            models = {"model": best, "student": semi.student, "teacher": semi.teacher}
            meta.update(selected=which, selection_dsc=scores, ema_alpha=cfg.ema_alpha)
        meta["iterations"] = semi.state.k
    sup.log.rows = rows
    log_path = out / "train_log.csv"
    sup.log.write_csv(log_path)
    ckpt = save_checkpoint(out / "checkpoint.vseg", models, meta)
    print(f"checkpoint: {ckpt}")
    return [log_path, ckpt]


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Input image with the predicted mask boundary drawn in white."""
    m = np.asarray(mask, dtype=bool)
    edge = m & ~ndimage.binary_erosion(m, border_value=0)
    out = np.clip(np.asarray(image, dtype=np.float64), 0, 255).astype(np.uint8)
    out[edge] = 255
    return out


def cmd_eval(settings: dict, out: Path, cfg: TrainConfig) -> List[Path]:
    entries = _require_dataset(settings)
    arts: Dict[int, FoldArtifacts] = {}
    reports = run_cross_validation(entries, cfg, settings["method"], seed=settings["seed"],
                                   folds=settings["folds"], val_fraction=settings["val_fraction"],
                                   artifacts=arts)
    results, summary = out / "results.csv", out / "summary.csv"
    write_results_csv(results, reports)
    write_summary_csv(summary, reports)
    paths = [results, summary]
    if settings["overlays"]:
        by_id = {e.image_id: e for e in entries}
        for fold in sorted(arts):
            for exp, preds in arts[fold].predictions.items():
                for iid, mask in sorted(preds.items()):
                    img = prepare_eval([by_id[iid].image], cfg.input_size)[0]
                    p = out / "overlays" / exp / (iid.replace("/", "_") + ".pgm")
                    write_pgm(p, overlay(img, mask))
                    paths.append(p)
    for exp, (_, agg) in reports.items():
        print(f"{exp:24s} DSC {agg.dsc_mean:.4f} ± {agg.dsc_std:.4f}  "
              f"centroid {agg.cent_mean:.2f} ± {agg.cent_std:.2f} px  failures {agg.failure_rate:.2f}%")
    return paths


def _input_images(path: str) -> List[tuple]:
    """(image_id, image) pairs from a dataset, a directory of PGMs or one PGM file."""
    p = Path(path)
    if p.is_file():
        return [(p.stem, read_pgm(p))]
    if not p.is_dir():
        raise DatasetError(f"input not found: {p}")
    if any(c.is_dir() and c.name.startswith("subject_") for c in p.iterdir()):
        return [(e.image_id, e.image) for e in load_dataset(p)]
    files = sorted(f for f in p.glob("*.pgm") if not f.stem.endswith(("_mask", "_gt", "_pred")))
    if not files:
        raise DatasetError(f"no .pgm images in {p}")
    return [(f.stem, read_pgm(f)) for f in files]


def _load_model(settings: dict):
    if not settings.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    ck = load_checkpoint(settings["checkpoint"])
    return ck.model, ck


def _probabilities(model, images, size: int = 64) -> np.ndarray:
    ims = prepare_eval(images, size)
    return np.concatenate([predict_proba(model, to_input(ims[i : i + 16], model.config.dtype))
                           for i in range(0, len(ims), 16)])


def cmd_infer(settings: dict, out: Path) -> List[Path]:
    if not settings.get("data"):
        raise UsageError("--data is required")
    model, _ = _load_model(settings)
    items = _input_images(settings["data"])
    cfg = TrainConfig(net=model.config, threshold=settings["threshold"])
    masks = predict_masks(model, prepare_eval([im for _, im in items]), cfg)
    paths = []
    for (iid, _), vm in zip(items, masks):
        p = out / "masks" / (iid.replace("/", "_") + "_pred.pgm")
        write_pgm(p, vm.mask * 255)
        paths.append(p)
    print(f"wrote {len(paths)} masks, {sum(vm.failed for vm in masks)} empty")
    return paths


def cmd_navigate(settings: dict, out: Path) -> List[Path]:
    if not settings.get("data"):
        raise UsageError("--data is required")
    model, _ = _load_model(settings)
    items = _input_images(settings["data"])
    probs = _probabilities(model, [im for _, im in items])
    path = out / "navigation.jsonl"
    with open(path, "w") as fh:
        for (iid, _), p in zip(items, probs):
            rec = navigate_record(p, skin_row=settings["skin_row"], threshold=settings["threshold"],
                                  mm_per_pixel=settings["mm_per_pixel"],
                                  needle_angle_deg=settings["needle_angle_deg"])
            fh.write(json.dumps({"image_id": iid, **rec}, sort_keys=True) + "\n")
    print(f"navigation records: {path}")
    return [path]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit 2 with usage on stderr
    try:
        settings = resolve_settings(args)
        logging.basicConfig(level=logging.INFO if settings["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        cmd = settings["command"]
        extra = {}
        if cmd in ("train", "eval"):
            cfg = train_config_from(settings)
            extra["train_config"] = cfg.to_dict()
            if cmd == "train":
                paths = cmd_train(settings, out, cfg)
            else:
                paths = cmd_eval(settings, out, cfg)
        elif cmd == "gen-phantom":
            paths = cmd_gen_phantom(settings, out)
        elif cmd == "infer":
            paths = cmd_infer(settings, out)
        else:
            paths = cmd_navigate(settings, out)
        _write_manifest(out, settings, paths, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"veinseg: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:  # dataset, checkpoint and range errors
        print(f"veinseg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
