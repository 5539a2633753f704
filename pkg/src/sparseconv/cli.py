"""Command line entry point: ``sparseconv <complete|train|synth|eval|mask-report>``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data
from .layers import first_layer_masks, mask_density
from .network import NetworkConfig, build_dvmn, forward, layer_mask_trace, load_checkpoint, save_checkpoint
from .training import (
    LOG_HEADER,
    LOG_VERSION,
    AugmentConfig,
    LossConfig,
    OptimizerState,
    ScheduleConfig,
    TrainingDiverged,
    train_loop,
)

log = logging.getLogger("sparseconv")


class CliError(Exception):
    pass


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# complete
# ---------------------------------------------------------------------------

def cmd_complete(args) -> int:
    depth_path = _require_file(args.depth)
    image_path = _require_file(args.image)
    ckpt_path = _require_file(args.checkpoint)
    model, _, _ = load_checkpoint(ckpt_path)
    cfg = model.config
    sparse = data.read_depth_png(depth_path)
    image = data.read_image_png(image_path)
    if image.shape[1:] != sparse.depth.shape:
        raise CliError(f"image {image.shape[1:]} and depth {sparse.depth.shape} differ in size")
    print(f"input density: {sparse.density:.6f}")

    h, w = sparse.depth.shape
    ph, pw = (-h) % cfg.multiple, (-w) % cfg.multiple
    depth, mask = sparse.depth[None, None], sparse.mask[None, None]
    img = image[None]
    if ph or pw:
        log.warning("input %dx%d is not divisible by %d; reflect-padding by %d rows, %d columns",
                    h, w, cfg.multiple, ph, pw)
        widths = ((0, 0), (0, 0), (0, ph), (0, pw))
        # padded pixels are treated as unobserved
        depth = np.pad(depth, widths, mode="reflect") * np.pad(np.ones_like(mask), widths)
        mask = np.pad(mask, widths, mode="reflect") * np.pad(np.ones_like(mask), widths)
        img = np.pad(img, widths, mode="reflect")
    model.eval()
    pred = forward(model, depth, mask, img).data[0, 0, :h, :w].astype(np.float64)
    pred = np.clip(pred, 1.0 / data.DEPTH_SCALE, data.MAX_DEPTH)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_depth_png(pred, out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

CONFIG_VERSION = 1

_NET_KEYS = {f.name: f.type for f in fields(NetworkConfig)}
_TRAIN_KEYS = {
    "version": int, "manifest": str, "val_manifest": str, "out": str, "resume": str,
    "epochs": int, "batch_size": int, "lr": float, "optimizer": str, "weight_decay": float,
    "lambda_smooth": float, "schedule": bool, "patience": int, "factor": float, "seed": int,
    "augment": bool, "flip_h": bool, "flip_v": bool, "rot_max_deg": float,
    "noise_sigma": float,
}


def _parse_value(raw: str, kind, where: str):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise CliError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def parse_train_config(path) -> Tuple[Dict[str, object], Dict[str, object]]:
    """Read a versioned ``key = value`` file into (training, network) settings.

    Blank lines and ``#`` comments are ignored. Relative paths resolve
    against the config file's directory.
    """
    path = _require_file(path)
    train: Dict[str, object] = {}
    net: Dict[str, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{path}:{lineno}"
        if "=" not in text:
            raise CliError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key in _TRAIN_KEYS:
            target, kind = train, _TRAIN_KEYS[key]
        elif key in _NET_KEYS:
            target, kind = net, _NET_KEYS[key]
        else:
            raise CliError(f"{where}: unknown field {key!r}")
        if key in target:
            raise CliError(f"{where}: field {key!r} given twice")
        target[key] = _parse_value(raw, kind, f"{where} field {key!r}")
    if train.get("version") != CONFIG_VERSION:
        raise CliError(f"{path}: field 'version' must be {CONFIG_VERSION}")
    for key in ("manifest", "out"):
        if key not in train:
            raise CliError(f"{path}: missing required field {key!r}")
    for key in ("manifest", "val_manifest", "out", "resume"):
        if key in train and not Path(str(train[key])).is_absolute():
            train[key] = str(path.parent / str(train[key]))
    return train, net


def cmd_train(args) -> int:
    config_path = args.config
    if config_path is None:
        raise CliError("train needs --config")
    train, net = parse_train_config(config_path)
    if args.seed is not None:
        train["seed"] = args.seed
    if args.out is not None:
        train["out"] = args.out
    _require_file(train["manifest"])
    if "val_manifest" in train:
        _require_file(train["val_manifest"])
    if "resume" in train:
        _require_file(train["resume"])
    try:
        cfg = NetworkConfig(**net)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"{config_path}: network settings: {exc}") from None

    seed = int(train.get("seed", 0))
    dataset = data.load_manifest(train["manifest"])
    val = data.load_manifest(train["val_manifest"]) if "val_manifest" in train else None
    out = Path(str(train["out"]))
    out.mkdir(parents=True, exist_ok=True)

    model = build_dvmn(cfg, seed)
    if "resume" not in train:
        save_checkpoint(model, out / "init.ckpt", meta={"seed": seed})
    opt = OptimizerState(str(train.get("optimizer", "adam")), float(train.get("lr", 1e-3)),
                         weight_decay=train.get("weight_decay"))
    aug = None
    if train.get("augment", False):
        aug = AugmentConfig(bool(train.get("flip_h", True)), bool(train.get("flip_v", True)),
                            float(train.get("rot_max_deg", 5.0)),
                            float(train.get("noise_sigma", 0.01)), seed)
    sched = ScheduleConfig(int(train.get("patience", 3)), float(train.get("factor", 0.5)),
                           bool(train.get("schedule", True)))
    log_path = out / "train.log"
    fresh = not log_path.exists() or "resume" not in train
    with open(log_path, "w" if fresh else "a") as sink:
        if fresh:
            sink.write(LOG_VERSION + "\n" + "\t".join(LOG_HEADER) + "\n")
        try:
            result = train_loop(model, dataset, int(train.get("epochs", 50)),
                                int(train.get("batch_size", 4)),
                                LossConfig(float(train.get("lambda_smooth", 0.1))), opt, sched,
                                aug, sink, val, seed=seed, checkpoint_dir=out,
                                resume_from=train.get("resume"))
        except TrainingDiverged as exc:
            save_checkpoint(model, out / "final.ckpt", meta={"diverged": str(exc)})
            raise CliError(f"training diverged: {exc}") from None
    save_checkpoint(model, out / "final.ckpt", meta={"epochs": len(result.log)})
    if result.step_losses:
        print(f"initial loss {result.step_losses[0]:.6g}, final loss {result.step_losses[-1]:.6g}")
    print(f"wrote {out / 'final.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.out is None:
        raise CliError("synth needs --out")
    if args.dropout < 0 or args.dropout >= 1 or args.lines < 0 or args.lines > args.height:
        raise CliError("need 0 <= lines <= height and 0 <= dropout < 1")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    for sub in ("depth", "gt", "image"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.n):
        sparse, gt = data.synth_scanlines(args.height, args.width, args.lines, args.dropout,
                                          args.model, seed=seed * 100003 + i)
        name = f"{i:06d}.png"
        data.write_depth_png(sparse, out / "depth" / name)
        data.write_depth_png(gt, out / "gt" / name)
        data.write_image_png(data.shade_depth(gt.depth), out / "image" / name)
        rows.append((f"depth/{name}", f"image/{name}", f"gt/{name}"))
    data.write_manifest(rows, out / "manifest.tsv")
    print(f"wrote {args.n} samples and {out / 'manifest.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_prediction(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    return data.read_depth_png(path).depth


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CliError(f"directory not found: {d}")
    preds = {p.stem: p for p in sorted(pred_dir.iterdir()) if p.suffix in (".png", ".npy")}
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix == ".png"}
    paired = sorted(set(preds) & set(gts))
    for stem in sorted(set(preds) ^ set(gts)):
        side = "prediction" if stem in preds else "ground truth"
        log.warning("skipping unpaired %s file %s", side, stem)
    if not paired:
        raise CliError("no prediction/ground-truth files pair up by name")
    print("\t".join(("file", "rmse_mm", "mae_mm", "irmse_per_km", "imae_per_km", "pixels")))
    reports = []
    for stem in paired:
        rep = data.evaluate(_read_prediction(preds[stem]), data.read_depth_png(gts[stem]))
        reports.append(rep)
        print("\t".join([stem] + rep.as_row()))
    means = [float(np.mean([getattr(r, f) for r in reports]))
             for f in ("rmse_mm", "mae_mm", "irmse_per_km", "imae_per_km")]
    total = sum(r.evaluated_pixels for r in reports)
    print("\t".join(["mean"] + [f"{m:.4f}" for m in means] + [str(total)]))
    return 0


# ---------------------------------------------------------------------------
# mask-report
# ---------------------------------------------------------------------------

def _parse_synth_options(text: str) -> dict:
    values = {"height": 64, "width": 256, "lines": data.KITTI_LIKE["n_lines"],
              "dropout": data.KITTI_LIKE["dropout"], "model": "planar_ground", "seed": 0}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise CliError(f"--synth item {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in values:
            raise CliError(f"unknown --synth key {key!r}")
        kind = type(values[key])
        values[key] = _parse_value(raw, kind, f"--synth {key!r}")
    return values


def cmd_mask_report(args) -> int:
    if args.out is None:
        raise CliError("mask-report needs --out")
    if (args.depth is None) == (args.synth is None):
        raise CliError("give exactly one of --depth or --synth")
    if args.depth is not None:
        mask = data.read_depth_png(_require_file(args.depth)).mask
    else:
        s = _parse_synth_options(args.synth)
        seed = args.seed if args.seed is not None else s["seed"]
        mask = data.synth_scanlines(s["height"], s["width"], s["lines"], s["dropout"],
                                    s["model"], seed=seed)[0].mask
    if args.checkpoint is not None:
        cfg = load_checkpoint(_require_file(args.checkpoint))[0].config
    else:
        cfg = NetworkConfig(C=1, stages=args.stages, bottlenecks_per_stage=args.bottlenecks,
                            sisl_count=args.sisl_count, d_switch=args.d_switch, dtype="float64")
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    plain_cfg = replace(cfg, sisl_count=0)
    o = mask[None, None].astype(np.float64)
    sisl_trace = layer_mask_trace(build_dvmn(cfg, 0), o)
    plain_trace = layer_mask_trace(build_dvmn(plain_cfg, 0), o)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_mask_png(mask, out / "00_input.png")
    rows = [("0", "input", "0", f"{mask_density(o):.6f}", f"{mask_density(o):.6f}")]
    for i, ((name, m, dens), (_, pm, pdens)) in enumerate(zip(sisl_trace, plain_trace), start=1):
        strided = "1" if name.endswith(".down") else "0"
        data.write_mask_png(m[0, 0], out / f"{i:02d}_{name}.png")
        data.write_mask_png(pm[0, 0], out / f"{i:02d}_{name}.plain.png")
        rows.append((str(i), name, strided, f"{dens:.6f}", f"{pdens:.6f}"))
    table = ["\t".join(("index", "layer", "strided", "density", "density_plain_si"))]
    table += ["\t".join(r) for r in rows]
    (out / "densities.tsv").write_text("\n".join(table) + "\n")

    plain_first, sisl_first, sw = first_layer_masks(o, 1, cfg.d_switch)
    first = ["\t".join(("layer", "plain_si_density", "sisl_density")),
             "\t".join(("first", f"{mask_density(plain_first):.6f}",
                        f"{mask_density(sisl_first):.6f}"))]
    (out / "first_layer.tsv").write_text("\n".join(first) + "\n")
    data.write_mask_png(plain_first[0, 0], out / "first_plain_si.png")
    data.write_mask_png(sisl_first[0, 0], out / "first_sisl.png")
    data.write_mask_png(sw[0, 0], out / "first_switch_map.png")
    print("\n".join(table))
    print(f"first layer: plain SI-conv {mask_density(plain_first):.4f}, "
          f"SISL {mask_density(sisl_first):.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    common.add_argument("--config", default=None, help="key = value training config")
    common.add_argument("--out", default=None, help="output file or directory")

    parser = argparse.ArgumentParser(prog="sparseconv",
                                     description="Sparsity-invariant depth completion tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", parents=[common], help="complete a sparse depth map")
    p.add_argument("--depth", required=True, help="sparse 16-bit depth PNG")
    p.add_argument("--image", required=True, help="RGB guidance image")
    p.add_argument("--checkpoint", required=True, help="trained .ckpt file")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("train", parents=[common], help="train from a key=value config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="write synthetic scan-line samples")
    p.add_argument("--n", type=int, default=4, help="number of samples")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--lines", type=int, default=data.KITTI_LIKE["n_lines"],
                   help="scan lines per image")
    p.add_argument("--dropout", type=float, default=data.KITTI_LIKE["dropout"],
                   help="fraction of scan-line points dropped")
    p.add_argument("--model", choices=data.DEPTH_MODELS, default="planar_ground")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("pred_dir", help="predictions (.png or .npy, matched by file stem)")
    p.add_argument("gt_dir", help="ground-truth depth PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-report", parents=[common],
                       help="per-layer validity masks through the depth encoder")
    p.add_argument("--depth", default=None, help="sparse depth PNG to trace")
    p.add_argument("--synth", default=None, help="e.g. height=64,width=256,lines=5,dropout=0.36")
    p.add_argument("--checkpoint", default=None, help="take the architecture from a checkpoint")
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--bottlenecks", type=int, default=6)
    p.add_argument("--sisl-count", type=int, default=4)
    p.add_argument("--d-switch", type=int, default=2)
    p.set_defaults(func=cmd_mask_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
