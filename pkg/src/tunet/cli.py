"""Command-line entry point.

Commands: generate-data, train, eval, ablate, predict. Every command takes
--config PATH (flat key=value lines, dotted keys), repeatable --set KEY=VALUE
overrides, --seed N, and --out DIR. The fully resolved configuration is
written into the output directory before any work starts, so a run directory
is always re-executable. Exit codes: 0 ok, 2 config error, 3 data error,
4 runtime numeric error.
"""

import argparse
import os
import sys

import numpy as np

from tunet.data import (
    Dataset,
    PhantomSpec,
    generate_dataset,
    load_image_volume,
    save_volume,
)
from tunet.errors import ConfigError, DataError, NumericError
from tunet.metrics import evaluate_case_set, predict_volume
from tunet.model import Model, ModelConfig
from tunet.training import (
    TrainConfig,
    restore_model,
    run_ablation,
    save_checkpoint,
    train,
)

_DATA_DEFAULTS = {
    "data.dir": "",
    "data.cases": "10",
    "data.depth": "8",
    "data.height": "64",
    "data.width": "64",
    "data.spacing": "1.0,1.0,1.0",
    "data.classes": "4",
    "data.noise_std": "0.05",
    "data.size_min": "0.12",
    "data.size_max": "0.3",
    "data.split": "0.6,0.2,0.2",
    "data.seed": "0",
}


def parse_config_file(path):
    flat = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise DataError(f"cannot read config file {path}: {e}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
        key, _, value = line.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def resolve_config(args):
    """Merge defaults <- config file <- --set overrides <- --seed."""
    explicit = {}
    if getattr(args, "config", None):
        explicit.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        explicit[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        explicit["train.seed"] = str(args.seed)
        explicit["data.seed"] = str(args.seed)

    scale = explicit.get("model.scale", "tiny")
    defaults = ModelConfig.preset(scale).to_flat()
    defaults.update(TrainConfig().to_flat())
    defaults.update(_DATA_DEFAULTS)
    unknown = sorted(set(explicit) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config field {unknown[0]!r}")
    resolved = dict(defaults)
    resolved.update(explicit)
    return resolved


def model_config_from(flat):
    return ModelConfig.from_flat(flat).validate()


def train_config_from(flat):
    return TrainConfig.from_flat(flat).validate()


def phantom_spec_from(flat):
    def triple(key, cast):
        parts = flat[key].split(",")
        if len(parts) != 3:
            raise ConfigError(f"{key} needs three comma-separated values, got {flat[key]!r}")
        return tuple(cast(p) for p in parts)

    classes = int(flat["data.classes"])
    if classes < 1:
        raise ConfigError(f"data.classes must be >= 1, got {classes}")
    size_range = (float(flat["data.size_min"]), float(flat["data.size_max"]))
    return PhantomSpec(
        shape=(int(flat["data.depth"]), int(flat["data.height"]), int(flat["data.width"])),
        spacing=triple("data.spacing", float),
        structures=PhantomSpec.default_structures(classes - 1, size_range=size_range),
        noise_std=float(flat["data.noise_std"]),
        seed=int(flat["data.seed"]),
    ).validate()


def write_resolved_config(out_dir, flat):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(flat):
            fh.write(f"{key} = {flat[key]}\n")
    return path


def _require_out(args):
    if not args.out:
        raise ConfigError("this command needs --out DIR")
    return args.out


def _open_dataset(flat):
    root = flat["data.dir"]
    if not root:
        raise ConfigError("data.dir must point at a generated dataset (or pass --set data.dir=...)")
    return Dataset(root)


def _check_dataset_matches_model(dataset, model_cfg):
    cid = dataset.split.all_cases()[0]
    image, labels = dataset.load_case(cid)
    if image.shape[1:] != (model_cfg.height, model_cfg.width):
        raise ConfigError(
            f"dataset slices are {image.shape[1]}x{image.shape[2]} but the model "
            f"expects {model_cfg.height}x{model_cfg.width}"
        )
    if labels.num_classes != model_cfg.num_classes:
        raise ConfigError(
            f"dataset has {labels.num_classes} classes but the model expects "
            f"{model_cfg.num_classes}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(args):
    flat = resolve_config(args)
    out = _require_out(args)
    write_resolved_config(out, flat)
    spec = phantom_spec_from(flat)
    fractions = tuple(float(p) for p in flat["data.split"].split(","))
    split = generate_dataset(out, spec, int(flat["data.cases"]), fractions)
    print(f"wrote {len(split.all_cases())} cases to {out} "
          f"(train {len(split.train)} / val {len(split.val)} / test {len(split.test)})")
    return 0


def cmd_train(args):
    flat = resolve_config(args)
    out = _require_out(args)
    model_cfg = model_config_from(flat)
    train_cfg = train_config_from(flat)
    dataset = _open_dataset(flat)
    _check_dataset_matches_model(dataset, model_cfg)
    write_resolved_config(out, flat)
    model = Model(model_cfg, seed=train_cfg.seed)
    slices = dataset.training_slices("train")
    val_cases = dataset.eval_cases("val")
    result = train(model, train_cfg, slices, val_cases=val_cases, out_dir=out)
    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    save_checkpoint(ckpt_path, model, iteration=train_cfg.iterations, seed=train_cfg.seed)
    last_loss = result.loss_curve[-1][1] if result.loss_curve else float("nan")
    last_val = result.val_curve[-1][1] if result.val_curve else float("nan")
    print(f"trained {train_cfg.iterations} iterations; final loss {last_loss:.4f}; "
          f"val DSC {last_val:.4f}; checkpoint at {ckpt_path}")
    return 0


def cmd_eval(args):
    flat = resolve_config(args)
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = restore_model(args.checkpoint)
    dataset = _open_dataset(flat)
    _check_dataset_matches_model(dataset, model.config)
    cases = dataset.eval_cases(args.split)
    if not cases:
        raise DataError(f"split {args.split!r} has no cases")
    report = evaluate_case_set(cases, model.predict_slice)
    print(report.to_text())
    if args.out:
        write_resolved_config(args.out, flat)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(report.to_text() + "\n")
    return 0


def cmd_ablate(args):
    flat = resolve_config(args)
    model_cfg = model_config_from(flat)
    train_cfg = train_config_from(flat)
    spec = phantom_spec_from(flat)
    out = args.out
    if out:
        write_resolved_config(out, flat)
    rows = run_ablation(args.axis, model_cfg, train_cfg, spec,
                        num_cases=int(flat["data.cases"]), out_dir=out)
    header = f"{'value':>10} {'seq_len':>8} {'mean_dsc':>10} {'mean_hd_mm':>12}"
    print(header)
    for r in rows:
        print(f"{r['value']!s:>10} {r['seq_length']:>8} {r['mean_dsc']:>10.4f} "
              f"{r['mean_hd_mm']:>12.3f}")
    return 0


_PALETTE = [
    (255, 80, 80), (80, 220, 80), (100, 140, 255), (255, 220, 90),
    (230, 110, 230), (90, 220, 220), (255, 160, 60), (160, 160, 255),
]


def write_overlay_ppm(path, image2d, labels2d):
    """Binary portable pixmap: grayscale intensity with labels tinted on top."""
    lo, hi = float(image2d.min()), float(image2d.max())
    gray = np.zeros_like(image2d) if hi == lo else (image2d - lo) / (hi - lo)
    gray = (gray * 255).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1).astype(np.float32)
    for label in np.unique(labels2d):
        if label == 0:
            continue
        color = np.array(_PALETTE[(int(label) - 1) % len(_PALETTE)], dtype=np.float32)
        rgb[labels2d == label] = 0.5 * rgb[labels2d == label] + 0.5 * color
    rgb = rgb.clip(0, 255).astype(np.uint8)
    h, w = labels2d.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def cmd_predict(args):
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.volume):
        raise DataError(f"volume not found: {args.volume}")
    out = _require_out(args)
    model, _ = restore_model(args.checkpoint)
    image, spacing = load_image_volume(args.volume)
    if image.shape[1:] != (model.config.height, model.config.width):
        raise ConfigError(
            f"volume slices are {image.shape[1]}x{image.shape[2]} but the model "
            f"expects {model.config.height}x{model.config.width}"
        )
    os.makedirs(out, exist_ok=True)
    pred = predict_volume(image, model.predict_slice, spacing, model.config.num_classes)
    pred_path = os.path.join(out, "pred_labels.tuvol")
    save_volume(pred_path, pred.voxels.astype(np.uint8), spacing, pred.num_classes)
    print(f"wrote {pred_path}")
    if args.overlay:
        for z in range(image.shape[0]):
            write_overlay_ppm(os.path.join(out, f"overlay_z{z:03d}.ppm"),
                              image[z], pred.voxels[z])
        print(f"wrote {image.shape[0]} overlay slices")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_shared(p):
    p.add_argument("--config", help="flat KEY=VALUE config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--seed", type=int, help="override train.seed and data.seed")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="tunet",
                                     description="desk-scale transformer U-Net segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a phantom dataset")
    _add_shared(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_shared(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("axis", choices=("skips", "patch", "resolution", "scale"))
    _add_shared(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("predict", help="predict labels for an intensity volume")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--overlay", action="store_true", help="also write per-slice overlays")
    p.set_defaults(fn=cmd_predict)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
