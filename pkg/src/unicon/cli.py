"""Command-line entry point.

Every command reads an optional flat ``key = value`` config file (``[section]``
headers are allowed and only group keys), applies ``key=value`` overrides
from the command line, and writes the fully resolved config next to its
outputs as ``config.resolved.toml``. Passing that file back through
``--config`` reruns the command with identical settings.
"""

from __future__ import annotations

import argparse
import ast
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .backbones import MODES, BackboneSpec, build_model
from .data import DatasetManifest, load_manifest, load_slice, save_prediction
from .errors import UniconError, UsageError
from .phantom import MUTATIONS, generate_cohort, generate_mutation
from .report import (
    DICE_COLUMNS,
    ZERO_SHOT_COLUMNS,
    dice_row,
    rows_from_ablation,
    rows_from_zero_shot,
    write_report,
)
from .training import TrainConfig, ablate, evaluate, load_checkpoint, predict_slice, train, zero_shot_eval

log = logging.getLogger("unicon")

COMMANDS = ("gen-phantom", "train", "eval", "zero-shot", "ablate", "predict")

# section -> {key: default}
SECTIONS = {
    "data": {
        "train_manifest": "",
        "test_manifest": "",
        "unseen_manifests": [],
        "checkpoint": "",
        "checkpoints": [],
    },
    "model": {
        "encoder_kind": "res2",
        "stage_channels": [],
        "dropout": 0.1,
        "mode": "consa+hdsc",
        "modes": ["none", "film", "consa_age", "consa_age_loc", "hdsc_decoder", "consa+hdsc"],
    },
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "phantom": {
        "volumes_per_age": 2,
        "annotated_fraction": 0.08,
        "test_annotated_fraction": 0.1,
        "mutation_volumes_per_age": 1,
        "shape": [64, 96, 96],
    },
}
DEFAULTS = {k: v for section in SECTIONS.values() for k, v in section.items()}
PATH_KEYS = ("train_manifest", "test_manifest", "unseen_manifests", "checkpoint", "checkpoints")

# settings gen-phantom writes for a desk-scale run on the generated data
DESK_SCALE = {
    "encoder_kind": "res2",
    "stage_channels": [16, 32, 64, 128],
    "epochs": 1,
    "steps_per_epoch": 1000,
    "batch_size": 8,
    "crop_h": 64,
    "crop_w": 64,
    "val_fraction": 0.0,
}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    # paths in a config file are relative to the file
    for key in PATH_KEYS:
        if key in out:
            out[key] = _rebase(out[key], path.parent)
    return out


def _rebase(value, base: Path):
    if isinstance(value, list):
        return [_rebase(v, base) for v in value]
    if not value:
        return value
    p = Path(value)
    return str(p if p.is_absolute() else (base / p))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, str):
        return repr(value)
    return repr(value)


def write_config(cfg: dict, path, relative_to: Path | None = None) -> Path:
    """Sectioned ``key = value`` file; known keys grouped, path values relative when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = relative_to or path.parent
    lines = []
    for section, keys in SECTIONS.items():
        present = [k for k in keys if k in cfg]
        if not present:
            continue
        lines.append(f"[{section}]")
        for k in present:
            v = cfg[k]
            if k in PATH_KEYS:
                v = [_relative(x, base) for x in v] if isinstance(v, list) else _relative(v, base)
            lines.append(f"{k} = {_format(v)}")
        lines.append("")
    path.write_text("\n".join(lines))
    return path


def _relative(value: str, base: Path) -> str:
    if not value:
        return value
    return os.path.relpath(Path(value).resolve(), Path(base).resolve())


def parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config(args.config))
    cfg.update(parse_overrides(args.overrides))
    for name in ("seed", "checkpoint", "train_manifest", "test_manifest", "mode", "modes", "unseen_manifests", "checkpoints"):
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for key in ("modes", "unseen_manifests", "checkpoints", "stage_channels", "shape"):
        if isinstance(cfg[key], str):
            cfg[key] = [parse_value(v) for v in cfg[key].split(",") if v.strip()]
        cfg[key] = list(cfg[key]) if isinstance(cfg[key], (list, tuple)) else [cfg[key]]
    for mode in [cfg["mode"], *cfg["modes"]]:
        if mode not in MODES:
            raise UsageError(f"unknown conditioning mode {mode!r}; choose from {', '.join(MODES)}")
    return cfg


def output_dir(args) -> Path:
    out = args.out or os.environ.get("UNICON_OUTPUT_DIR") or "unicon_out"
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg)


def backbone(cfg: dict) -> BackboneSpec:
    return BackboneSpec(cfg["encoder_kind"], tuple(cfg["stage_channels"]), dropout=cfg["dropout"])


def _require(cfg: dict, key: str) -> str:
    if not cfg[key]:
        raise UsageError(f"missing required setting {key!r} (config file, override or flag)")
    return cfg[key]


def _write_eval_report(name: str, model, report, out: Path, stem: str = "dice") -> None:
    rows = [dice_row(name, model.num_parameters(), report.by_age)]
    paths = write_report(rows, out, stem, DICE_COLUMNS)
    sys.stdout.write(paths["txt"].read_text())


# -- commands ----------------------------------------------------------------


def cmd_gen_phantom(cfg: dict, out: Path) -> None:
    seed = int(cfg["seed"])
    Z, H, W = (int(v) for v in cfg["shape"])
    dims = dict(Z=Z, H=H, W=W)
    generate_cohort(
        out,
        int(cfg["volumes_per_age"]),
        seed=seed,
        test_annotated_fraction=float(cfg["test_annotated_fraction"]),
        annotated_fraction=float(cfg["annotated_fraction"]),
        **dims,
    )
    for kind in sorted(MUTATIONS):
        generate_mutation(
            out, seed, kind, int(cfg["mutation_volumes_per_age"]), float(cfg["test_annotated_fraction"]), **dims
        )
    desk = dict(cfg)
    desk.update(DESK_SCALE)
    desk["train_manifest"] = str(out / "train.json")
    desk["test_manifest"] = str(out / "test.json")
    desk["unseen_manifests"] = [str(out / f"mut{k}.json") for k in sorted(MUTATIONS)]
    write_config(desk, out / "unicon.toml")
    print(f"phantom data and desk-scale config written to {out}")


def cmd_train(cfg: dict, out: Path) -> None:
    manifest = load_manifest(_require(cfg, "train_manifest"))
    tc = train_config(cfg)
    model = build_model(backbone(cfg), cfg["mode"], tc.seed)
    result = train(manifest, model, tc, out)
    print(f"trained {cfg['mode']} for {tc.total_steps} steps; final loss {result.log[-1]['loss']:.4f}")
    if cfg["test_manifest"]:
        report = evaluate(load_manifest(cfg["test_manifest"]), model, tc.crop_size, tc.tile_overlap)
        _write_eval_report(cfg["mode"], model, report, out)


def _load(cfg: dict):
    model, state = load_checkpoint(_require(cfg, "checkpoint"))
    tc = state.get("train_config", {})
    return model, (tc.get("crop_h", cfg["crop_h"]), tc.get("crop_w", cfg["crop_w"]))


def cmd_eval(cfg: dict, out: Path) -> None:
    model, crop = _load(cfg)
    report = evaluate(load_manifest(_require(cfg, "test_manifest")), model, crop, cfg["tile_overlap"], out_dir=None)
    _write_eval_report(Path(cfg["checkpoint"]).parent.name or "model", model, report, out)


def cmd_zero_shot(cfg: dict, out: Path) -> None:
    checkpoints = cfg["checkpoints"] or [_require(cfg, "checkpoint")]
    manifests = [load_manifest(p) for p in _require(cfg, "unseen_manifests")]
    unseen = DatasetManifest("unseen", [v for m in manifests for v in m.volumes], "test")
    results = []
    for ckpt in checkpoints:
        model, state = load_checkpoint(ckpt)
        report = zero_shot_eval(state, unseen, tile_overlap=cfg["tile_overlap"])
        results.append((Path(ckpt).parent.name or Path(ckpt).stem, model.num_parameters(), report.by_age))
    rows = rows_from_zero_shot(results)
    paths = write_report(rows, out, "zero_shot", ZERO_SHOT_COLUMNS, "zero-shot transfer")
    sys.stdout.write(paths["txt"].read_text())


def cmd_ablate(cfg: dict, out: Path) -> None:
    train_m = load_manifest(_require(cfg, "train_manifest"))
    test_m = load_manifest(_require(cfg, "test_manifest"))
    results = ablate(train_m, test_m, backbone(cfg), cfg["modes"], train_config(cfg), out)
    paths = write_report(rows_from_ablation(results), out, "ablation", DICE_COLUMNS, "ablation")
    sys.stdout.write(paths["txt"].read_text())


def cmd_predict(cfg: dict, out: Path) -> None:
    model, crop = _load(cfg)
    manifest = load_manifest(_require(cfg, "test_manifest"))
    n = 0
    for rec in manifest.volumes:
        for z in range(rec.Z):
            prob = predict_slice(model, rec, z, load_slice(rec, z), crop, cfg["tile_overlap"])
            save_prediction(rec.volume_id, z, (prob >= 0.5).astype(np.uint8), out / "predictions")
            n += 1
    print(f"wrote {n} predicted slices under {out / 'predictions'}")


HANDLERS = {
    "gen-phantom": cmd_gen_phantom,
    "train": cmd_train,
    "eval": cmd_eval,
    "zero-shot": cmd_zero_shot,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unicon", description="Age/location-conditioned segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory (default: $UNICON_OUTPUT_DIR or ./unicon_out)")
        p.add_argument("--seed", type=int)
        p.add_argument("overrides", nargs="*", metavar="key=value")
        if name in ("train", "ablate"):
            p.add_argument("--train-manifest", dest="train_manifest")
        if name in ("train", "eval", "ablate", "predict"):
            p.add_argument("--test-manifest", dest="test_manifest")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint")
        if name == "train":
            p.add_argument("--mode")
        if name == "ablate":
            p.add_argument("--modes", help="comma-separated conditioning modes")
        if name == "zero-shot":
            p.add_argument("--checkpoints", help="comma-separated checkpoint files")
            p.add_argument("--unseen", dest="unseen_manifests", help="comma-separated unseen-cohort manifests")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = output_dir(args)
        handler = logging.FileHandler(out / "run.log", mode="w")
        logging.getLogger().addHandler(handler)
        try:
            write_config(cfg, out / "config.resolved.toml")
            HANDLERS[args.command](cfg, out)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
    except UsageError as exc:
        print(f"unicon: usage error: {exc}", file=sys.stderr)
        return 2
    except (UniconError, ValueError) as exc:
        print(f"unicon: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
