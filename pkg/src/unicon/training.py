"""Joint multi-age training, tiled per-age evaluation and zero-shot transfer."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .backbones import (
    BackboneSpec,
    CondSpec,
    SegModel,
    attach_conditioning,
    build_backbone,
    build_model,
    collate,
    model_inputs,
)
from .data import DatasetManifest, VolumeRecord, load_annotation, load_slice, save_prediction
from .errors import NaNLoss, NoAnnotatedSlices, UnknownAge
from .hdsc import coord_extents
from .objectives import LossConfig, aggregate_by_age, dice_score, loss_from_logits
from .sampling import (
    CropSample,
    bezier_intensity,
    relative_center,
    sample_crop,
    spatial_augment,
    tile_plan,
)

log = logging.getLogger(__name__)

AGE_SAMPLING = ("uniform_age", "uniform_volume")


@dataclass
class TrainConfig:
    epochs: int = 700
    steps_per_epoch: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-3
    seed: int = 0
    age_sampling: str = "uniform_age"
    crop_h: int = 256
    crop_w: int = 256
    jitter_max: float = 0.2
    symmetric_jitter: bool = False
    intensity_prob: float = 0.5
    spatial_augment: bool = True
    val_fraction: float = 0.1
    val_every: int = 0
    tile_overlap: float = 0.25
    alpha: float = 0.5
    dice_smooth: float = 1e-5
    ce_literal: bool = False
    mixed_precision: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if self.age_sampling not in AGE_SAMPLING:
            raise ValueError(f"age_sampling must be one of {AGE_SAMPLING}, got {self.age_sampling!r}")
        for name in ("epochs", "steps_per_epoch", "batch_size", "crop_h", "crop_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def crop_size(self) -> tuple[int, int]:
        return self.crop_h, self.crop_w

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.dice_smooth, self.ce_literal)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def cosine_factor(step: int, total: int) -> float:
    """Learning-rate multiplier: 1 at step 0, 0 at the final step ``total - 1``."""
    if total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


def step_seed(seed: int, step: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


def make_optimizer(model: SegModel, cfg: TrainConfig):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    total = cfg.total_steps
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_factor(s, total))
    return opt, sched


# -- data plumbing -----------------------------------------------------------


def split_validation(manifest: DatasetManifest, fraction: float, seed: int):
    """Hold out a fraction of annotated (volume, slice) pairs; every volume keeps one training slice."""
    pairs = [(rec.volume_id, z) for rec in manifest.volumes for z in rec.annotated_slices]
    n_val = int(round(fraction * len(pairs)))
    rng = np.random.default_rng(step_seed(seed, 0, 99))
    held: set = set()
    remaining = {rec.volume_id: len(rec.annotated) for rec in manifest.volumes}
    for i in rng.permutation(len(pairs)):
        if len(held) >= n_val:
            break
        vid, z = pairs[i]
        if remaining[vid] > 1:
            held.add((vid, z))
            remaining[vid] -= 1
    train_recs, val_recs = [], []
    for rec in manifest.volumes:
        keep = {z: p for z, p in rec.annotated.items() if (rec.volume_id, z) not in held}
        out = {z: p for z, p in rec.annotated.items() if (rec.volume_id, z) in held}
        train_recs.append(replace(rec, annotated=keep))
        if out:
            val_recs.append(replace(rec, annotated=out))
    return train_recs, val_recs


class BatchSampler:
    """Batches as a pure function of (seed, step)."""

    def __init__(self, volumes: list[VolumeRecord], cfg: TrainConfig):
        if not volumes or any(not rec.annotated for rec in volumes):
            raise NoAnnotatedSlices("every training volume needs at least one annotated slice")
        self.volumes = volumes
        self.cfg = cfg
        self.by_age: dict[int, list[VolumeRecord]] = {}
        for rec in volumes:
            self.by_age.setdefault(rec.age_index, []).append(rec)
        self.ages = sorted(self.by_age)
        self.cache: dict = {}

    def pick_volume(self, rng: np.random.Generator) -> VolumeRecord:
        if self.cfg.age_sampling == "uniform_age":
            group = self.by_age[self.ages[int(rng.integers(len(self.ages)))]]
            return group[int(rng.integers(len(group)))]
        return self.volumes[int(rng.integers(len(self.volumes)))]

    def sample(self, step: int) -> list[CropSample]:
        cfg = self.cfg
        rng = np.random.default_rng(step_seed(cfg.seed, step))
        out = []
        for _ in range(cfg.batch_size):
            rec = self.pick_volume(rng)
            s = sample_crop(rec, cfg.crop_size, rng, cfg.jitter_max, cfg.symmetric_jitter, True, self.cache)
            if cfg.intensity_prob > 0 and rng.random() < cfg.intensity_prob:
                s = replace(s, image=bezier_intensity(s.image, rng))
            if cfg.spatial_augment:
                s = spatial_augment(s, rng)
            out.append(s)
        return out


# -- checkpoints -------------------------------------------------------------


def model_config(model: SegModel) -> dict:
    return {"backbone": asdict(model.spec), "conditioning": asdict(model.cond), "seed": getattr(model, "seed", 0)}


def model_from_config(cfg: dict) -> SegModel:
    spec = BackboneSpec(**{**cfg["backbone"], "stage_channels": tuple(cfg["backbone"]["stage_channels"])})
    model = build_backbone(spec, cfg.get("seed", 0))
    cond = CondSpec(**cfg["conditioning"])
    if cond.family != "none" or cond.hdsc != "none":
        attach_conditioning(model, cond)
    return model


def save_checkpoint(path, model, opt, sched, step: int, cfg: TrainConfig, best_val=None, cohorts=()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "model": model.state_dict(),
        "model_config": model_config(model),
        "optimizer": opt.state_dict() if opt is not None else None,
        "scheduler": sched.state_dict() if sched is not None else None,
        "step": step,
        "train_config": asdict(cfg),
        "rng": {"torch": torch.get_rng_state(), "seed": cfg.seed},
        "best_val": best_val,
        "cohorts": sorted(cohorts),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[SegModel, dict]:
    state = torch.load(path, map_location=map_location, weights_only=False)
    model = model_from_config(state["model_config"])
    model.load_state_dict(state["model"])
    return model, state


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: SegModel
    log: list[dict] = field(default_factory=list)
    final_path: Path | None = None
    best_path: Path | None = None
    best_val: float | None = None


def write_metric_log(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "dice_val"])
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in w.fieldnames})
    return path


def read_metric_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "step": int(r["step"]),
            "lr": float(r["lr"]),
            "loss": float(r["loss"]),
            "dice_val": float(r["dice_val"]) if r["dice_val"] else None,
        }
        for r in rows
    ]


def train(
    manifest: DatasetManifest,
    model: SegModel,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train ``model`` on the annotated slices of ``manifest``.

    Each step's batch, augmentations and dropout masks derive from
    ``(cfg.seed, step)``, so a run resumed from a checkpoint follows the same
    trajectory as an uninterrupted one. ``stop_after`` ends the run early
    (after that many total steps) without changing the schedule.
    """
    if manifest.split != "train":
        log.warning("training on a manifest marked %r", manifest.split)
    device = torch.device(cfg.device)
    model.to(device)
    train_recs, val_recs = split_validation(manifest, cfg.val_fraction, cfg.seed)
    sampler = BatchSampler(train_recs, cfg)
    opt, sched = make_optimizer(model, cfg)
    dtype = next(model.parameters()).dtype
    start, best_val, rows = 0, None, []
    if resume is not None:
        state = resume if isinstance(resume, dict) else torch.load(resume, map_location=device, weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        start, best_val = state["step"], state.get("best_val")
        rows = list(state.get("log", []))
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model=model, best_val=best_val)
    cohorts = manifest.cohorts
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)

    for step in range(start, end):
        model.train()
        batch = collate(sampler.sample(step), dtype=dtype, device=device)
        torch.manual_seed(step_seed(cfg.seed, step, 1))
        lr = opt.param_groups[0]["lr"]
        with torch.autocast(device.type, dtype=torch.bfloat16, enabled=cfg.mixed_precision):
            logits = model(*model_inputs(batch))
        loss = loss_from_logits(logits.to(dtype), batch["mask"], cfg.loss)
        if not torch.isfinite(loss):
            raise NaNLoss(f"non-finite loss at step {step} (batch seed {step_seed(cfg.seed, step)})")
        opt.zero_grad(set_to_none=False)
        loss.backward()
        opt.step()
        sched.step()
        row = {"step": step, "lr": lr, "loss": float(loss.detach()), "dice_val": None}

        last = step == end - 1
        if val_recs and ((cfg.val_every and (step + 1) % cfg.val_every == 0) or last):
            scores = evaluate_slices(val_recs, model, cfg.crop_size, cfg.tile_overlap)
            val = float(np.mean([s["dice"] for s in scores]))
            row["dice_val"] = val
            if best_val is None or val > best_val:
                best_val = val
                if out_dir is not None:
                    result.best_path = save_checkpoint(out_dir / "best.pt", model, opt, sched, step + 1, cfg, val, cohorts)
        rows.append(row)
        log.debug("step %d lr %.3g loss %.4f", step, lr, row["loss"])

    result.log = rows
    result.best_val = best_val
    if out_dir is not None:
        result.final_path = save_checkpoint(out_dir / "final.pt", model, opt, sched, end, cfg, best_val, cohorts)
        # keep the log with the checkpoint so a resumed run writes a complete file
        state = torch.load(result.final_path, weights_only=False)
        state["log"] = rows
        torch.save(state, result.final_path)
        write_metric_log(rows, out_dir / "metrics.csv")
    return result


# -- evaluation --------------------------------------------------------------


@torch.no_grad()
def predict_slice(
    model: SegModel,
    record: VolumeRecord,
    z: int,
    image: np.ndarray,
    crop_size: tuple[int, int],
    overlap: float = 0.25,
    batch_size: int = 16,
) -> np.ndarray:
    """Foreground probability [H, W] from overlapping tiles with averaged logits.

    Every tile is conditioned on its own un-jittered relative centre and
    coordinate planes.
    """
    model.eval()
    param = next(model.parameters())
    boxes = tile_plan(record, z, crop_size, overlap)
    acc = np.zeros((2, record.H, record.W))
    count = np.zeros((record.H, record.W))
    for i in range(0, len(boxes), batch_size):
        chunk = boxes[i : i + batch_size]
        tiles = torch.as_tensor(
            np.stack([image[b.t : b.b, b.l : b.r] for b in chunk])[:, None], dtype=param.dtype, device=param.device
        )
        ages = torch.full((len(chunk),), record.age_index, dtype=torch.long, device=param.device)
        centers = torch.as_tensor(
            np.array([relative_center(b, record.H, record.W, record.Z) for b in chunk]), dtype=param.dtype, device=param.device
        )
        extents = torch.as_tensor(
            np.array([coord_extents(b, record.H, record.W, record.Z) for b in chunk]), dtype=param.dtype, device=param.device
        )
        logits = model(tiles, ages, centers, extents).double().cpu().numpy()
        for b, lg in zip(chunk, logits):
            acc[:, b.t : b.b, b.l : b.r] += lg
            count[b.t : b.b, b.l : b.r] += 1
    mean = acc / count
    # softmax foreground probability of the averaged logits
    return 1.0 / (1.0 + np.exp(mean[0] - mean[1]))


def evaluate_slices(
    volumes: list[VolumeRecord],
    model: SegModel,
    crop_size: tuple[int, int],
    overlap: float = 0.25,
    max_age: int | None = None,
    out_dir=None,
) -> list[dict]:
    scores = []
    for rec in volumes:
        if max_age is not None and not 0 <= rec.age_index < max_age:
            raise UnknownAge(f"{rec.volume_id}: age index {rec.age_index} outside the trained range 0..{max_age - 1}")
        for z in rec.annotated_slices:
            prob = predict_slice(model, rec, z, load_slice(rec, z), crop_size, overlap)
            pred = (prob >= 0.5).astype(np.uint8)
            if out_dir is not None:
                save_prediction(rec.volume_id, z, pred, out_dir)
            scores.append(
                {
                    "volume_id": rec.volume_id,
                    "cohort": rec.cohort_tag,
                    "age": rec.age_index,
                    "z": z,
                    "dice": dice_score(pred, load_annotation(rec, z)),
                }
            )
    return scores


@dataclass
class EvalReport:
    per_slice: list[dict]
    by_age: dict

    @property
    def avg(self) -> float:
        return self.by_age["avg"]


def _num_ages(model: SegModel) -> int:
    return model.cond.num_ages


def evaluate(
    manifest: DatasetManifest,
    model: SegModel,
    crop_size: tuple[int, int] = (256, 256),
    tile_overlap: float = 0.25,
    require_all_ages: bool = True,
    out_dir=None,
) -> EvalReport:
    """Tiled inference on every annotated slice, Dice per slice, mean per age."""
    scores = evaluate_slices(manifest.volumes, model, crop_size, tile_overlap, _num_ages(model), out_dir)
    by_age = aggregate_by_age(
        [(s["age"], s["dice"]) for s in scores], _num_ages(model) if require_all_ages else None
    )
    return EvalReport(scores, by_age)


def zero_shot_eval(checkpoint, unseen: DatasetManifest, crop_size=None, tile_overlap=None) -> EvalReport:
    """Evaluate a trained checkpoint on an unseen cohort without any update.

    ``checkpoint`` is a path, a loaded checkpoint dict, or a model. The report
    is keyed by ``(cohort_tag, age)``.
    """
    state = {}
    if isinstance(checkpoint, SegModel):
        model = checkpoint
    elif isinstance(checkpoint, dict):
        state = checkpoint
        model = model_from_config(state["model_config"])
        model.load_state_dict(state["model"])
    else:
        model, state = load_checkpoint(checkpoint)
    tc = state.get("train_config", {})
    crop_size = crop_size or (tc.get("crop_h", 256), tc.get("crop_w", 256))
    tile_overlap = tile_overlap if tile_overlap is not None else tc.get("tile_overlap", 0.25)
    overlap_cohorts = set(state.get("cohorts", ())) & unseen.cohorts
    if overlap_cohorts:
        log.warning("cohorts %s were also used for training", sorted(overlap_cohorts))
    scores = evaluate_slices(unseen.volumes, model, crop_size, tile_overlap, _num_ages(model))
    by_group = aggregate_by_age([((s["cohort"], s["age"]), s["dice"]) for s in scores], None)
    return EvalReport(scores, by_group)


# -- ablation ----------------------------------------------------------------


def ablate(
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    backbone_spec: BackboneSpec,
    modes: list[str],
    cfg: TrainConfig,
    out_dir=None,
) -> list[dict]:
    """Train and evaluate one model per conditioning mode with a shared seed."""
    rows = []
    for mode in modes:
        model = build_model(backbone_spec, mode, cfg.seed)
        sub = Path(out_dir) / mode.replace("+", "_") if out_dir is not None else None
        train(train_manifest, model, cfg, sub)
        report = evaluate(test_manifest, model, cfg.crop_size, cfg.tile_overlap)
        row = {"model": mode, "params": model.num_parameters()}
        row.update({a: report.by_age[a] for a in range(4)})
        row["avg"] = report.avg
        rows.append(row)
    return rows
