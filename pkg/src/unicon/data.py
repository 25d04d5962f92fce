"""Dataset representation, on-disk formats and prediction persistence.

A dataset is described by one JSON manifest::

    {
      "name": "c57-train",
      "split": "train",
      "volumes": [
        {
          "volume_id": "c57_e135_00",
          "age_index": 0,
          "cohort_tag": "C57",
          "shape": [Z, H, W],
          "slice_paths": ["c57_e135_00/img_0000.png", ...],
          "annotated_slices": [{"z": 12, "mask": "c57_e135_00/mask_0012.png"}]
        }
      ]
    }

Relative paths are resolved against the manifest's directory. Slices are
single-channel 8/16-bit PNG or TIFF images; masks are 8-bit PNGs holding
{0, 255} (``{0, 1}`` is accepted as well).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadAgeIndex,
    DecodeError,
    IndexOutOfRange,
    MissingFile,
    NoAnnotatedSlices,
    ShapeMismatch,
    UniconError,
)

NUM_AGES = 4
SPLITS = ("train", "test")


@dataclass
class VolumeRecord:
    volume_id: str
    age_index: int
    Z: int
    H: int
    W: int
    slice_paths: list[Path]
    # z -> mask path, kept sorted by z
    annotated: dict[int, Path] = field(default_factory=dict)
    cohort_tag: str = "C57"

    @property
    def annotated_slices(self) -> list[int]:
        return sorted(self.annotated)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.H, self.W, self.Z


@dataclass
class DatasetManifest:
    name: str
    volumes: list[VolumeRecord]
    split: str = "train"
    path: Path | None = None

    def by_age(self) -> dict[int, list[VolumeRecord]]:
        groups: dict[int, list[VolumeRecord]] = {}
        for rec in self.volumes:
            groups.setdefault(rec.age_index, []).append(rec)
        return dict(sorted(groups.items()))

    @property
    def cohorts(self) -> set[str]:
        return {rec.cohort_tag for rec in self.volumes}


def _image_size(path: Path) -> tuple[int, int]:
    """Return (H, W) from the image header without decoding pixel data."""
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            w, h = im.size
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return h, w


def _decode(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DecodeError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr


def validate_volume(rec: VolumeRecord, check_files: bool = True) -> None:
    if not 0 <= rec.age_index < NUM_AGES:
        raise BadAgeIndex(f"{rec.volume_id}: age_index {rec.age_index} outside 0..{NUM_AGES - 1}")
    if min(rec.Z, rec.H, rec.W) < 1:
        raise ShapeMismatch(f"{rec.volume_id}: non-positive dimensions {(rec.Z, rec.H, rec.W)}")
    if len(rec.slice_paths) != rec.Z:
        raise ShapeMismatch(f"{rec.volume_id}: {len(rec.slice_paths)} slice paths for Z={rec.Z}")
    bad = [z for z in rec.annotated if not 0 <= z < rec.Z]
    if bad:
        raise IndexOutOfRange(f"{rec.volume_id}: annotated slices {bad} outside [0, {rec.Z})")
    if not check_files:
        return
    paths = list(rec.slice_paths) + [rec.annotated[z] for z in rec.annotated_slices]
    for p in paths:
        hw = _image_size(p)
        if hw != (rec.H, rec.W):
            raise ShapeMismatch(f"{p}: decodes to {hw}, expected {(rec.H, rec.W)}")


def _record_from_json(entry: dict, root: Path) -> VolumeRecord:
    try:
        Z, H, W = (int(v) for v in entry["shape"])
        rec = VolumeRecord(
            volume_id=str(entry["volume_id"]),
            age_index=int(entry["age_index"]),
            Z=Z,
            H=H,
            W=W,
            slice_paths=[root / p for p in entry["slice_paths"]],
            annotated={int(a["z"]): root / a["mask"] for a in entry.get("annotated_slices", [])},
            cohort_tag=str(entry.get("cohort_tag", "C57")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise UniconError(f"malformed volume entry: {exc!r}") from exc
    return rec


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Read and validate a dataset manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UniconError(f"{path}: invalid JSON ({exc})") from exc
    root = path.parent
    split = doc.get("split", "train")
    if split not in SPLITS:
        raise UniconError(f"{path}: split must be one of {SPLITS}, got {split!r}")
    volumes = [_record_from_json(v, root) for v in doc.get("volumes", [])]
    seen = set()
    for rec in volumes:
        if rec.volume_id in seen:
            raise UniconError(f"{path}: duplicate volume_id {rec.volume_id!r}")
        seen.add(rec.volume_id)
        validate_volume(rec, check_files=check_files)
        if split == "train" and not rec.annotated:
            raise NoAnnotatedSlices(f"{rec.volume_id}: train volumes need at least one annotated slice")
    return DatasetManifest(name=str(doc.get("name", path.stem)), volumes=volumes, split=split, path=path)


def _rel(p: Path, root: Path) -> str:
    return Path(os.path.relpath(p, root)).as_posix()


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    root = path.parent
    doc = {
        "name": manifest.name,
        "split": manifest.split,
        "volumes": [
            {
                "volume_id": rec.volume_id,
                "age_index": rec.age_index,
                "cohort_tag": rec.cohort_tag,
                "shape": [rec.Z, rec.H, rec.W],
                "slice_paths": [_rel(p, root) for p in rec.slice_paths],
                "annotated_slices": [
                    {"z": z, "mask": _rel(rec.annotated[z], root)} for z in rec.annotated_slices
                ],
            }
            for rec in manifest.volumes
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))
    manifest.path = path
    return path


def load_slice(record: VolumeRecord, z: int) -> np.ndarray:
    """Decode slice ``z`` and rescale intensities to [0, 1] by the format maximum."""
    if not 0 <= z < record.Z:
        raise IndexOutOfRange(f"{record.volume_id}: slice {z} outside [0, {record.Z})")
    arr = _decode(record.slice_paths[z])
    if arr.shape != (record.H, record.W):
        raise ShapeMismatch(f"{record.slice_paths[z]}: shape {arr.shape}, expected {(record.H, record.W)}")
    if arr.dtype == np.uint16:
        scale = 65535.0
    elif arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype.kind == "f":
        scale = 1.0
    else:
        # PIL decodes some 16-bit files as int32 ("I" mode)
        scale = 65535.0
    return arr.astype(np.float64) / scale


def load_mask(path: str | os.PathLike) -> np.ndarray:
    arr = _decode(Path(path))
    return (arr > 0).astype(np.uint8)


def load_annotation(record: VolumeRecord, z: int) -> np.ndarray:
    if z not in record.annotated:
        raise IndexOutOfRange(f"{record.volume_id}: slice {z} is not annotated")
    mask = load_mask(record.annotated[z])
    if mask.shape != (record.H, record.W):
        raise ShapeMismatch(f"{record.annotated[z]}: shape {mask.shape}, expected {(record.H, record.W)}")
    return mask


def write_slice(image: np.ndarray, path: str | os.PathLike) -> Path:
    """Write a [0, 1] float image as a 16-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)
    return path


def write_mask(mask: np.ndarray, path: str | os.PathLike) -> Path:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be in {0, 1}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.astype(np.uint8) * 255)).save(path)
    return path


def save_prediction(volume_id: str, z: int, mask: np.ndarray, out_dir: str | os.PathLike) -> Path:
    """Persist a binary prediction as ``<out_dir>/<volume_id>/pred_<z>.png``."""
    path = Path(out_dir) / volume_id / f"pred_{z:04d}.png"
    return write_mask(mask, path)
