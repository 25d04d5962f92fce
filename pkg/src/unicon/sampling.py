"""Crop sampling, relative crop coordinates, augmentation and tile plans."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import VolumeRecord, load_annotation, load_slice
from .errors import CropTooLarge, NoAnnotatedSlices


@dataclass(frozen=True)
class CropBox:
    """Half-open crop window ``[t, b) x [l, r)`` on slice ``z``."""

    t: int
    b: int
    l: int  # noqa: E741
    r: int
    z: int

    @property
    def size(self) -> tuple[int, int]:
        return self.b - self.t, self.r - self.l

    def validate(self, H: int, W: int, Z: int | None = None) -> None:
        if not (0 <= self.t < self.b <= H and 0 <= self.l < self.r <= W):
            raise ValueError(f"invalid crop box {self} for slice {H}x{W}")
        if Z is not None and not 0 <= self.z < Z:
            raise ValueError(f"slice index {self.z} outside [0, {Z})")


@dataclass
class CropSample:
    image: np.ndarray
    mask: np.ndarray | None
    box: CropBox
    rel_center: tuple[float, float, float]
    age_index: int
    dims: tuple[int, int, int]  # (H, W, Z) of the source volume
    volume_id: str = ""


def relative_center(box: CropBox, H: int, W: int, Z: int) -> tuple[float, float, float]:
    """Crop centre normalised by the full volume size: ((l+r)/2W, (t+b)/2H, z/Z)."""
    box.validate(H, W, Z)
    return (box.l + box.r) / (2 * W), (box.t + box.b) / (2 * H), box.z / Z


def jitter_center(
    center: tuple[float, float, float],
    rng: np.random.Generator,
    jitter_max: float = 0.2,
    symmetric: bool = False,
) -> tuple[float, float, float]:
    """Perturb each coordinate by an independent uniform offset and clamp to [0, 1].

    Offsets are drawn from ``[0, jitter_max]``, or ``[-jitter_max, jitter_max]``
    when ``symmetric`` is set.
    """
    low = -jitter_max if symmetric else 0.0
    offsets = rng.uniform(low, jitter_max, size=3) if jitter_max > 0 else np.zeros(3)
    out = np.clip(np.asarray(center, dtype=np.float64) + offsets, 0.0, 1.0)
    return tuple(float(v) for v in out)


def _check_crop(H: int, W: int, crop_size: tuple[int, int]) -> tuple[int, int]:
    h, w = crop_size
    if h < 1 or w < 1:
        raise ValueError(f"crop size must be positive, got {crop_size}")
    if h > H or w > W:
        raise CropTooLarge(f"crop {h}x{w} exceeds slice {H}x{W}")
    return h, w


def random_box(H: int, W: int, z: int, crop_size: tuple[int, int], rng: np.random.Generator) -> CropBox:
    h, w = _check_crop(H, W, crop_size)
    t = int(rng.integers(0, H - h + 1))
    l = int(rng.integers(0, W - w + 1))  # noqa: E741
    return CropBox(t, t + h, l, l + w, z)


def sample_crop(
    record: VolumeRecord,
    crop_size: tuple[int, int],
    rng: np.random.Generator,
    jitter_max: float = 0.2,
    symmetric_jitter: bool = False,
    train: bool = True,
    cache: dict | None = None,
) -> CropSample:
    """Draw a random crop from a uniformly chosen annotated slice of ``record``.

    ``cache`` maps ``(volume_id, z)`` to ``(image, mask)`` and is filled
    lazily so repeated draws do not decode the same file twice.
    """
    slices = record.annotated_slices
    if not slices:
        raise NoAnnotatedSlices(f"{record.volume_id} has no annotated slices")
    _check_crop(record.H, record.W, crop_size)
    z = slices[int(rng.integers(len(slices)))]
    box = random_box(record.H, record.W, z, crop_size, rng)

    key = (record.volume_id, z)
    if cache is not None and key in cache:
        image, mask = cache[key]
    else:
        image, mask = load_slice(record, z), load_annotation(record, z)
        if cache is not None:
            cache[key] = (image, mask)

    center = relative_center(box, record.H, record.W, record.Z)
    if train and jitter_max > 0:
        center = jitter_center(center, rng, jitter_max, symmetric_jitter)
    return CropSample(
        image=image[box.t : box.b, box.l : box.r].copy(),
        mask=mask[box.t : box.b, box.l : box.r].copy(),
        box=box,
        rel_center=center,
        age_index=record.age_index,
        dims=(record.H, record.W, record.Z),
        volume_id=record.volume_id,
    )


# -- intensity augmentation -------------------------------------------------


def _bernstein_nonneg(a: float, b: float, c: float) -> bool:
    # (1-t)^2 a + 2t(1-t) b + t^2 c >= 0 on [0, 1]
    return a >= 0 and c >= 0 and (b >= 0 or b * b <= a * c)


def bezier_is_monotone(p1: tuple[float, float], p2: tuple[float, float]) -> bool:
    """Whether the cubic through (0,0), p1, p2, (1,1) is non-decreasing in both x and y."""
    for k in (0, 1):
        if not _bernstein_nonneg(p1[k], p2[k] - p1[k], 1.0 - p2[k]):
            return False
    return True


def bezier_point(t: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """One coordinate of the cubic Bézier with endpoints 0 and 1."""
    s = 1.0 - t
    return 3 * s * s * t * p1 + 3 * s * t * t * p2 + t**3


def sample_bezier_controls(rng: np.random.Generator, max_tries: int = 1000):
    for _ in range(max_tries):
        p1 = tuple(rng.uniform(0.0, 1.0, size=2))
        p2 = tuple(rng.uniform(0.0, 1.0, size=2))
        if bezier_is_monotone(p1, p2):
            return p1, p2
    return (1 / 3, 1 / 3), (2 / 3, 2 / 3)


def bezier_intensity(
    image: np.ndarray,
    rng: np.random.Generator | None = None,
    controls: tuple[tuple[float, float], tuple[float, float]] | None = None,
    iterations: int = 48,
) -> np.ndarray:
    """Remap intensities through a monotone cubic Bézier curve.

    The curve parameter for each input value is recovered by bisection on the
    x-coordinate, which is valid because the curve is non-decreasing.
    """
    if controls is None:
        if rng is None:
            raise ValueError("either rng or controls is required")
        controls = sample_bezier_controls(rng)
    (x1, y1), (x2, y2) = controls
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        below = bezier_point(mid, x1, x2) < x
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    out = np.clip(bezier_point(t, y1, y2), 0.0, 1.0)
    out[x <= 0.0] = 0.0
    out[x >= 1.0] = 1.0
    return out


# -- spatial augmentation ---------------------------------------------------


def apply_spatial(arr: np.ndarray, k: int, flip_v: bool, flip_h: bool) -> np.ndarray:
    out = np.rot90(arr, k)
    if flip_v:
        out = out[::-1, :]
    if flip_h:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def spatial_augment(sample: CropSample, rng: np.random.Generator) -> CropSample:
    """Apply one random 90-degree rotation and axis flips jointly to image and mask.

    Non-square crops only rotate by 0 or 180 degrees so the shape is kept.
    """
    h, w = sample.image.shape
    k = int(rng.integers(4)) if h == w else 2 * int(rng.integers(2))
    flip_v, flip_h = bool(rng.integers(2)), bool(rng.integers(2))
    mask = None if sample.mask is None else apply_spatial(sample.mask, k, flip_v, flip_h)
    return replace(sample, image=apply_spatial(sample.image, k, flip_v, flip_h), mask=mask)


# -- inference tiling -------------------------------------------------------


def _starts(extent: int, crop: int, stride: int) -> list[int]:
    starts = list(range(0, extent - crop + 1, stride))
    if starts[-1] + crop < extent:
        starts.append(extent - crop)
    return starts


def tile_boxes(H: int, W: int, z: int, crop_size: tuple[int, int], overlap: float = 0.25) -> list[CropBox]:
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    h, w = _check_crop(H, W, crop_size)
    sy = max(1, math.floor(h * (1 - overlap)))
    sx = max(1, math.floor(w * (1 - overlap)))
    return [CropBox(t, t + h, l, l + w, z) for t in _starts(H, h, sy) for l in _starts(W, w, sx)]  # noqa: E741


def tile_plan(record: VolumeRecord, z: int, crop_size: tuple[int, int], overlap: float = 0.25) -> list[CropBox]:
    """Deterministic row-major tiling of slice ``z`` whose union covers the slice."""
    return tile_boxes(record.H, record.W, z, crop_size, overlap)
