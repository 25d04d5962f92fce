"""Synthetic multi-age volumes with exact ground truth.

Each phantom holds a porous ellipsoidal shell (a capsule analogue) whose
wall thickens and closes up with age, plus a few vertical tubes. A tube is
visible over most of the volume but only the age-dependent segment
``[0.15 + 0.1 a, 0.45 + 0.1 a] * Z`` is labelled, so deciding whether a tube
pixel is foreground needs the slice position and the age, which is exactly
the information the conditioning modules supply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import DatasetManifest, VolumeRecord, save_manifest, write_mask, write_slice
from .errors import BadSpec

MUTATIONS = {
    # kind: (ages, thickness factor, porosity shift, ellipsoid axis factors (z, y, x))
    "A": ((0,), 1.4, 0.1, (1.0, 1.12, 0.9)),
    "B": ((1, 3), 0.7, 0.0, (0.9, 0.9, 1.1)),
    "C": ((2,), 1.3, 0.1, (1.1, 1.0, 1.12)),
}
# zero-shot report column order: (kind, age)
MUTATION_COLUMNS = (("A", 0), ("B", 1), ("C", 2), ("B", 3))


@dataclass
class PhantomSpec:
    age_index: int = 0
    seed: int = 0
    Z: int = 64
    H: int = 96
    W: int = 96
    shell_thickness: float | None = None
    porosity: float | None = None
    noise_sigma: float = 0.05
    annotated_fraction: float = 0.026
    axis_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    precursor_level: float = 1.0  # unlabelled tube intensity; 1.0 hides the label window
    hole_block: int = 6

    def __post_init__(self):
        if self.shell_thickness is None:
            self.shell_thickness = 1.0 + self.age_index
        if self.porosity is None:
            self.porosity = 0.3 - 0.08 * self.age_index
        self.validate()

    def validate(self) -> None:
        if min(self.Z, self.H, self.W) < 8:
            raise BadSpec(f"phantom dimensions must be at least 8, got {(self.Z, self.H, self.W)}")
        if not 0 <= self.age_index <= 3:
            raise BadSpec(f"age_index must lie in 0..3, got {self.age_index}")
        if not 0 <= self.porosity < 1:
            raise BadSpec(f"porosity must lie in [0, 1), got {self.porosity}")
        if self.shell_thickness < 1:
            raise BadSpec(f"shell thickness must be >= 1, got {self.shell_thickness}")
        if not 0 < self.annotated_fraction <= 1:
            raise BadSpec(f"annotated_fraction must lie in (0, 1], got {self.annotated_fraction}")
        if self.noise_sigma < 0:
            raise BadSpec("noise_sigma must be non-negative")


def _shell(spec: PhantomSpec, grid) -> np.ndarray:
    zz, yy, xx = grid
    Z, H, W = spec.Z, spec.H, spec.W
    axes = np.array([0.42 * Z, 0.36 * H, 0.38 * W]) * np.asarray(spec.axis_scale)
    d = [(zz - Z / 2) / axes[0], (yy - H / 2) / axes[1], (xx - W / 2) / axes[2]]
    rho = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2) + 1e-9
    # first-order distance to the rho = 1 surface in voxels
    grad = np.sqrt(sum((di / ai) ** 2 for di, ai in zip(d, axes))) / rho
    dist = (rho - 1.0) / np.maximum(grad, 1e-9)
    return np.abs(dist) <= spec.shell_thickness / 2


def _holes(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    k = spec.hole_block
    coarse = rng.random((math.ceil(spec.Z / k), math.ceil(spec.H / k), math.ceil(spec.W / k))) < spec.porosity
    fine = coarse.repeat(k, 0).repeat(k, 1).repeat(k, 2)
    return fine[: spec.Z, : spec.H, : spec.W]


TUBE_OFFSETS = ((-0.16, -0.17), (-0.16, 0.17), (0.16, -0.17), (0.16, 0.17))


def labelled_z_range(age_index: int, Z: int) -> tuple[float, float]:
    return (0.15 + 0.1 * age_index) * Z, (0.45 + 0.1 * age_index) * Z


def _tubes(spec: PhantomSpec, grid) -> tuple[np.ndarray, np.ndarray]:
    zz, yy, xx = grid
    Z, H, W = spec.Z, spec.H, spec.W
    radius = 1.0 + 0.5 * spec.age_index
    ay, ax = spec.axis_scale[1], spec.axis_scale[2]
    cross = np.zeros((1, H, W), dtype=bool)
    for oy, ox in TUBE_OFFSETS:
        cy, cx = H / 2 + oy * H * ay, W / 2 + ox * W * ax
        cross |= (yy[:1] - cy) ** 2 + (xx[:1] - cx) ** 2 <= radius**2
    z_lo, z_hi = labelled_z_range(spec.age_index, Z)
    zc = zz[:, :1, :1]
    visible = cross & (zc >= 0.1 * Z) & (zc < 0.9 * Z)
    labelled = cross & (zc >= z_lo) & (zc < z_hi)
    return labelled, visible & ~labelled


def annotated_indices(Z: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Evenly spread slice indices over the central 60% of the volume, with a small random offset."""
    n = max(1, math.ceil(fraction * Z))
    centres = np.linspace(0.2 * Z, 0.8 * Z, n) if n > 1 else np.array([0.5 * Z])
    spacing = 0.6 * Z / n
    offsets = rng.uniform(-spacing / 4, spacing / 4, size=n)
    idx = np.clip(np.round(centres + offsets), 0, Z - 1).astype(int)
    return sorted(set(int(i) for i in idx))


def render_volume(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Image volume in [0, 1], binary mask volume, and the annotated slice list."""
    rng = np.random.default_rng(spec.seed)
    grid = np.ogrid[: spec.Z, : spec.H, : spec.W]
    grid = [g.astype(np.float64) for g in grid]
    shell = _shell(spec, grid) & ~_holes(spec, rng)
    tubes, precursor = _tubes(spec, grid)
    mask = shell | tubes
    signal = mask.astype(np.float64) + spec.precursor_level * (precursor & ~mask)
    signal = ndimage.gaussian_filter(signal, sigma=(0.6, 1.0, 1.0))
    zz, yy, xx = grid
    background = 0.08 + 0.12 * yy / spec.H + 0.05 * xx / spec.W + 0.04 * zz / spec.Z
    image = background + 0.65 * signal + rng.normal(0.0, spec.noise_sigma, size=mask.shape)
    image = np.clip(image, 0.0, 1.0)
    annotated = annotated_indices(spec.Z, spec.annotated_fraction, rng)
    return image, mask.astype(np.uint8), annotated


def generate_volume(
    spec: PhantomSpec, out_dir: str | Path, volume_id: str | None = None, cohort_tag: str = "C57"
) -> VolumeRecord:
    """Render a phantom and write its slices and annotated masks under ``out_dir/volume_id``."""
    spec.validate()
    volume_id = volume_id or f"{cohort_tag.lower()}_a{spec.age_index}_s{spec.seed}"
    image, mask, annotated = render_volume(spec)
    vdir = Path(out_dir) / volume_id
    slice_paths = [write_slice(image[z], vdir / f"img_{z:04d}.png") for z in range(spec.Z)]
    masks = {z: write_mask(mask[z], vdir / f"mask_{z:04d}.png") for z in annotated}
    return VolumeRecord(
        volume_id=volume_id,
        age_index=spec.age_index,
        Z=spec.Z,
        H=spec.H,
        W=spec.W,
        slice_paths=slice_paths,
        annotated=masks,
        cohort_tag=cohort_tag,
    )


def volume_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def generate_cohort(
    out_dir: str | Path,
    num_volumes_per_age: int = 2,
    seed: int = 0,
    test_annotated_fraction: float = 0.1,
    **spec_kwargs,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write train/test phantom cohorts and their manifests under ``out_dir``."""
    if num_volumes_per_age < 1:
        raise BadSpec("need at least one volume per age")
    out_dir = Path(out_dir)
    manifests = []
    for split_id, split in enumerate(("train", "test")):
        volumes = []
        for age in range(4):
            for n in range(num_volumes_per_age):
                kwargs = dict(spec_kwargs)
                if split == "test":
                    kwargs["annotated_fraction"] = test_annotated_fraction
                spec = PhantomSpec(age_index=age, seed=volume_seed(seed, split_id, age, n), **kwargs)
                vid = f"c57_{split}_a{age}_{n:02d}"
                volumes.append(generate_volume(spec, out_dir / "volumes", vid, "C57"))
        manifest = DatasetManifest(name=f"phantom-{split}", volumes=volumes, split=split)
        save_manifest(manifest, out_dir / f"{split}.json")
        manifests.append(manifest)
    return manifests[0], manifests[1]


def mutate(spec: PhantomSpec, kind: str) -> PhantomSpec:
    if kind not in MUTATIONS:
        raise BadSpec(f"unknown mutation kind {kind!r}; choose from {sorted(MUTATIONS)}")
    _, thick, poro, axes = MUTATIONS[kind]
    return replace(
        spec,
        shell_thickness=max(1.0, spec.shell_thickness * thick),
        porosity=min(0.95, spec.porosity + poro),
        axis_scale=tuple(a * b for a, b in zip(spec.axis_scale, axes)),
    )


def generate_mutation(
    out_dir: str | Path,
    base_seed: int,
    kind: str,
    num_volumes_per_age: int = 1,
    annotated_fraction: float = 0.1,
    **spec_kwargs,
) -> DatasetManifest:
    """Write an unseen 'mutation' cohort: the base generator with shifted morphology."""
    if kind not in MUTATIONS:
        raise BadSpec(f"unknown mutation kind {kind!r}; choose from {sorted(MUTATIONS)}")
    out_dir = Path(out_dir)
    ages = MUTATIONS[kind][0]
    volumes = []
    for age in ages:
        for n in range(num_volumes_per_age):
            base = PhantomSpec(
                age_index=age,
                seed=volume_seed(base_seed, 2, age, n),
                annotated_fraction=annotated_fraction,
                **spec_kwargs,
            )
            vid = f"mut{kind.lower()}_a{age}_{n:02d}"
            volumes.append(generate_volume(mutate(base, kind), out_dir / "volumes", vid, f"Mut{kind}"))
    manifest = DatasetManifest(name=f"phantom-mut{kind}", volumes=volumes, split="test")
    save_manifest(manifest, out_dir / f"mut{kind}.json")
    return manifest
