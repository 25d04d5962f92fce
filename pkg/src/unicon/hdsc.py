"""Hierarchical dense spatial coordinates.

Every decoder stage receives three extra channels describing where the crop
sits inside its volume: the relative column index (i), row index (j) and
slice index (k). At the crop's native resolution the planes are

    i[:, n] = (l + n) / W,   j[m, :] = (t + m) / H,   k = z / Z

and at coarser stage resolutions they are the corner-aligned linear
resampling of those ramps, which is again a linear ramp between the same
end values, so the planes are generated analytically per stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError
from .sampling import CropBox


@dataclass
class CoordinateGrid:
    i_plane: np.ndarray
    j_plane: np.ndarray
    k_plane: np.ndarray
    source_box: CropBox
    resolution: tuple[int, int]

    def stack(self) -> np.ndarray:
        return np.stack([self.i_plane, self.j_plane, self.k_plane])


def coord_extents(box: CropBox, H: int, W: int, Z: int) -> tuple[float, float, float, float, float]:
    """End values (i0, i1, j0, j1, k) of the coordinate ramps for ``box``."""
    return box.l / W, (box.r - 1) / W, box.t / H, (box.b - 1) / H, box.z / Z


def _ramp(start: float, stop: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([start])
    return np.linspace(start, stop, n)


def dense_coords(box: CropBox, H: int, W: int, Z: int, resolution: tuple[int, int] | None = None) -> CoordinateGrid:
    box.validate(H, W, Z)
    if resolution is None:
        resolution = box.size
    hp, wp = resolution
    if hp < 1 or wp < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    i0, i1, j0, j1, k = coord_extents(box, H, W, Z)
    cols = _ramp(i0, i1, wp)
    rows = _ramp(j0, j1, hp)
    return CoordinateGrid(
        i_plane=np.broadcast_to(cols, (hp, wp)).copy(),
        j_plane=np.broadcast_to(rows[:, None], (hp, wp)).copy(),
        k_plane=np.full((hp, wp), k),
        source_box=box,
        resolution=(hp, wp),
    )


def concat_coords(features: np.ndarray, grid: CoordinateGrid) -> np.ndarray:
    """Append the i, j, k planes after the feature channels."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[1:] != tuple(grid.resolution):
        raise ShapeError(f"features {features.shape} do not match grid resolution {grid.resolution}")
    planes = grid.stack().astype(features.dtype, copy=False)
    return np.concatenate([features, planes], axis=0)


def hdsc_plan(
    resolutions: list[tuple[int, int]], box: CropBox, dims: tuple[int, int, int]
) -> list[CoordinateGrid]:
    """One coordinate grid per decoder stage, coarse to fine."""
    H, W, Z = dims
    return [dense_coords(box, H, W, Z, res) for res in resolutions]


# -- batched torch version used inside models -----------------------------


def _ramp_t(start: torch.Tensor, stop: torch.Tensor, n: int) -> torch.Tensor:
    # start, stop: [B] -> [B, n]
    if n == 1:
        return start[:, None]
    frac = torch.arange(n, dtype=start.dtype, device=start.device) / (n - 1)
    return start[:, None] + (stop - start)[:, None] * frac


def coord_planes(extents: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Coordinate planes [B, 3, h, w] from per-sample ramp extents [B, 5]."""
    if extents.ndim != 2 or extents.shape[1] != 5:
        raise ShapeError(f"extents must be [B, 5], got {tuple(extents.shape)}")
    cols = _ramp_t(extents[:, 0], extents[:, 1], w)
    rows = _ramp_t(extents[:, 2], extents[:, 3], h)
    B = extents.shape[0]
    i_plane = cols[:, None, :].expand(B, h, w)
    j_plane = rows[:, :, None].expand(B, h, w)
    k_plane = extents[:, 4, None, None].expand(B, h, w)
    return torch.stack([i_plane, j_plane, k_plane], dim=1)


def concat_coord_planes(features: torch.Tensor, extents: torch.Tensor) -> torch.Tensor:
    _, _, h, w = features.shape
    planes = coord_planes(extents.to(features.dtype), h, w)
    return torch.cat([features, planes], dim=1)
