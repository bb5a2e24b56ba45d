"""Regular voxel grid holding a discrete signed distance field.

Arrays are indexed ``values[i, j, k]`` with shape ``(nx, ny, nz)``.  The
linear voxel index used for ordering and on disk is x-fastest,
``i + nx * (j + ny * k)``, i.e. Fortran order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .superquadric import Superquadric, contains


@dataclass
class VoxelGrid:
    dims: tuple[int, int, int]
    origin: np.ndarray
    spacing: float
    values: np.ndarray
    active: Optional[np.ndarray] = None
    truncation: float = math.inf
    _coords: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.spacing = float(self.spacing)
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        values = np.asarray(self.values, dtype=float)
        if values.size != self.n_voxels:
            raise ValueError(f"{values.size} values for dims {self.dims}")
        if values.shape != self.dims:
            values = values.reshape(self.dims, order="F")
        self.values = values
        if self.active is None:
            self.active = np.ones(self.dims, dtype=bool)
        else:
            active = np.asarray(self.active, dtype=bool)
            if active.size != self.n_voxels:
                raise ValueError("active mask does not match dims")
            self.active = active.reshape(self.dims, order="F") if active.shape != self.dims else active
        self.truncation = float(self.truncation)
        self._coords = tuple(self.origin[a] + self.spacing * np.arange(self.dims[a])
                             for a in range(3))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self) -> np.ndarray:
        """World position of the last voxel."""
        return self.origin + self.spacing * (np.array(self.dims) - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.origin))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self._coords[axis]

    def linear_index(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        nx, ny, _ = self.dims
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def unravel(self, linear) -> np.ndarray:
        i, j, k = np.unravel_index(np.asarray(linear, dtype=np.int64), self.dims, order="F")
        return np.stack([i, j, k], axis=-1)

    def world(self, ijk) -> np.ndarray:
        """Vectorised index -> world mapping (no range check)."""
        return self.origin + self.spacing * np.asarray(ijk, dtype=float)

    def box_slices(self, center, radius: float) -> tuple[slice, slice, slice]:
        """Index slices covering the axis-aligned cube ``center +- radius``."""
        center = np.asarray(center, dtype=float)
        lo = np.floor((center - radius - self.origin) / self.spacing).astype(int)
        hi = np.ceil((center + radius - self.origin) / self.spacing).astype(int) + 1
        lo = np.clip(lo, 0, self.dims)
        hi = np.clip(hi, 0, self.dims)
        return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))

    def block_points(self, slices) -> np.ndarray:
        """World points of a sub-block, shape ``(bx, by, bz, 3)``."""
        gx, gy, gz = np.meshgrid(self._coords[0][slices[0]], self._coords[1][slices[1]],
                                 self._coords[2][slices[2]], indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def points(self) -> np.ndarray:
        return self.block_points((slice(None),) * 3)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.origin.copy(), self.spacing, self.values.copy(),
                         self.active.copy(), self.truncation)


def index_to_world(grid: VoxelGrid, ijk) -> np.ndarray:
    ijk = tuple(int(v) for v in ijk)
    for v, n in zip(ijk, grid.dims):
        if not 0 <= v < n:
            raise IndexError(f"voxel index {ijk} out of range for dims {grid.dims}")
    return grid.world(ijk)


def truncate(grid: VoxelGrid, t: float) -> VoxelGrid:
    """Return a copy with values clamped to ``[-t, t]``; the mask is kept."""
    if not t > 0:
        raise ValueError(f"truncation must be positive, got {t}")
    return VoxelGrid(grid.dims, grid.origin.copy(), grid.spacing,
                     np.clip(grid.values, -t, t), grid.active.copy(), t)


def min_active_sdf(grid: VoxelGrid) -> Optional[float]:
    """Smallest active value, or ``None`` when no active voxel is interior."""
    vals = grid.values[grid.active]
    if vals.size == 0:
        return None
    m = float(vals.min())
    return m if m < 0.0 else None


def primitive_block(grid: VoxelGrid, prim: Superquadric, margin: float = 0.0):
    """Slices and world points of the block that can hold ``prim`` (+margin)."""
    sl = grid.box_slices(prim.translation, prim.bounding_radius() + margin)
    return sl, grid.block_points(sl)


def deactivate_fitted(grid: VoxelGrid, prim: Superquadric) -> int:
    """Switch off active voxels that are interior to both target and primitive."""
    sl, pts = primitive_block(grid, prim)
    if pts.size == 0:
        return 0
    cand = grid.active[sl] & (grid.values[sl] <= 0.0)
    if not cand.any():
        return 0
    hit = np.zeros_like(cand)
    hit[cand] = contains(prim, pts[cand])
    grid.active[sl] &= ~hit
    return int(hit.sum())
