"""Volume-of-interest detection by marching over signed-distance levels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

from .grid import VoxelGrid, min_active_sdf
from .superquadric import Superquadric

_CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThresholdSchedule:
    """Geometric sequence ``t1, alpha*t1, alpha^2*t1, ...`` up to ``termination``."""

    t1: float
    alpha: float
    termination: float

    def __post_init__(self):
        if not self.t1 < 0:
            raise ValueError(f"t1 must be negative, got {self.t1}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.termination < 0:
            raise ValueError(f"termination must be negative, got {self.termination}")

    def __len__(self) -> int:
        if self.t1 > self.termination:
            return 0
        return int(math.floor(math.log(self.termination / self.t1) / math.log(self.alpha))) + 1

    def __iter__(self) -> Iterator[float]:
        t = self.t1
        while t <= self.termination:
            yield t
            t *= self.alpha

    def thresholds(self) -> list[float]:
        return list(self)


def schedule(grid: VoxelGrid, alpha: float, termination_ratio: float) -> Optional[ThresholdSchedule]:
    """Threshold schedule for the current grid state, ``None`` without interior."""
    t1 = min_active_sdf(grid)
    if t1 is None:
        return None
    if not math.isfinite(grid.truncation):
        raise ValueError("grid must be truncated before marching")
    return ThresholdSchedule(t1, alpha, -termination_ratio * grid.truncation)


@dataclass
class Voi:
    """One connected set of sub-threshold voxels."""

    voxels: np.ndarray   # (n, 3) voxel indices, sorted by linear index
    linear: np.ndarray   # matching x-fastest linear indices
    lower: np.ndarray    # world bounding box, padded by half a voxel
    upper: np.ndarray
    centroid: np.ndarray

    @property
    def size(self) -> int:
        return int(self.linear.size)

    @property
    def lengths(self) -> np.ndarray:
        return self.upper - self.lower

    def signature(self) -> bytes:
        return self.linear.tobytes()


def _make_voi(grid: VoxelGrid, linear: np.ndarray) -> Voi:
    ijk = grid.unravel(linear)
    pts = grid.world(ijk)
    half = 0.5 * grid.spacing
    return Voi(ijk, linear, pts.min(axis=0) - half, pts.max(axis=0) + half, pts.mean(axis=0))


def connected_components(grid: VoxelGrid, threshold: float) -> list[Voi]:
    """26-connected components of active voxels with value <= threshold.

    Components are ordered by their smallest linear voxel index.
    """
    mask = grid.active & (grid.values <= threshold)
    labels, n = ndimage.label(mask, structure=_CONNECTIVITY_26)
    if n == 0:
        return []
    flat = labels.ravel(order="F")
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
    groups = np.split(idx, starts[1:])
    groups.sort(key=lambda g: int(g[0]))
    return [_make_voi(grid, g) for g in groups]


def filter_vois(comps: list[Voi], n_c: int) -> list[Voi]:
    if n_c < 1:
        raise ValueError(f"n_c must be >= 1, got {n_c}")
    return [c for c in comps if c.size >= n_c]


def init_primitive(voi: Voi, grid: VoxelGrid, gamma: float,
                   scale_min: Optional[float] = None) -> Superquadric:
    """Ellipsoid sized ``gamma`` times the VOI bounding box.

    The center is the interior active voxel nearest to the VOI centroid, so a
    non-convex VOI never starts the primitive in empty space.
    """
    if voi.size == 0:
        raise InitializationError("empty VOI")
    if scale_min is None:
        scale_min = 0.5 * grid.spacing
    interior = grid.active & (grid.values <= 0.0)
    lin = np.flatnonzero(interior.ravel(order="F"))
    if lin.size == 0:
        raise InitializationError("grid has no active interior voxel to anchor the primitive")
    pts = grid.world(grid.unravel(lin))
    nearest = int(np.argmin(np.sum((pts - voi.centroid) ** 2, axis=1)))
    scale = np.maximum(gamma * voi.lengths, scale_min)
    return Superquadric(1.0, 1.0, scale, (0.0, 0.0, 0.0), pts[nearest])
