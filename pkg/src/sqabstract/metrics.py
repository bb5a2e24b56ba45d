"""Chamfer-L1 and lattice IoU between an abstraction and a reference shape."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .grid import VoxelGrid
from .sdf_io import TriangleMesh, _RAY_JITTER, ray_parity
from .superquadric import Superquadric, log_implicit, sample_surface

MAX_POINTS = 60_000


class EmptyPointSetError(ValueError):
    pass


class EmptyUnionWarning(UserWarning):
    pass


@dataclass
class PointSet:
    points: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


def downsample(points: np.ndarray, max_points: int, seed: int) -> np.ndarray:
    """Uniform random subset of at most ``max_points`` rows, original order kept."""
    if len(points) <= max_points:
        return points
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(points), size=max_points, replace=False))
    return points[idx]


def predicted_surface_points(prims: Sequence[Superquadric], spacing: float,
                             max_points: int = MAX_POINTS, seed: int = 0) -> PointSet:
    """Surface samples of the union of primitives.

    Samples that fall strictly inside another primitive are dropped, so the
    result approximates the outer surface of the union.
    """
    if not prims:
        raise EmptyPointSetError("no primitives")
    kept = []
    for k, prim in enumerate(prims):
        pts = sample_surface(prim, spacing)
        mask = np.ones(len(pts), dtype=bool)
        for l, other in enumerate(prims):
            if l != k:
                mask &= log_implicit(other, pts) >= 0.0
        kept.append(pts[mask])
    pts = np.concatenate(kept)
    if len(pts) == 0:
        raise EmptyPointSetError("every surface sample lies inside another primitive")
    return PointSet(downsample(pts, max_points, seed), seed)


def sdf_surface_points(grid: VoxelGrid, max_points: int = MAX_POINTS, seed: int = 0) -> PointSet:
    """Zero level set of a grid SDF, extracted with marching cubes."""
    from skimage.measure import marching_cubes

    vals = grid.values
    if not (vals.min() < 0.0 < vals.max()):
        raise EmptyPointSetError("SDF grid has no zero crossing")
    verts, _, _, _ = marching_cubes(vals, level=0.0, spacing=(grid.spacing,) * 3)
    return PointSet(downsample(verts + grid.origin, max_points, seed), seed)


def mesh_surface_points(mesh: TriangleMesh, n_points: int = MAX_POINTS, seed: int = 0) -> PointSet:
    """Area-weighted uniform samples on the triangles of a mesh."""
    a, b, c = mesh.corners()
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if not area.sum() > 0:
        raise EmptyPointSetError("mesh has zero area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(area), size=n_points, p=area / area.sum())
    u, v = rng.random(n_points), rng.random(n_points)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    pts = a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])
    return PointSet(pts, seed)


def _as_points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointSet) else np.asarray(x, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyPointSetError("empty point set")
    return pts


def chamfer_l1(x, y) -> float:
    """Mean L1 nearest-neighbour distance from y to x plus from x to y."""
    xp, yp = _as_points(x), _as_points(y)
    d_yx, _ = cKDTree(xp).query(yp, k=1, p=1)
    d_xy, _ = cKDTree(yp).query(xp, k=1, p=1)
    return float(d_yx.mean() + d_xy.mean())


# ---------------------------------------------------------------------------
# Occupancy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Cell-centred sample lattice, ``n`` points per axis inside ``bounds``."""

    lower: np.ndarray
    upper: np.ndarray
    n: int

    def axis_coords(self, axis: int) -> np.ndarray:
        step = (self.upper[axis] - self.lower[axis]) / self.n
        return self.lower[axis] + step * (np.arange(self.n) + 0.5)

    @property
    def spacing(self) -> float:
        return float(np.min(self.upper - self.lower)) / self.n

    def points(self) -> np.ndarray:
        g = np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, 3)


class OccupancyOracle:
    """Inside/outside predicate over world points.

    ``kind`` is one of ``"primitives"``, ``"sdf"``, ``"mesh"`` or ``"callable"``.
    """

    def __init__(self, kind: str, predicate: Callable[[np.ndarray], np.ndarray],
                 lattice_fn: Optional[Callable[[Lattice], np.ndarray]] = None,
                 bounds: Optional[tuple[np.ndarray, np.ndarray]] = None):
        self.kind = kind
        self._predicate = predicate
        self._lattice_fn = lattice_fn
        self.bounds = bounds

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.asarray(self._predicate(pts), dtype=bool)

    def on_lattice(self, lattice: Lattice) -> np.ndarray:
        if self._lattice_fn is not None:
            return self._lattice_fn(lattice)
        return self(lattice.points()).reshape((lattice.n,) * 3)

    @classmethod
    def from_callable(cls, fn, bounds=None) -> "OccupancyOracle":
        return cls("callable", fn, bounds=bounds)

    @classmethod
    def from_primitives(cls, prims: Sequence[Superquadric]) -> "OccupancyOracle":
        prims = list(prims)

        def predicate(pts):
            inside = np.zeros(len(pts), dtype=bool)
            for p in prims:
                inside |= log_implicit(p, pts) <= 0.0
            return inside

        def on_lattice(lat: Lattice):
            axes = [lat.axis_coords(a) for a in range(3)]
            occ = np.zeros((lat.n,) * 3, dtype=bool)
            for p in prims:
                r = p.bounding_radius()
                sl = tuple(slice(int(np.searchsorted(ax, c - r)), int(np.searchsorted(ax, c + r, "right")))
                           for ax, c in zip(axes, p.translation))
                if any(s.stop <= s.start for s in sl):
                    continue
                g = np.meshgrid(*(ax[s] for ax, s in zip(axes, sl)), indexing="ij")
                pts = np.stack(g, axis=-1)
                occ[sl] |= (log_implicit(p, pts.reshape(-1, 3)) <= 0.0).reshape(pts.shape[:3])
            return occ

        bounds = None
        if prims:
            c = np.array([p.translation for p in prims])
            r = np.array([p.bounding_radius() for p in prims])[:, None]
            bounds = ((c - r).min(axis=0), (c + r).max(axis=0))
        return cls("primitives", predicate, on_lattice, bounds)

    @classmethod
    def from_sdf_grid(cls, grid: VoxelGrid) -> "OccupancyOracle":
        """Trilinear interpolation of the grid, inside where ``d <= 0``."""
        axes = tuple(grid.axis_coords(a) for a in range(3))
        interp = RegularGridInterpolator(axes, grid.values, method="linear",
                                         bounds_error=False, fill_value=math.inf)
        return cls("sdf", lambda pts: interp(pts) <= 0.0, bounds=(grid.origin, grid.upper))

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh) -> "OccupancyOracle":
        """Crossing parity of +x rays; the mesh must be watertight."""

        def on_lattice(lat: Lattice):
            return ray_parity(mesh, lat, axis=0)

        def predicate(pts):
            return _point_parity(mesh, pts)

        v = mesh.vertices
        return cls("mesh", predicate, on_lattice, (v.min(axis=0), v.max(axis=0)))


def _point_parity(mesh: TriangleMesh, pts: np.ndarray, chunk: int = 1_000_000) -> np.ndarray:
    a, b, c = mesh.corners()
    ext = float(np.max(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))
    py = pts[:, 1] + _RAY_JITTER[0] * 1e-2 * ext
    pz = pts[:, 2] + _RAY_JITTER[1] * 1e-2 * ext
    out = np.zeros(len(pts), dtype=bool)
    step = max(1, chunk // max(1, len(a)))
    for s in range(0, len(pts), step):
        u, v, w = py[s:s + step, None], pz[s:s + step, None], pts[s:s + step, 0][:, None]
        e_a = (c[:, 1] - b[:, 1]) * (v - b[:, 2]) - (c[:, 2] - b[:, 2]) * (u - b[:, 1])
        e_b = (a[:, 1] - c[:, 1]) * (v - c[:, 2]) - (a[:, 2] - c[:, 2]) * (u - c[:, 1])
        e_c = (b[:, 1] - a[:, 1]) * (v - a[:, 2]) - (b[:, 2] - a[:, 2]) * (u - a[:, 1])
        inside = ((e_a > 0) & (e_b > 0) & (e_c > 0)) | ((e_a < 0) & (e_b < 0) & (e_c < 0))
        with np.errstate(invalid="ignore", divide="ignore"):
            hit = (e_a * a[:, 0] + e_b * b[:, 0] + e_c * c[:, 0]) / (e_a + e_b + e_c)
        out[s:s + step] = (np.sum(inside & (hit > w), axis=1) % 2).astype(bool)
    return out


def iou(pred: OccupancyOracle, truth: OccupancyOracle, bounds, grid_n: int = 100) -> float:
    """Volumetric IoU estimated on a ``grid_n``^3 cell-centred lattice.

    An empty union gives 0 and an :class:`EmptyUnionWarning`.
    """
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in bounds)
    if not np.all(hi > lo):
        raise ValueError("empty bounds")
    lat = Lattice(lo, hi, grid_n)
    a, b = pred.on_lattice(lat), truth.on_lattice(lat)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        warnings.warn("both shapes are empty inside the bounds", EmptyUnionWarning)
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def union_bounds(*oracles: OccupancyOracle, pad: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around every oracle's bounds, padded by a fraction."""
    boxes = [o.bounds for o in oracles if o.bounds is not None]
    if not boxes:
        raise ValueError("no oracle carries bounds")
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    margin = pad * float(np.max(hi - lo))
    return lo - margin, hi + margin


def report(pred_points: PointSet, truth_points: PointSet, iou_value: float, grid_n: int) -> dict:
    return {
        "chamfer_l1": chamfer_l1(pred_points, truth_points),
        "iou": float(iou_value),
        "n_pred_points": len(pred_points),
        "n_gt_points": len(truth_points),
        "grid_n": int(grid_n),
    }
