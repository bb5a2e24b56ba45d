"""Reading, writing and generating discrete SDFs.

Binary layout (little-endian)::

    0   4s  magic  b"MPSF"
    4   u32 version (1)
    8   3u32 nx, ny, nz
    20  3f64 origin
    44  f64  spacing
    52  nx*ny*nz f32 values, x fastest

The text variant starts with a line ``nx ny nz ox oy oz h`` followed by one
value per line in the same order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import VoxelGrid
from .superquadric import Superquadric, approx_sdf

log = logging.getLogger(__name__)

MAGIC = b"MPSF"
VERSION = 1
_HEADER = struct.Struct("<4sI3I3dd")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """Malformed SDF or mesh file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class MeshNotWatertight(ValueError):
    pass


@dataclass(frozen=True)
class SdfFileHeader:
    magic: bytes
    version: int
    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    spacing: float

    def validate(self) -> None:
        if self.magic != MAGIC:
            raise FormatError(f"bad magic {self.magic!r}", 0)
        if self.version != VERSION:
            raise FormatError(f"unsupported version {self.version}", 4)
        if min(self.dims) < 2:
            raise FormatError(f"dims must all be >= 2, got {self.dims}", 8)
        if not self.spacing > 0:
            raise FormatError(f"spacing must be positive, got {self.spacing}", 44)


def _check_grid_spec(dims, spacing) -> tuple[int, int, int]:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"dims must be three counts >= 2, got {dims}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    return dims


# ---------------------------------------------------------------------------
# Binary / text formats
# ---------------------------------------------------------------------------

def store_sdf(grid: VoxelGrid, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, *grid.dims, *grid.origin, grid.spacing)
    payload = np.asarray(grid.values.ravel(order="F"), dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_header(data: bytes) -> SdfFileHeader:
    if len(data) < HEADER_SIZE:
        raise FormatError(f"file shorter than the {HEADER_SIZE}-byte header", len(data))
    magic, version, nx, ny, nz, ox, oy, oz, h = _HEADER.unpack_from(data, 0)
    header = SdfFileHeader(magic, version, (nx, ny, nz), (ox, oy, oz), h)
    header.validate()
    return header


def load_sdf(path) -> VoxelGrid:
    """Load a binary or text SDF; values are not truncated."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        if data[:4].isascii() and data[:1].strip()[:1].isdigit():
            return load_sdf_text(path)
    header = read_header(data)
    n = header.dims[0] * header.dims[1] * header.dims[2]
    expected = HEADER_SIZE + 4 * n
    if len(data) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, got {len(data)}",
                          min(len(data), expected))
    values = np.frombuffer(data, dtype="<f4", count=n, offset=HEADER_SIZE)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FormatError("non-finite SDF value", HEADER_SIZE + 4 * bad)
    return VoxelGrid(header.dims, header.origin, header.spacing, values.astype(np.float64))


def store_sdf_text(grid: VoxelGrid, path) -> None:
    nx, ny, nz = grid.dims
    ox, oy, oz = grid.origin
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny} {nz} {float(ox)!r} {float(oy)!r} {float(oz)!r} {float(grid.spacing)!r}\n")
        np.savetxt(fh, grid.values.ravel(order="F"), fmt="%.9g")


def load_sdf_text(path) -> VoxelGrid:
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    fields = first.split()
    if len(fields) != 7:
        raise FormatError("text header must read 'nx ny nz ox oy oz h'", 0)
    try:
        dims = tuple(int(v) for v in fields[:3])
        ox, oy, oz, h = (float(v) for v in fields[3:])
    except ValueError as exc:
        raise FormatError(f"unparsable text header: {exc}", 0) from exc
    if min(dims) < 2 or not h > 0:
        raise FormatError(f"invalid grid header dims={dims} spacing={h}", 0)
    try:
        values = np.array(rest.split(), dtype=float)
    except ValueError as exc:
        raise FormatError(f"unparsable value: {exc}", len(first) + 1) from exc
    n = dims[0] * dims[1] * dims[2]
    if values.size != n:
        raise FormatError(f"expected {n} values, found {values.size}", len(text))
    return VoxelGrid(dims, (ox, oy, oz), h, values)


# ---------------------------------------------------------------------------
# Synthetic SDFs
# ---------------------------------------------------------------------------

def gen_superquadric_sdf(prims: Sequence[Superquadric], dims, origin, spacing) -> VoxelGrid:
    """Union of primitives as the pointwise minimum of their radial distances."""
    prims = list(prims)
    if not prims:
        raise ValueError("at least one primitive is required")
    for p in prims:
        if not isinstance(p, Superquadric):
            raise TypeError(f"expected Superquadric, got {type(p).__name__}")
    dims = _check_grid_spec(dims, spacing)
    grid = VoxelGrid(dims, origin, spacing, np.zeros(dims))
    pts = grid.points().reshape(-1, 3)
    values = np.full(pts.shape[0], np.inf)
    for p in prims:
        np.minimum(values, approx_sdf(p, pts), out=values)
    grid.values = values.reshape(dims)
    return grid


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices[self.triangles]
        return v[:, 0], v[:, 1], v[:, 2]

    def is_edge_manifold(self) -> bool:
        """Every undirected edge shared by exactly two triangles."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(counts.size) and bool(np.all(counts == 2))


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise FormatError(f"line {lineno}: face with {len(idx)} vertices; "
                                      "only triangles are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"line {lineno}: {exc}") from exc
    if not faces:
        raise FormatError(f"{path}: no faces")
    try:
        return TriangleMesh(np.array(verts), np.array(faces))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*(float(c) for c in v)))
        for f in mesh.triangles + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def point_triangle_sqdist(pts: np.ndarray, a: np.ndarray, b: np.ndarray,
                          c: np.ndarray) -> np.ndarray:
    """Squared distances from each point (m, 3) to each triangle (f, 3) -> (m, f)."""
    ab, ac = b - a, c - a
    p_ab, p_ac = pts @ ab.T, pts @ ac.T
    d1 = p_ab - np.einsum("ij,ij->i", a, ab)
    d2 = p_ac - np.einsum("ij,ij->i", a, ac)
    d3 = p_ab - np.einsum("ij,ij->i", b, ab)
    d4 = p_ac - np.einsum("ij,ij->i", b, ac)
    d5 = p_ab - np.einsum("ij,ij->i", c, ab)
    d6 = p_ac - np.einsum("ij,ij->i", c, ac)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    # Voronoi regions in the usual closest-point order; first match wins
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    v = np.select(conds, [0.0, 1.0, t_ab, 0.0, 0.0, 1.0 - t_bc], vb * denom)
    w = np.select(conds, [0.0, 0.0, 0.0, 1.0, t_ac, t_bc], vc * denom)

    ab2 = np.einsum("ij,ij->i", ab, ab)
    ac2 = np.einsum("ij,ij->i", ac, ac)
    abac = np.einsum("ij,ij->i", ab, ac)
    ap2 = (np.einsum("ij,ij->i", pts, pts)[:, None] - 2.0 * pts @ a.T
           + np.einsum("ij,ij->i", a, a)[None, :])
    ap_ab = d1
    ap_ac = d2
    sq = (ap2 - 2.0 * v * ap_ab - 2.0 * w * ap_ac
          + v * v * ab2 + 2.0 * v * w * abac + w * w * ac2)
    return np.maximum(sq, 0.0)


def unsigned_distance(mesh: TriangleMesh, pts: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    a, b, c = mesh.corners()
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    out = np.empty(len(pts))
    step = max(1, chunk // max(1, len(a)))
    for s in range(0, len(pts), step):
        out[s:s + step] = np.sqrt(point_triangle_sqdist(pts[s:s + step], a, b, c).min(axis=1))
    return out


_RAY_JITTER = (1.234567e-4 * np.sqrt(2.0), 1.234567e-4 * np.sqrt(3.0))


def ray_parity(mesh: TriangleMesh, grid: VoxelGrid, axis: int) -> np.ndarray:
    """Crossing parity of rays cast from every voxel toward +``axis``.

    Rays are jittered off the grid lines by a tiny irrational fraction of the
    spacing so they do not graze mesh edges or vertices.  Returns a boolean
    array (True for an odd number of crossings).
    """
    u_ax, v_ax = [a for a in range(3) if a != axis]
    a, b, c = mesh.corners()
    u = grid.axis_coords(u_ax) + _RAY_JITTER[0] * grid.spacing
    v = grid.axis_coords(v_ax) + _RAY_JITTER[1] * grid.spacing
    lines_u, lines_v = np.meshgrid(u, v, indexing="ij")
    lu, lv = lines_u.ravel(), lines_v.ravel()
    along = grid.axis_coords(axis)
    n_lines, n_along = lu.size, along.size
    flips = np.zeros((n_lines, n_along + 1), dtype=np.int64)

    au, av, aw = a[:, u_ax], a[:, v_ax], a[:, axis]
    bu, bv, bw = b[:, u_ax], b[:, v_ax], b[:, axis]
    cu, cv, cw = c[:, u_ax], c[:, v_ax], c[:, axis]
    step = max(1, 2_000_000 // max(1, len(a)))
    for s in range(0, n_lines, step):
        pu = lu[s:s + step, None]
        pv = lv[s:s + step, None]
        e_a = (cu - bu) * (pv - bv) - (cv - bv) * (pu - bu)
        e_b = (au - cu) * (pv - cv) - (av - cv) * (pu - cu)
        e_c = (bu - au) * (pv - av) - (bv - av) * (pu - au)
        inside = ((e_a > 0) & (e_b > 0) & (e_c > 0)) | ((e_a < 0) & (e_b < 0) & (e_c < 0))
        li, ti = np.nonzero(inside)
        if li.size == 0:
            continue
        wa, wb, wc = e_a[li, ti], e_b[li, ti], e_c[li, ti]
        hit = (wa * aw[ti] + wb * bw[ti] + wc * cw[ti]) / (wa + wb + wc)
        # a crossing at `hit` flips every voxel strictly before it on the line
        q = np.searchsorted(along, hit, side="left")
        np.add.at(flips, (li + s, np.zeros_like(q)), 1)
        np.add.at(flips, (li + s, q), -1)
    parity = (np.cumsum(flips, axis=1)[:, :n_along] % 2).astype(bool)
    # parity is laid out as (u, v, along); move back to (x, y, z)
    parity = parity.reshape(len(u), len(v), n_along)
    order = np.argsort([u_ax, v_ax, axis])
    return np.transpose(parity, order)


def mesh_to_sdf(mesh: TriangleMesh, dims, origin, spacing,
                max_disagreement: float = 1e-3) -> VoxelGrid:
    """Exact unsigned distance with a ray-parity sign (negative inside)."""
    dims = _check_grid_spec(dims, spacing)
    if not mesh.is_edge_manifold():
        raise MeshNotWatertight("mesh has boundary or non-manifold edges")
    grid = VoxelGrid(dims, origin, spacing, np.zeros(dims))
    px = ray_parity(mesh, grid, 0)
    py = ray_parity(mesh, grid, 1)
    disagree = float(np.mean(px != py))
    if disagree > max_disagreement:
        raise MeshNotWatertight(f"ray parity disagrees on {disagree:.2%} of voxels")
    pz = ray_parity(mesh, grid, 2)
    inside = (px.astype(int) + py + pz) >= 2
    dist = unsigned_distance(mesh, grid.points().reshape(-1, 3)).reshape(dims)
    grid.values = np.where(inside, -dist, dist)
    log.debug("mesh_to_sdf: %d voxels inside, parity disagreement %.4f%%",
              int(inside.sum()), 100 * disagree)
    return grid
