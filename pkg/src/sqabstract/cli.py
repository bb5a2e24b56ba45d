"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or file format, 3 empty result,
4 mesh not watertight.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import MarchingConfig
from .grid import min_active_sdf
from .marching import march
from .sdf_io import (FormatError, MeshNotWatertight, gen_superquadric_sdf, load_obj, load_sdf,
                     mesh_to_sdf, store_sdf, store_sdf_text)
from .superquadric import InvalidPrimitive, load_primitives, save_primitives

log = logging.getLogger("sqabstract")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_EMPTY = 3
EXIT_NOT_WATERTIGHT = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# flag name -> (config field, type)
_CONFIG_FLAGS = {
    "--truncation-ratio": ("truncation_ratio", float),
    "--alpha": ("alpha", float),
    "--nc": ("n_c", int),
    "--gamma": ("gamma", float),
    "--termination-ratio": ("termination_ratio", float),
    "--p0": ("p0", float),
    "--activation-ratio": ("activation_ratio", float),
    "--max-iters": ("max_iters", int),
    "--rel-tol": ("rel_tol", float),
    "--seed": ("seed", int),
    "--threads": ("threads", int),
}


def _add_shared(p: argparse.ArgumentParser) -> None:
    defaults = MarchingConfig()
    g = p.add_argument_group("abstraction settings")
    for flag, (name, typ) in _CONFIG_FLAGS.items():
        g.add_argument(flag, dest=name, type=typ, default=getattr(defaults, name),
                       help=f"default {getattr(defaults, name)}")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective settings as JSON and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_grid_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--dims", type=int, nargs="+", required=required,
                   help="voxels per axis (one value or three)")
    p.add_argument("--origin", type=float, nargs=3, help="world position of voxel (0,0,0)")
    p.add_argument("--spacing", type=float, help="voxel interval")
    p.add_argument("--text", action="store_true", help="write the text SDF variant")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqabstract",
                                     description="Superquadric abstraction of signed distance fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("abstract", help="abstract an SDF file into primitives")
    p.add_argument("sdf", nargs="?", help="MPSF or text SDF")
    p.add_argument("out", nargs="?", help="primitive JSON output")
    p.add_argument("--diagnostics", help="write per-fit diagnostics JSON here")
    _add_shared(p)

    p = sub.add_parser("gen", help="render primitives into an SDF file")
    p.add_argument("spec", nargs="?", help="primitive JSON")
    p.add_argument("out", nargs="?", help="SDF output")
    _add_grid_flags(p, required=False)
    _add_shared(p)

    p = sub.add_parser("eval", help="score primitives against a reference shape")
    p.add_argument("pred", nargs="?", help="predicted primitive JSON")
    p.add_argument("truth", nargs="?", help="reference: SDF file, OBJ mesh or primitive JSON")
    p.add_argument("--truth-kind", choices=("auto", "sdf", "mesh", "primitives"), default="auto")
    p.add_argument("--grid-n", type=int, default=100, help="IoU lattice points per axis")
    p.add_argument("--sample-spacing", type=float,
                   help="surface sample spacing (default: SDF spacing or 1%% of the extent)")
    _add_shared(p)

    p = sub.add_parser("mesh2sdf", help="convert a watertight OBJ mesh to an SDF file")
    p.add_argument("obj", nargs="?")
    p.add_argument("out", nargs="?")
    _add_grid_flags(p, required=False)
    p.add_argument("--padding", type=float, default=0.1,
                   help="bounding-box padding fraction when origin/spacing are omitted")
    _add_shared(p)

    p = sub.add_parser("sample", help="write surface samples of primitives as 'x y z' lines")
    p.add_argument("pred", nargs="?")
    p.add_argument("out", nargs="?")
    p.add_argument("--spacing", type=float, default=0.01)
    p.add_argument("--max-points", type=int, default=metrics.MAX_POINTS)
    _add_shared(p)
    return parser


def config_from_args(args: argparse.Namespace) -> MarchingConfig:
    kwargs = {name: getattr(args, name) for name, _ in _CONFIG_FLAGS.values()}
    try:
        return MarchingConfig(**kwargs)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise CliError(f"missing argument(s): {', '.join(missing)}")


def _load_prims(path):
    try:
        return load_primitives(path)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc
    except (InvalidPrimitive, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid primitive file {path}: {exc}") from exc


def _grid_spec(args, default_dims=None):
    dims = args.dims or default_dims
    if dims is None:
        raise CliError("--dims is required")
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise CliError("--dims takes one or three values")
    return tuple(dims)


def _write_sdf(grid, path, text: bool) -> None:
    (store_sdf_text if text else store_sdf)(grid, path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_abstract(args, cfg: MarchingConfig) -> int:
    _require(args, "sdf", "out")
    try:
        grid = load_sdf(args.sdf)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read {args.sdf}: {exc.strerror}") from exc
    except FormatError as exc:
        raise CliError(f"{args.sdf}: {exc}") from exc
    if min_active_sdf(grid) is None:
        log.warning("%s has no interior voxel; writing an empty primitive list", args.sdf)
        save_primitives([], args.out)
        return EXIT_OK
    result = march(grid, cfg)
    save_primitives(result.primitives, args.out)
    if args.diagnostics:
        Path(args.diagnostics).write_text(result.diagnostics_json() + "\n")
    log.info("%d primitive(s) in %d round(s), %.2fs", len(result.primitives), result.rounds,
             result.wall_time)
    if not result.primitives:
        log.error("interior volume present but no primitive was kept")
        return EXIT_EMPTY
    return EXIT_OK


def cmd_gen(args, cfg: MarchingConfig) -> int:
    _require(args, "spec", "out")
    prims = _load_prims(args.spec)
    if not prims:
        raise CliError("primitive list is empty")
    dims = _grid_spec(args, [64])
    origin = args.origin if args.origin is not None else (-0.5, -0.5, -0.5)
    spacing = args.spacing if args.spacing is not None else 1.0 / (max(dims) - 1)
    try:
        grid = gen_superquadric_sdf(prims, dims, origin, spacing)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _write_sdf(grid, args.out, args.text)
    return EXIT_OK


def _truth_kind(args) -> str:
    if args.truth_kind != "auto":
        return args.truth_kind
    suffix = Path(args.truth).suffix.lower()
    return {".obj": "mesh", ".json": "primitives"}.get(suffix, "sdf")


def cmd_eval(args, cfg: MarchingConfig) -> int:
    _require(args, "pred", "truth")
    pred = _load_prims(args.pred)
    if not pred:
        log.error("prediction is empty")
        return EXIT_EMPTY
    kind = _truth_kind(args)
    pred_oracle = metrics.OccupancyOracle.from_primitives(pred)
    try:
        if kind == "primitives":
            truth = _load_prims(args.truth)
            if not truth:
                raise CliError("reference primitive list is empty")
            truth_oracle = metrics.OccupancyOracle.from_primitives(truth)
        elif kind == "mesh":
            mesh = load_obj(args.truth)
            truth_oracle = metrics.OccupancyOracle.from_mesh(mesh)
        else:
            grid = load_sdf(args.truth)
            truth_oracle = metrics.OccupancyOracle.from_sdf_grid(grid)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read {args.truth}: {exc.strerror}") from exc
    except FormatError as exc:
        raise CliError(f"{args.truth}: {exc}") from exc
    lo, hi = metrics.union_bounds(pred_oracle, truth_oracle)
    spacing = args.sample_spacing
    if spacing is None:
        spacing = grid.spacing if kind == "sdf" else 0.01 * float(np.max(hi - lo))
    try:
        pred_pts = metrics.predicted_surface_points(pred, spacing, seed=cfg.seed)
        if kind == "primitives":
            truth_pts = metrics.predicted_surface_points(truth, spacing, seed=cfg.seed)
        elif kind == "mesh":
            truth_pts = metrics.mesh_surface_points(mesh, seed=cfg.seed)
        else:
            truth_pts = metrics.sdf_surface_points(grid, seed=cfg.seed)
    except metrics.EmptyPointSetError as exc:
        log.error("empty surface sample: %s", exc)
        return EXIT_EMPTY
    try:
        value = metrics.iou(pred_oracle, truth_oracle, (lo, hi), args.grid_n)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    rep = metrics.report(pred_pts, truth_pts, value, args.grid_n)
    sys.stdout.write(json.dumps(rep) + "\n")
    return EXIT_OK


def cmd_mesh2sdf(args, cfg: MarchingConfig) -> int:
    _require(args, "obj", "out")
    try:
        mesh = load_obj(args.obj)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read {args.obj}: {exc.strerror}") from exc
    except FormatError as exc:
        raise CliError(f"{args.obj}: {exc}") from exc
    if len(mesh.triangles) == 0:
        raise CliError("mesh has no triangles")
    dims = _grid_spec(args, [64])
    if args.origin is not None and args.spacing is not None:
        origin, spacing = args.origin, args.spacing
    else:
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        ext = float(np.max(hi - lo)) * (1.0 + 2.0 * args.padding)
        spacing = args.spacing if args.spacing is not None else ext / (min(dims) - 1)
        center = 0.5 * (lo + hi)
        origin = args.origin if args.origin is not None else center - 0.5 * spacing * (np.array(dims) - 1)
    try:
        grid = mesh_to_sdf(mesh, dims, origin, spacing)
    except MeshNotWatertight as exc:
        raise CliError(f"{args.obj}: {exc}", EXIT_NOT_WATERTIGHT) from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _write_sdf(grid, args.out, args.text)
    return EXIT_OK


def cmd_sample(args, cfg: MarchingConfig) -> int:
    _require(args, "pred", "out")
    prims = _load_prims(args.pred)
    if not prims:
        log.error("primitive list is empty")
        return EXIT_EMPTY
    if not args.spacing > 0 or args.max_points < 1:
        raise CliError("--spacing must be positive and --max-points >= 1")
    try:
        pts = metrics.predicted_surface_points(prims, args.spacing, args.max_points, cfg.seed)
    except metrics.EmptyPointSetError as exc:
        log.error("%s", exc)
        return EXIT_EMPTY
    np.savetxt(args.out, pts.points, fmt="%.9g")
    return EXIT_OK


_COMMANDS = {
    "abstract": cmd_abstract,
    "gen": cmd_gen,
    "eval": cmd_eval,
    "mesh2sdf": cmd_mesh2sdf,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.print_config:
            sys.stdout.write(json.dumps(cfg.to_dict(), indent=1) + "\n")
            return EXIT_OK
        return _COMMANDS[args.command](args, cfg)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
