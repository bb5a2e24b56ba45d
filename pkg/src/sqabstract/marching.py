"""Marching-primitives loop: detect VOIs, fit, check, deactivate, repeat."""

from __future__ import annotations

import json
import math
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .config import MarchingConfig
from .fitting import FitResult, RemovalStats, fit, removal_stats, should_remove
from .grid import VoxelGrid, deactivate_fitted, truncate
from .superquadric import Superquadric, dumps_primitives
from .voi import Voi, connected_components, filter_vois, init_primitive, schedule

log = logging.getLogger(__name__)


@dataclass
class PrimitiveDiagnostics:
    round: int
    threshold: float
    voi_size: int
    iterations: int
    converged: bool
    cost: float
    candidate: str
    removal: RemovalStats
    accepted: bool
    deactivated: int


@dataclass
class AbstractionResult:
    primitives: list[Superquadric]
    diagnostics: list[PrimitiveDiagnostics] = field(default_factory=list)
    rounds: int = 0
    wall_time: float = 0.0
    stalled: bool = False

    def primitives_json(self) -> str:
        return dumps_primitives(self.primitives)

    def diagnostics_json(self) -> str:
        return json.dumps({
            "rounds": self.rounds,
            "wall_time": self.wall_time,
            "stalled": self.stalled,
            "n_primitives": len(self.primitives),
            "fits": [_finite(asdict(d)) for d in self.diagnostics],
        }, indent=1)


def _finite(row: dict) -> dict:
    # NaN is not valid JSON
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for k, v in row.items()}


def _next_vois(grid: VoxelGrid, cfg: MarchingConfig, failed: set[bytes]):
    """Walk the schedule to the first level that yields unseen VOIs.

    Returns ``(threshold, vois, skipped)`` where ``skipped`` tells whether a
    known failed VOI was passed over on the way.
    """
    sched = schedule(grid, cfg.alpha, cfg.termination_ratio)
    skipped = False
    if sched is None:
        return None, [], skipped
    for thr in sched:
        comps = filter_vois(connected_components(grid, thr), cfg.n_c)
        fresh = [c for c in comps if c.signature() not in failed]
        skipped |= len(fresh) < len(comps)
        if fresh:
            return thr, fresh, skipped
    return None, [], skipped


def _fit_voi(grid: VoxelGrid, voi: Voi, cfg: MarchingConfig) -> FitResult:
    return fit(grid, init_primitive(voi, grid, cfg.gamma), cfg)


def march(grid: VoxelGrid, config: MarchingConfig = MarchingConfig()) -> AbstractionResult:
    """Abstract the shape in ``grid`` into a list of superquadrics.

    The input grid is not modified.  It is truncated at
    ``truncation_ratio * spacing`` and its active mask is consumed as
    primitives are accepted.  VOIs of one round are fitted against the same
    snapshot; removal checks and deactivation then run in VOI order.
    """
    start = time.perf_counter()
    g = truncate(grid, config.truncation_ratio * grid.spacing)
    result = AbstractionResult([])
    failed: set[bytes] = set()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        while True:
            thr, vois, skipped = _next_vois(g, config, failed)
            if not vois:
                result.stalled = skipped
                break
            result.rounds += 1
            if pool is None:
                fits = [_fit_voi(g, v, config) for v in vois]
            else:
                fits = list(pool.map(lambda v: _fit_voi(g, v, config), vois))
            for voi, res in zip(vois, fits):
                stats = removal_stats(g, res.primitive)
                keep = not res.degenerate and not should_remove(stats)
                n_off = deactivate_fitted(g, res.primitive) if keep else 0
                if keep and n_off > 0:
                    result.primitives.append(res.primitive)
                else:
                    keep = False
                    failed.add(voi.signature())
                result.diagnostics.append(PrimitiveDiagnostics(
                    result.rounds, thr, voi.size, res.iterations, res.converged,
                    res.cost, res.candidate, stats, keep, n_off))
                log.info("round %d voi %d -> %s (%s)", result.rounds, voi.size,
                         "kept" if keep else "removed", stats)
    finally:
        if pool is not None:
            pool.shutdown()
    result.wall_time = time.perf_counter() - start
    return result
