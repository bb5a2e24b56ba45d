from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class MarchingConfig:
    """Hyperparameters of the abstraction pipeline.

    Defaults follow the published settings: truncation 1.3 voxels,
    threshold ratio 4/5, minimum VOI size 5, initial scale ratio 0.1,
    termination at 1% of the negative truncation, prior 0.01 and an
    activation band of 3.5 truncations.
    """

    truncation_ratio: float = 1.3
    alpha: float = 0.8
    n_c: int = 5
    gamma: float = 0.1
    termination_ratio: float = 0.01
    p0: float = 0.01
    activation_ratio: float = 3.5
    max_iters: int = 40
    rel_tol: float = 1e-3
    lsq_max_nfev: int = 30
    restart_iters: int = 10
    restart_axes: tuple[str, ...] = ("x", "y", "z45")
    restart_rounds: int = 3
    sigma2_floor_ratio: float = 0.05
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("truncation_ratio", "gamma", "p0", "activation_ratio", "rel_tol",
                     "sigma2_floor_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.termination_ratio < 1:
            raise ValueError("termination_ratio must lie in (0, 1)")
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        if self.n_c < 1 or self.max_iters < 1 or self.threads < 1 or self.lsq_max_nfev < 1:
            raise ValueError("counts must be >= 1")
        if self.restart_iters < 0 or self.restart_rounds < 0:
            raise ValueError("restart_iters and restart_rounds must be >= 0")
        bad = set(self.restart_axes) - {"x", "y", "z45"}
        if bad:
            raise ValueError(f"unknown restart axes {sorted(bad)}")
        object.__setattr__(self, "restart_axes", tuple(self.restart_axes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["restart_axes"] = list(self.restart_axes)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
