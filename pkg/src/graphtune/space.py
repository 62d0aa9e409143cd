"""Parameter configurations and the discrete tuning grid."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

EFC_RANGE = (20, 800)
M_RANGE = (4, 100)
EFS_RANGE = (10, 5000)

FULL_SHAPE = (20, 13, 94)
REDUCED_SHAPE = (5, 4, 12)

DEFAULT_TARGETS = (0.85, 0.88, 0.90, 0.92, 0.94, 0.95, 0.96, 0.98, 0.99)


@dataclass(frozen=True, order=True)
class ParamConfig:
    """One (efC, M, efS) triple. ``construction`` is the part that needs a rebuild."""

    efC: int
    M: int
    efS: int

    def __post_init__(self):
        for name, value, (lo, hi) in (
            ("efC", self.efC, EFC_RANGE),
            ("M", self.M, M_RANGE),
            ("efS", self.efS, EFS_RANGE),
        ):
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")

    @property
    def construction(self) -> tuple[int, int]:
        return (self.efC, self.M)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.efC, self.M, self.efS)

    def to_dict(self) -> dict:
        return {"efC": self.efC, "M": self.M, "efS": self.efS}


def geometric_grid(lo: int, hi: int, n: int) -> list[int]:
    """``n`` geometrically spaced integers in [lo, hi].

    Rounding collisions are bumped to the next unused integer, so the result
    is strictly ascending with exactly ``n`` members.
    """
    if n < 1:
        raise ValueError("grid needs at least one point")
    if n == 1:
        return [lo]
    if hi - lo + 1 < n:
        raise ValueError(f"cannot fit {n} distinct integers in [{lo}, {hi}]")
    raw = np.geomspace(lo, hi, n)
    out: list[int] = []
    for v in raw:
        x = int(round(float(v)))
        if out and x <= out[-1]:
            x = out[-1] + 1
        out.append(x)
    if out[-1] > hi:
        # walk back from the top so the upper bound is respected
        out[-1] = hi
        for i in range(n - 2, -1, -1):
            if out[i] >= out[i + 1]:
                out[i] = out[i + 1] - 1
    return out


@dataclass(frozen=True)
class ConfigSpace:
    efc_grid: tuple[int, ...]
    m_grid: tuple[int, ...]
    efs_grid: tuple[int, ...]
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        for grid, (lo, hi), label in (
            (self.efc_grid, EFC_RANGE, "efC"),
            (self.m_grid, M_RANGE, "M"),
            (self.efs_grid, EFS_RANGE, "efS"),
        ):
            if len(grid) == 0:
                raise ValueError(f"empty {label} grid")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{label} grid must be strictly ascending")
            if grid[0] < lo or grid[-1] > hi:
                raise ValueError(f"{label} grid outside [{lo}, {hi}]")

    @classmethod
    def full(cls) -> "ConfigSpace":
        return cls.geometric(*FULL_SHAPE, name="full")

    @classmethod
    def reduced(cls) -> "ConfigSpace":
        return cls.geometric(*REDUCED_SHAPE, name="reduced")

    @classmethod
    def geometric(cls, n_efc: int, n_m: int, n_efs: int, name: str = "custom") -> "ConfigSpace":
        return cls(
            tuple(geometric_grid(*EFC_RANGE, n_efc)),
            tuple(geometric_grid(*M_RANGE, n_m)),
            tuple(geometric_grid(*EFS_RANGE, n_efs)),
            name=name,
        )

    @classmethod
    def from_name(cls, name: str) -> "ConfigSpace":
        if name == "full":
            return cls.full()
        if name == "reduced":
            return cls.reduced()
        return cls.load(name)

    @classmethod
    def load(cls, path: str | Path) -> "ConfigSpace":
        raw = json.loads(Path(path).read_text())
        return cls(tuple(raw["efC"]), tuple(raw["M"]), tuple(raw["efS"]), name=str(path))

    def to_dict(self) -> dict:
        return {"efC": list(self.efc_grid), "M": list(self.m_grid), "efS": list(self.efs_grid)}

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.efc_grid), len(self.m_grid), len(self.efs_grid))

    def construction_configs(self) -> list[tuple[int, int]]:
        """Every (efC, M) pair in grid order (the full product)."""
        return [(c, m) for c in self.efc_grid for m in self.m_grid]

    def configs(self) -> Iterator[ParamConfig]:
        for c, m in self.construction_configs():
            for s in self.efs_grid:
                yield ParamConfig(c, m, s)

    def __len__(self) -> int:
        return len(self.construction_configs()) * len(self.efs_grid)

    def contains(self, cfg: ParamConfig) -> bool:
        return cfg.efC in self.efc_grid and cfg.M in self.m_grid and cfg.efS in self.efs_grid

    def min_config(self) -> ParamConfig:
        return ParamConfig(self.efc_grid[0], self.m_grid[0], self.efs_grid[0])

    def max_config(self) -> ParamConfig:
        return ParamConfig(self.efc_grid[-1], self.m_grid[-1], self.efs_grid[-1])

    def efs_index(self, efs: int) -> int:
        return self.efs_grid.index(efs)

    def snap_efs_up(self, efs: int) -> int:
        """Smallest grid efS >= ``efs`` (the top of the grid if none)."""
        for s in self.efs_grid:
            if s >= efs:
                return s
        return self.efs_grid[-1]


def log_unit(value: float, lo: float, hi: float) -> float:
    """Map ``value`` in [lo, hi] to [0, 1] on a log scale."""
    return (math.log(value) - math.log(lo)) / (math.log(hi) - math.log(lo))


def config_to_unit(cfg: ParamConfig) -> np.ndarray:
    """Position of a config inside the global parameter box, each axis in [0, 1].

    efC and efS are log-scaled, M is linear. The QPP normalizer and the agent
    state both use this scale.
    """
    return np.array(
        [
            log_unit(cfg.efC, *EFC_RANGE),
            (cfg.M - M_RANGE[0]) / (M_RANGE[1] - M_RANGE[0]),
            log_unit(cfg.efS, *EFS_RANGE),
        ]
    )


def nearest_in_log(grid: Sequence[int], value: float) -> int:
    logs = np.log(np.asarray(grid, dtype=np.float64))
    return int(grid[int(np.argmin(np.abs(logs - math.log(value))))])
