"""The 2D Helmholtz test problem: instances, operator hierarchies and the point source."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from mgevo.grid import GridFunction, GridLevel, StencilOperator

KH = 0.625
DEPTH = 5


@dataclass(frozen=True)
class ProblemInstance:
    """Wavenumber ``k`` discretised with ``h * k = 0.625`` on the finest level."""

    k: float
    l_max: int
    depth: int = DEPTH
    shift_factor: float = 0.5

    @property
    def target_reduction(self) -> float:
        return 1e-7 if self.k <= 160 else 1e-6

    @property
    def coarsest_level(self) -> int:
        return self.l_max - self.depth + 1

    @property
    def finest(self) -> GridLevel:
        return GridLevel(self.l_max)


def build_instance(k: float, *, depth: int = DEPTH, shift_factor: float = 0.5,
                   min_level: int = 7) -> ProblemInstance:
    """Create the instance for wavenumber ``k``, which must equal ``0.625 * 2**m``.

    ``m`` must be at least ``min_level`` and leave room for ``depth`` levels.
    """
    ratio = k / KH
    m = round(math.log2(ratio)) if ratio > 0 else -1
    if ratio <= 0 or not math.isclose(ratio, 2.0 ** m, rel_tol=0, abs_tol=1e-9):
        raise ValueError(
            f"k={k} is not on the ladder 0.625 * 2**m; admissible values are "
            f"{', '.join(str(KH * 2 ** i) for i in range(min_level, min_level + 4))}, ...")
    if m < min_level:
        raise ValueError(f"k={k} gives l_max={m}, below the minimum level {min_level}")
    if m - depth + 1 < 1:
        raise ValueError(f"l_max={m} cannot hold {depth} levels")
    return ProblemInstance(float(k), m, depth, shift_factor)


def next_difficulty(p: ProblemInstance) -> ProblemInstance:
    """Double the wavenumber; the finest grid is refined once to keep ``h * k``."""
    return replace(p, k=2.0 * p.k, l_max=p.l_max + 1)


def build_rhs(p: ProblemInstance) -> GridFunction:
    """Point source of unit mass at the node nearest to (0.5, 0.5)."""
    return point_source(p.finest)


def point_source(level: GridLevel) -> GridFunction:
    values = np.zeros(level.shape, dtype=np.complex128)
    mid = level.n // 2
    values[mid, mid] = 1.0 / level.h ** 2
    return GridFunction(level, values)


@dataclass(frozen=True)
class OperatorHierarchy:
    """System operator ``A`` on the finest level and shifted ``M`` on all levels.

    ``levels[0]`` and ``M[0]`` are the finest; the last entries are the coarsest.
    """

    levels: tuple[GridLevel, ...]
    A: StencilOperator
    M: tuple[StencilOperator, ...]
    k: float = 0.0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @classmethod
    def create(cls, l_max: int, depth: int, k: float, shift: float,
               dirichlet_x: bool = False) -> "OperatorHierarchy":
        if l_max - depth + 1 < 1:
            raise ValueError(f"l_max={l_max} cannot hold {depth} levels")
        levels = tuple(GridLevel(l_max - d, dirichlet_x) for d in range(depth))
        A = StencilOperator.helmholtz(levels[0], k, 0.0)
        M = tuple(StencilOperator.helmholtz(lv, k, shift) for lv in levels)
        return cls(levels, A, M, float(k))


def build_hierarchy(p: ProblemInstance) -> OperatorHierarchy:
    return OperatorHierarchy.create(p.l_max, p.depth, p.k, p.shift_factor)
