"""Complex grid functions on a nested 2D node-based hierarchy.

A level with ``n`` intervals per dimension stores ``(n + 1) x (n + 1)`` complex
values.  Rows ``j = 0`` and ``j = n`` are Dirichlet nodes pinned to zero; the
x-boundaries ``i = 0`` and ``i = n`` carry the Robin condition
``du/dn - i k u = 0`` unless the level is flagged as fully Dirichlet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mgevo import _kernels


class LevelMismatchError(ValueError):
    """Raised when grid functions or operators from different levels are combined."""


@dataclass(frozen=True)
class GridLevel:
    """One level of the hierarchy: ``n = 2**index`` intervals, ``h = 1 / n``."""

    index: int
    dirichlet_x: bool = False

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"level index must be >= 1, got {self.index}")

    @property
    def n(self) -> int:
        return 2 ** self.index

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n + 1, self.n + 1)

    @property
    def x_range(self) -> tuple[int, int]:
        """Inclusive range of x-indices that hold unknowns."""
        if self.dirichlet_x:
            return 1, self.n - 1
        return 0, self.n

    @property
    def points(self) -> int:
        return (self.n + 1) ** 2

    def coarser(self) -> "GridLevel":
        return GridLevel(self.index - 1, self.dirichlet_x)

    def finer(self) -> "GridLevel":
        return GridLevel(self.index + 1, self.dirichlet_x)

    def unknown_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        i0, i1 = self.x_range
        mask[i0:i1 + 1, 1:self.n] = True
        return mask


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Immutable complex field on one level."""

    level: GridLevel
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128, order="C")
        if values.shape != self.level.shape:
            raise ValueError(
                f"values have shape {values.shape}, level expects {self.level.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, level: GridLevel) -> "GridFunction":
        return cls(level, np.zeros(level.shape, dtype=np.complex128))

    def satisfies_dirichlet(self) -> bool:
        return not np.any(self.values[~self.level.unknown_mask()])

    def __add__(self, other):
        return axpy(self, other, 1.0)

    def __sub__(self, other):
        return axpy(self, other, -1.0)

    def __mul__(self, alpha):
        return GridFunction(self.level, self.values * alpha)

    __rmul__ = __mul__


@dataclass(frozen=True)
class StencilOperator:
    """Constant-coefficient five-point operator with boundary-modified rows.

    ``center``, ``robin_center`` and ``offdiag`` are the unscaled stencil
    entries; the operator applies them times ``1 / h**2``.  At a Robin column the
    inward neighbour gets ``2 * offdiag`` (ghost-point elimination).
    """

    level: GridLevel
    center: complex
    robin_center: complex
    offdiag: complex = -1.0
    _scaled: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = 1.0 / self.level.h ** 2
        object.__setattr__(self, "_scaled", (
            complex(self.center) * s, complex(self.robin_center) * s,
            complex(self.offdiag) * s))

    @classmethod
    def helmholtz(cls, level: GridLevel, k: float, shift: float = 0.0) -> "StencilOperator":
        """Discretise ``-lap u - k^2 (1 + shift i) u`` with Robin rows ``du/dn - iku = 0``."""
        kh = k * level.h
        kappa2 = kh ** 2 * (1.0 + 1j * shift)
        center = 4.0 - kappa2
        return cls(level, center, center - 2j * kh)

    @property
    def scaled(self) -> tuple[complex, complex, complex]:
        """``(center, robin_center, offdiag)`` already multiplied by ``1 / h**2``."""
        return self._scaled

    def diagonal(self) -> np.ndarray:
        cc, rc, _ = self.scaled
        d = np.full(self.level.shape, cc, dtype=np.complex128)
        if not self.level.dirichlet_x:
            d[0, :] = rc
            d[-1, :] = rc
        return d


def _check_level(a, b):
    if a != b:
        raise LevelMismatchError(f"level mismatch: {a} vs {b}")


def apply_operator(op: StencilOperator, u: GridFunction) -> GridFunction:
    """Return ``op @ u``; Dirichlet rows of the result are zero."""
    _check_level(op.level, u.level)
    if not u.satisfies_dirichlet():
        raise ValueError("input field has nonzero values on Dirichlet nodes")
    out = np.empty(u.level.shape, dtype=np.complex128)
    i0, i1 = u.level.x_range
    _kernels.apply_stencil(u.values, out, i0, i1, *op.scaled)
    return GridFunction(u.level, out)


def restrict_full_weighting(fine: GridFunction, coarsest_index: int = 1) -> GridFunction:
    """Full-weighting restriction to the next coarser level.

    Weights of the 3x3 neighbourhood that fall outside the active x-range are
    dropped (not renormalised), which keeps restriction equal to a quarter of
    the transposed bilinear prolongation on every level.
    """
    if fine.level.index <= max(coarsest_index, 1):
        raise ValueError(
            f"level {fine.level.index} is already the coarsest (limit {coarsest_index})")
    coarse_level = fine.level.coarser()
    out = np.empty(coarse_level.shape, dtype=np.complex128)
    i0f, i1f = fine.level.x_range
    i0c, i1c = coarse_level.x_range
    _kernels.restrict_fw(fine.values, out, i0f, i1f, i0c, i1c)
    return GridFunction(coarse_level, out)


def prolongate_bilinear(coarse: GridFunction, fine_level: GridLevel) -> GridFunction:
    """Bilinear interpolation of ``coarse`` onto ``fine_level``."""
    if fine_level.index != coarse.level.index + 1 or fine_level.dirichlet_x != coarse.level.dirichlet_x:
        raise LevelMismatchError(
            f"cannot prolongate from {coarse.level} to {fine_level}")
    out = np.zeros(fine_level.shape, dtype=np.complex128)
    i0c, i1c = coarse.level.x_range
    i0f, i1f = fine_level.x_range
    _kernels.prolong_add(coarse.values, out, 1.0, i0c, i1c, i0f, i1f)
    return GridFunction(fine_level, out)


def axpy(a: GridFunction, b: GridFunction, alpha: complex = 1.0) -> GridFunction:
    """``a + alpha * b``."""
    _check_level(a.level, b.level)
    return GridFunction(a.level, a.values + alpha * b.values)


def dot(a: GridFunction, b: GridFunction) -> complex:
    """Conjugated inner product ``sum(conj(a) * b)`` with a fixed summation order."""
    _check_level(a.level, b.level)
    return complex(_kernels.cdot(a.values, b.values))


def norm(a: GridFunction) -> float:
    return float(_kernels.cnorm(a.values))
