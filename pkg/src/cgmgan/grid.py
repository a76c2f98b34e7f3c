"""Voxel discretization of a box-shaped urban region.

Cells are indexed 1-based as (i, j, k) along x, y, z.  Cell (i, j, k)
covers the half-open box ``[(i-1)dx, i*dx) x [(j-1)dy, j*dy) x [(k-1)dz, k*dz)``;
points on the region's upper faces fold into the last cell so that
:func:`locate` is total on the closed region.  Dense tensors over the grid
are numpy arrays of shape ``(nx, ny, nz)`` indexed ``[i-1, j-1, k-1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class CellIndex(NamedTuple):
    i: int
    j: int
    k: int


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def _ceil_cells(extent: float, delta: float) -> int:
    # tolerate the rounding in extent / (extent / n)
    q = extent / delta
    return max(1, math.ceil(q - 1e-9 * max(1.0, q)))


@dataclass(frozen=True)
class RegionSpec:
    """Region extents in meters and per-axis cell sizes.

    Parameters
    ----------
    length, width, height : float
        Extent of the region along x, y and z.
    dx, dy, dz : float
        Cell size along each axis.  The isotropic grid is the special case
        ``dx == dy == dz``.
    """

    length: float
    width: float
    height: float
    dx: float
    dy: float
    dz: float

    def __post_init__(self) -> None:
        for name in ("length", "width", "height", "dx", "dy", "dz"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"RegionSpec.{name} must be finite and > 0, got {value!r}")

    @classmethod
    def from_cells(cls, size: tuple[float, float, float],
                   cells: tuple[int, int, int]) -> "RegionSpec":
        """Build a spec from region size and the desired cell count per axis."""
        (L, W, H), (nx, ny, nz) = size, cells
        if min(nx, ny, nz) < 1:
            raise ValueError(f"cell counts must be >= 1, got {cells}")
        return cls(L, W, H, L / nx, W / ny, H / nz)

    @property
    def nx(self) -> int:
        return _ceil_cells(self.length, self.dx)

    @property
    def ny(self) -> int:
        return _ceil_cells(self.width, self.dy)

    @property
    def nz(self) -> int:
        return _ceil_cells(self.height, self.dz)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def extents(self) -> tuple[float, float, float]:
        return (self.length, self.width, self.height)

    @property
    def cell_size(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    def to_dict(self) -> dict:
        return {"length": self.length, "width": self.width, "height": self.height,
                "dx": self.dx, "dy": self.dy, "dz": self.dz}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        return cls(*(float(d[k]) for k in ("length", "width", "height", "dx", "dy", "dz")))


def cell_count(spec: RegionSpec) -> int:
    """Total number of cells, ``nx * ny * nz``."""
    return spec.nx * spec.ny * spec.nz


def _check_index(spec: RegionSpec, idx) -> CellIndex:
    idx = CellIndex(*(int(v) for v in idx))
    if not (1 <= idx.i <= spec.nx and 1 <= idx.j <= spec.ny and 1 <= idx.k <= spec.nz):
        raise IndexError(f"cell index {tuple(idx)} outside grid {spec.shape}")
    return idx


def cell_center(spec: RegionSpec, idx) -> Point3:
    """Center of cell ``idx`` (1-based)."""
    i, j, k = _check_index(spec, idx)
    return Point3((i - 0.5) * spec.dx, (j - 0.5) * spec.dy, (k - 0.5) * spec.dz)


def contains(spec: RegionSpec, p) -> bool:
    x, y, z = p
    return 0 <= x <= spec.length and 0 <= y <= spec.width and 0 <= z <= spec.height


def locate(spec: RegionSpec, p) -> CellIndex:
    """Index of the cell containing ``p``.

    Faces belong to the cell above them; the region's upper faces belong
    to the last cell.
    """
    if not all(math.isfinite(v) for v in p) or not contains(spec, p):
        raise ValueError(f"point {tuple(p)} outside region {spec.extents}")
    idx = locate_many(spec, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]
    return CellIndex(int(idx[0]) + 1, int(idx[1]) + 1, int(idx[2]) + 1)


def locate_many(spec: RegionSpec, points: np.ndarray) -> np.ndarray:
    """Zero-based cell indices for an (n, 3) array of in-region points."""
    pts = np.asarray(points, dtype=np.float64)
    idx = np.floor(pts / np.asarray(spec.cell_size)).astype(np.int64)
    np.clip(idx, 0, np.asarray(spec.shape) - 1, out=idx)
    return idx


def cell_centers(spec: RegionSpec) -> np.ndarray:
    """All cell centers as an array of shape (nx, ny, nz, 3)."""
    axes = [(np.arange(n) + 0.5) * d for n, d in zip(spec.shape, spec.cell_size)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def check_mask(spec: RegionSpec, mask: np.ndarray) -> np.ndarray:
    """Validate an occupancy mask (True = building cell) against ``spec``."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_ or mask.shape != spec.shape:
        raise ValueError(f"occupancy mask must be bool of shape {spec.shape}, "
                         f"got {mask.dtype} {mask.shape}")
    return mask
