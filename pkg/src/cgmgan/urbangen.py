"""Procedural urban scenes: rectangular buildings with Rayleigh heights.

Buildings are grid-snapped, non-overlapping rectangles placed by rejection
sampling.  Two placement modes exist:

* count mode (``building_count`` given): exactly that many buildings with
  side lengths drawn uniformly from ``[min_side, max_side]`` cells;
* coverage mode: buildings are added until the footprint ratio reaches
  ``alpha``.  ``beta`` (buildings per km^2) fixes the typical footprint:
  a region of area ``A`` is expected to hold ``beta * A`` buildings sharing
  ``alpha * A`` of ground, which sets the mean side length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import RegionSpec, cell_centers

MAX_FAILED_ATTEMPTS = 10_000
# coverage mode stops within this band around alpha
COVERAGE_TOLERANCE = 0.02


class PlacementError(RuntimeError):
    """The region is too crowded to place the requested buildings."""


@dataclass(frozen=True)
class UrbanParams:
    alpha: float = 0.5
    beta: float = 300.0
    gamma_h: float = 50.0
    building_count: int | None = None
    seed: int = 0
    min_side: int = 2
    max_side: int = 6

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.gamma_h > 0:
            raise ValueError(f"gamma_h must be > 0, got {self.gamma_h}")
        if self.building_count is not None and self.building_count < 0:
            raise ValueError(f"building_count must be >= 0, got {self.building_count}")
        if not 1 <= self.min_side <= self.max_side:
            raise ValueError(f"need 1 <= min_side <= max_side, got {self.min_side}, {self.max_side}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma_h": self.gamma_h,
                "building_count": self.building_count, "seed": self.seed,
                "min_side": self.min_side, "max_side": self.max_side}

    @classmethod
    def from_dict(cls, d: dict) -> "UrbanParams":
        count = d.get("building_count")
        return cls(alpha=float(d["alpha"]), beta=float(d["beta"]), gamma_h=float(d["gamma_h"]),
                   building_count=None if count is None else int(count), seed=int(d["seed"]),
                   min_side=int(d.get("min_side", 2)), max_side=int(d.get("max_side", 6)))


@dataclass(frozen=True)
class Building:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    height: float

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def overlaps(self, other: "Building") -> bool:
        return (self.x_min < other.x_max and other.x_min < self.x_max
                and self.y_min < other.y_max and other.y_min < self.y_max)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.height]


@dataclass(frozen=True, eq=False)
class UrbanEnvironment:
    spec: RegionSpec
    params: UrbanParams
    buildings: tuple[Building, ...]
    mask: np.ndarray = field(repr=False)
    shadow_seed: int = 0

    @property
    def footprint_ratio(self) -> float:
        return sum(b.area for b in self.buildings) / (self.spec.length * self.spec.width)

    @property
    def free(self) -> np.ndarray:
        return ~self.mask


def sample_height(gamma_h: float, u: float, max_height: float | None = None) -> float:
    """Inverse-CDF draw from the Rayleigh height law with scale ``gamma_h``.

    ``u`` must lie in the open interval (0, 1).  When ``max_height`` is given
    the result is clamped to it.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"uniform variate must lie in (0, 1), got {u}")
    h = gamma_h * math.sqrt(-2.0 * math.log1p(-u))
    if max_height is not None:
        h = min(h, max_height)
    return h


def rayleigh_cdf(h, gamma_h: float):
    h = np.asarray(h, dtype=np.float64)
    return np.where(h > 0, -np.expm1(-h * h / (2.0 * gamma_h * gamma_h)), 0.0)


def rasterize(spec: RegionSpec, buildings) -> np.ndarray:
    """Occupancy mask: a cell is a building cell iff its center lies strictly
    inside a footprint and no higher than that building's roof."""
    centers = cell_centers(spec)
    cx, cy, cz = centers[..., 0], centers[..., 1], centers[..., 2]
    mask = np.zeros(spec.shape, dtype=bool)
    for b in buildings:
        mask |= (cx > b.x_min) & (cx < b.x_max) & (cy > b.y_min) & (cy < b.y_max) & (cz <= b.height)
    return mask


def derive_shadow_seed(seed: int) -> int:
    child = np.random.SeedSequence(seed).spawn(2)[1]
    return int(child.generate_state(1, dtype=np.uint64)[0])


def _draw_uniform(rng: np.random.Generator) -> float:
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return u


def _side_range(spec: RegionSpec, params: UrbanParams) -> tuple[int, int]:
    if params.building_count is not None:
        lo, hi = params.min_side, params.max_side
    else:
        area_km2 = spec.length * spec.width / 1e6
        expected = max(1.0, params.beta * area_km2)
        mean_side = math.sqrt(params.alpha * spec.length * spec.width / expected)
        mean_cells = mean_side / math.sqrt(spec.dx * spec.dy)
        lo = max(1, round(0.5 * mean_cells))
        hi = max(lo, round(1.5 * mean_cells))
    hi = min(hi, spec.nx, spec.ny)
    return min(lo, hi), hi


def generate_environment(spec: RegionSpec, params: UrbanParams) -> UrbanEnvironment:
    """Place buildings and rasterize them; a pure function of ``(spec, params)``."""
    placement_ss = np.random.SeedSequence(params.seed).spawn(2)[0]
    rng = np.random.default_rng(placement_ss)
    nx, ny = spec.nx, spec.ny
    lo, hi = _side_range(spec, params)

    occupied = np.zeros((nx, ny), dtype=bool)
    cells: list[tuple[int, int, int, int]] = []
    heights: list[float] = []
    coverage_mode = params.building_count is None
    total = nx * ny
    target = round(params.alpha * total)
    tol = COVERAGE_TOLERANCE * total
    covered = 0

    def done() -> bool:
        if coverage_mode:
            return covered >= target - tol
        return len(cells) >= params.building_count

    failures = 0
    while not done():
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        if coverage_mode:
            room = target + tol - covered
            if w * h > room:
                h = max(1, min(h, int(room // w)))
                if w * h > room:
                    w = max(1, int(room // h))
        i0 = int(rng.integers(0, nx - w + 1))
        j0 = int(rng.integers(0, ny - h + 1))
        if occupied[i0:i0 + w, j0:j0 + h].any():
            failures += 1
            if failures >= MAX_FAILED_ATTEMPTS:
                have = f"{covered / total:.3f} coverage" if coverage_mode else f"{len(cells)} buildings"
                raise PlacementError(f"could not place buildings: stopped at {have} after "
                                     f"{MAX_FAILED_ATTEMPTS} rejected attempts")
            continue
        failures = 0
        occupied[i0:i0 + w, j0:j0 + h] = True
        covered += w * h
        cells.append((i0, j0, w, h))
        heights.append(sample_height(params.gamma_h, _draw_uniform(rng), spec.height))

    buildings = tuple(
        Building(x_min=i0 * spec.dx, y_min=j0 * spec.dy,
                 x_max=min((i0 + w) * spec.dx, spec.length),
                 y_max=min((j0 + h) * spec.dy, spec.width), height=height)
        for (i0, j0, w, h), height in zip(cells, heights))
    return UrbanEnvironment(spec=spec, params=params, buildings=buildings,
                            mask=rasterize(spec, buildings),
                            shadow_seed=derive_shadow_seed(params.seed))


def environment_from_buildings(spec: RegionSpec, params: UrbanParams, buildings,
                               shadow_seed: int | None = None) -> UrbanEnvironment:
    """Assemble an environment from an explicit building list (mask recomputed)."""
    buildings = tuple(buildings)
    for b in buildings:
        if not (b.x_min < b.x_max and b.y_min < b.y_max and 0 < b.height <= spec.height):
            raise ValueError(f"invalid building {b}")
        if b.x_min < 0 or b.y_min < 0 or b.x_max > spec.length or b.y_max > spec.width:
            raise ValueError(f"building {b} extends outside the region")
    for a_idx, a in enumerate(buildings):
        for b in buildings[a_idx + 1:]:
            if a.overlaps(b):
                raise ValueError(f"buildings overlap: {a} and {b}")
    if shadow_seed is None:
        shadow_seed = derive_shadow_seed(params.seed)
    return UrbanEnvironment(spec=spec, params=params, buildings=buildings,
                            mask=rasterize(spec, buildings), shadow_seed=int(shadow_seed))
