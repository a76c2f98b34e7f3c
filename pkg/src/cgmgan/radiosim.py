"""Synthetic ground-truth channel gains over the voxel grid.

The gain from a base station at ``o`` to a receiver at ``q`` is a
log-distance path loss whose intercept, exponent and shadowing spread
switch on whether the straight segment ``o -> q`` crosses a building voxel,
plus a smooth shadowing field over receiver position.  Building cells hold
the floor value ``gamma_min_db``; free cells are clipped to
``[gamma_min_db, gamma_clip_db]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .envfile import environment_hash
from .grid import Point3, RegionSpec, cell_centers, contains, locate_many
from .urbangen import UrbanEnvironment


@dataclass(frozen=True)
class ChannelParams:
    k_db_los: float = -40.0
    k_db_nlos: float = -50.0
    n_pl_los: float = 2.2
    n_pl_nlos: float = 3.5
    sigma_sh_los: float = 4.0
    sigma_sh_nlos: float = 8.0
    shadow_corr_len: float = 32.0
    gamma_min_db: float = -250.0
    gamma_clip_db: float = -70.0
    d_ref: float = 1.0
    multipath_db: float = 0.0

    def __post_init__(self) -> None:
        if self.n_pl_los <= 0 or self.n_pl_nlos <= 0:
            raise ValueError("path-loss exponents must be > 0")
        if self.sigma_sh_los < 0 or self.sigma_sh_nlos < 0:
            raise ValueError("shadowing standard deviations must be >= 0")
        if not self.gamma_min_db < self.gamma_clip_db:
            raise ValueError("gamma_min_db must be below gamma_clip_db")
        if self.d_ref <= 0 or self.shadow_corr_len <= 0:
            raise ValueError("d_ref and shadow_corr_len must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ChannelParams":
        if not d:
            return cls()
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown channel parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class Cgm:
    """Channel gain map of one base station: dB gains at every cell center."""

    bs: Point3
    gains_db: np.ndarray
    env_ref: bytes = b"\x00" * 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "bs", Point3(*(float(v) for v in self.bs)))
        object.__setattr__(self, "gains_db", np.asarray(self.gains_db, dtype=np.float32))
        if self.gains_db.ndim != 3:
            raise ValueError(f"CGM tensor must be 3-D, got shape {self.gains_db.shape}")
        if len(self.env_ref) != 32:
            raise ValueError("env_ref must be a 32-byte hash")


# ---------------------------------------------------------------------------
# Line of sight


def segments_blocked(mask: np.ndarray, spec: RegionSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Voxel-traversal blockage test for a batch of segments.

    ``a`` and ``b`` are (n, 3) arrays (either may be a single (3,) point).
    Walks every voxel each segment passes through (Amanatides-Woo DDA in
    cell units) and reports whether any voxel other than the two endpoint
    cells is occupied.  Axis crossings are ordered by cross-multiplying
    boundary distances instead of accumulating ``tMax`` so that exact ties
    (a segment through a voxel edge or corner) are detected exactly and
    stepped on all tied axes at once; the walk is then the same in both
    directions.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    a, b = np.broadcast_arrays(a, b)
    n = a.shape[0]
    size = np.asarray(spec.cell_size)
    u0 = a / size
    u1 = b / size
    c0 = locate_many(spec, a)
    c1 = locate_many(spec, b)

    delta = u1 - u0
    span = np.abs(delta)
    sgn = np.sign(c1 - c0)
    remaining = np.abs(c1 - c0)
    remaining[span == 0] = 0
    # distance (cell units, along travel) from the start to the next boundary
    dist = np.where(sgn > 0, c0 + 1 - u0, u0 - c0)
    dist = np.maximum(dist, 0.0)

    blocked = np.zeros(n, dtype=bool)
    cur = c0.copy()
    active = np.flatnonzero(remaining.sum(axis=1) > 0)
    nx, ny, nz = spec.shape
    flat_mask = mask.reshape(-1)
    while active.size:
        rem = remaining[active]
        dst = dist[active]
        spn = span[active]
        steppable = rem > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(steppable, dst / np.where(steppable, spn, 1.0), np.inf)
        m = np.argmin(t, axis=1)
        rows = np.arange(active.size)
        dm = dst[rows, m][:, None]
        sm = spn[rows, m][:, None]
        # exact tie test against the leading axis
        chosen = steppable & (dst * sm <= dm * spn)
        step = chosen.astype(np.int64)
        cur[active] += step * sgn[active]
        remaining[active] -= step
        dist[active] += step
        not_end = remaining[active].sum(axis=1) > 0
        c = cur[active]
        occ = flat_mask[(c[:, 0] * ny + c[:, 1]) * nz + c[:, 2]]
        hit = occ & not_end
        blocked[active[hit]] = True
        active = active[not_end & ~hit]
    return blocked


def los_blocked(env: UrbanEnvironment, a, b) -> bool:
    """True iff the segment ``a -> b`` passes through a building voxel
    (endpoint cells excluded)."""
    for p in (a, b):
        if not contains(env.spec, p):
            raise ValueError(f"point {tuple(p)} outside region")
    return bool(segments_blocked(env.mask, env.spec, np.asarray(a), np.asarray(b))[0])


# ---------------------------------------------------------------------------
# Shadowing


@functools.lru_cache(maxsize=32)
def _shadow_lattice(seed: int, spec: RegionSpec, corr_len: float):
    shape = tuple(math.ceil(e / corr_len) + 1 for e in spec.extents)
    nodes = np.random.default_rng(seed).standard_normal(shape)
    # standardize the interpolated field over the region (midpoint rule)
    res = 64
    axes = [(np.arange(res) + 0.5) * e / res for e in spec.extents]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    raw = _trilinear(nodes, corr_len, pts)
    return nodes, float(raw.mean()), float(raw.std())


def _trilinear(nodes: np.ndarray, corr_len: float, pts: np.ndarray) -> np.ndarray:
    g = np.asarray(pts, dtype=np.float64) / corr_len
    i0 = np.clip(np.floor(g).astype(np.int64), 0, np.asarray(nodes.shape) - 2)
    f = g - i0
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    # eight corner terms in fixed order
    return (nodes[ix, iy, iz] * gx * gy * gz
            + nodes[ix + 1, iy, iz] * fx * gy * gz
            + nodes[ix, iy + 1, iz] * gx * fy * gz
            + nodes[ix + 1, iy + 1, iz] * fx * fy * gz
            + nodes[ix, iy, iz + 1] * gx * gy * fz
            + nodes[ix + 1, iy, iz + 1] * fx * gy * fz
            + nodes[ix, iy + 1, iz + 1] * gx * fy * fz
            + nodes[ix + 1, iy + 1, iz + 1] * fx * fy * fz)


def unit_shadow_field(env: UrbanEnvironment, points, corr_len: float = 32.0) -> np.ndarray:
    """Zero-mean, unit-variance smooth field over receiver positions."""
    nodes, mean, std = _shadow_lattice(env.shadow_seed, env.spec, float(corr_len))
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return (_trilinear(nodes, corr_len, pts) - mean) / std


def shadowing_db(env: UrbanEnvironment, q, sigma: float, corr_len: float = 32.0) -> float:
    if sigma == 0:
        return 0.0
    return float(sigma * unit_shadow_field(env, q, corr_len)[0])


# ---------------------------------------------------------------------------
# Gains


def _free_gains(env: UrbanEnvironment, params: ChannelParams, o, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    o = np.asarray(o, dtype=np.float64)
    blocked = segments_blocked(env.mask, env.spec, o, points)
    d = np.sqrt(((points - o) ** 2).sum(axis=1))
    d = np.maximum(d, params.d_ref)
    k_db = np.where(blocked, params.k_db_nlos, params.k_db_los)
    n_pl = np.where(blocked, params.n_pl_nlos, params.n_pl_los)
    sigma = np.where(blocked, params.sigma_sh_nlos, params.sigma_sh_los)
    shadow = sigma * unit_shadow_field(env, points, params.shadow_corr_len)
    gains = k_db - 10.0 * n_pl * np.log10(d) + shadow + params.multipath_db
    return np.clip(gains, params.gamma_min_db, params.gamma_clip_db)


def _check_bs(env: UrbanEnvironment, o) -> None:
    if not contains(env.spec, o):
        raise ValueError(f"base station {tuple(o)} outside region")
    i, j, k = locate_many(env.spec, np.asarray(o, dtype=np.float64).reshape(1, 3))[0]
    if env.mask[i, j, k]:
        raise ValueError(f"base station {tuple(o)} lies inside a building")


def gain_db(env: UrbanEnvironment, params: ChannelParams, o, q) -> float:
    """Channel gain in dB from a base station at ``o`` to a receiver at ``q``."""
    _check_bs(env, o)
    if not contains(env.spec, q):
        raise ValueError(f"receiver {tuple(q)} outside region")
    i, j, k = locate_many(env.spec, np.asarray(q, dtype=np.float64).reshape(1, 3))[0]
    if env.mask[i, j, k]:
        return float(params.gamma_min_db)
    return float(_free_gains(env, params, o, np.asarray(q, dtype=np.float64))[0])


def generate_cgm(env: UrbanEnvironment, params: ChannelParams, o,
                 env_ref: bytes | None = None) -> Cgm:
    """Evaluate the gain at every cell center for a base station at ``o``."""
    _check_bs(env, o)
    centers = cell_centers(env.spec).reshape(-1, 3)
    free = ~env.mask.reshape(-1)
    gains = np.full(centers.shape[0], params.gamma_min_db, dtype=np.float64)
    gains[free] = _free_gains(env, params, o, centers[free])
    if env_ref is None:
        env_ref = environment_hash(env, params)
    return Cgm(bs=Point3(*o), gains_db=gains.reshape(env.spec.shape).astype(np.float32),
               env_ref=env_ref)
