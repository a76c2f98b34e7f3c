"""Inverse-distance-weighted CGM inference from the K nearest stored maps."""

from __future__ import annotations

import numpy as np

from .grid import Point3
from .radiosim import Cgm


def idw_weights(coords: np.ndarray, target, k: int, p: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` nearest base stations and their normalized weights.

    Distance ties keep dataset order.  If the target coincides with a stored
    base station, that map alone gets weight 1.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) == 0:
        raise ValueError("IDW needs a non-empty training set")
    if not 1 <= k <= len(coords):
        raise ValueError(f"k={k} must lie in [1, {len(coords)}]")
    if not p > 0:
        raise ValueError(f"power exponent must be > 0, got {p}")
    d = np.sqrt(((coords - np.asarray(target, dtype=np.float64)) ** 2).sum(axis=1))
    nearest = np.argsort(d, kind="stable")[:k]
    dn = d[nearest]
    if dn[0] == 0.0:
        return nearest[:1], np.ones(1)
    w = dn ** -p
    return nearest, w / w.sum()


def idw_interpolate(coords: np.ndarray, maps: np.ndarray, target, k: int,
                    p: float = 2.0) -> np.ndarray:
    """Weighted mean of the nearest maps, in float64."""
    idx, w = idw_weights(coords, target, k, p)
    return np.tensordot(w, np.asarray(maps, dtype=np.float64)[idx], axes=1)


def idw_infer(ds, target, k: int, p: float = 2.0, maps: np.ndarray | None = None) -> Cgm:
    """IDW estimate of the CGM at ``target`` from the dataset's training split.

    ``maps`` may carry the pre-loaded training gains (aligned with
    ``ds.train``) to avoid re-reading files in sweeps.
    """
    coords = ds.coords(ds.train)
    idx, w = idw_weights(coords, target, k, p)
    if maps is None:
        picked = np.stack([ds.load(ds.train[i]).gains_db for i in idx]).astype(np.float64)
    else:
        picked = np.asarray(maps, dtype=np.float64)[idx]
    gains = np.tensordot(w, picked, axes=1)
    return Cgm(bs=Point3(*(float(v) for v in target)), gains_db=gains.astype(np.float32),
               env_ref=ds.env_ref)
