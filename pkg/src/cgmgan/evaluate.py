"""Accuracy metric, comparison sweeps, slice export and the run report."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .baseline import idw_interpolate
from .cgan import GanModel, Hyper, Normalizer, infer_many, train
from .dataset import split_dataset
from .grid import RegionSpec, locate_many
from .radiosim import Cgm

AXES = {"x": 0, "y": 1, "z": 2}


def amse(truth, inferred, mask: np.ndarray | None = None) -> float:
    """Average mean squared error in dB^2 over maps and grid cells.

    ``mask`` (same shape as one map) restricts the average to the selected
    cells, e.g. the free cells of the environment.
    """
    truth, inferred = list(truth), list(inferred)
    if not truth or len(truth) != len(inferred):
        raise ValueError(f"need equally long non-empty lists, got {len(truth)} and {len(inferred)}")
    total = 0.0
    count = 0
    for t, e in zip(truth, inferred):
        if isinstance(t, Cgm) and isinstance(e, Cgm) and tuple(t.bs) != tuple(e.bs):
            raise ValueError(f"maps are not aligned: {tuple(t.bs)} vs {tuple(e.bs)}")
        a = np.asarray(getattr(t, "gains_db", t), dtype=np.float64)
        b = np.asarray(getattr(e, "gains_db", e), dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        sq = (a - b) ** 2
        if mask is not None:
            sq = sq[mask]
        total += float(sq.sum())
        count += sq.size
    return total / count


def _test_arrays(ds):
    return ds.coords(ds.test), ds.stack(ds.test)


def k_sweep(ds, k_range, p: float = 2.0, free_mask: np.ndarray | None = None,
            train_maps: np.ndarray | None = None) -> list[dict]:
    """IDW accuracy on the test split for every K in ``k_range``."""
    if not ds.test:
        raise ValueError("dataset has no test split")
    coords = ds.coords(ds.train)
    maps = ds.stack(ds.train) if train_maps is None else train_maps
    t_coords, t_maps = _test_arrays(ds)
    rows = []
    for k in k_range:
        if k > len(coords):
            break
        est = [idw_interpolate(coords, maps, o, k, p) for o in t_coords]
        row = {"k": int(k), "amse": amse(t_maps, est)}
        if free_mask is not None:
            row["amse_free"] = amse(t_maps, est, free_mask)
        rows.append(row)
    return rows


def gan_test_amse(model: GanModel, ds, free_mask: np.ndarray | None = None) -> dict:
    t_coords, t_maps = _test_arrays(ds)
    est = [c.gains_db for c in infer_many(model, t_coords)]
    out = {"amse": amse(t_maps, est)}
    if free_mask is not None:
        out["amse_free"] = amse(t_maps, est, free_mask)
        out["amse_building"] = amse(t_maps, est, ~free_mask) if (~free_mask).any() else 0.0
    return out


def size_sweep(ds, side: int, normalizer: Normalizer, hyper: Hyper, sizes, seed: int = 0,
               k_range=range(1, 13), p: float = 2.0, free_mask: np.ndarray | None = None,
               log=None) -> tuple[list[dict], dict]:
    """Retrain the GAN on nested training subsets with the test split fixed.

    Returns the table rows and the trained models keyed by size.
    """
    rows, models = [], {}
    for size in sizes:
        sub = split_dataset(ds, int(size), seed)
        model = GanModel.create(side, normalizer, hyper, env_ref=ds.env_ref)
        trained, trace = train(model, sub.coords(sub.train), sub.stack(sub.train), hyper)
        gan = gan_test_amse(trained, sub, free_mask)
        ks = k_sweep(sub, k_range, p, free_mask)
        best = min(ks, key=lambda r: (r["amse"], r["k"]))
        row = {"train_count": int(size), "amse_gan": gan["amse"], "amse_idw_best": best["amse"],
               "best_k": best["k"]}
        if free_mask is not None:
            row["amse_gan_free"] = gan["amse_free"]
            row["amse_idw_best_free"] = best["amse_free"]
        rows.append(row)
        models[int(size)] = (trained, trace)
        if log is not None:
            log(row)
    return rows, models


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# Slices


def slice_plane(gains: np.ndarray, spec: RegionSpec, axis: str, position: float):
    """Plane of cells whose centers are nearest ``position`` along ``axis``.

    Returns the 2-D plane (remaining axes in x, y, z order) and the 1-based
    layer index.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    a = AXES[axis]
    extent = spec.extents[a]
    if not 0 <= position <= extent:
        raise ValueError(f"position {position} outside [0, {extent}] along {axis}")
    point = np.zeros((1, 3))
    point[0, a] = position
    layer = int(locate_many(spec, point)[0, a])
    return np.take(np.asarray(gains), layer, axis=a), layer + 1


def _ramp(t: np.ndarray) -> np.ndarray:
    # blue -> cyan -> yellow -> red
    stops = np.array([[0, 0, 160], [0, 200, 255], [255, 230, 0], [200, 0, 0]], dtype=np.float64)
    pos = np.clip(t, 0.0, 1.0) * (len(stops) - 1)
    i = np.minimum(pos.astype(int), len(stops) - 2)
    f = (pos - i)[..., None]
    return np.rint(stops[i] * (1 - f) + stops[i + 1] * f).astype(np.uint8)


def write_ppm(path, plane: np.ndarray, lo: float, hi: float) -> None:
    """Binary PPM heatmap; first plane axis runs left to right, second bottom to top."""
    t = (np.asarray(plane, dtype=np.float64) - lo) / (hi - lo)
    rgb = _ramp(t.T[::-1])
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_plane_csv(path, plane: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(plane, dtype=np.float32):
            writer.writerow([repr(float(v)) for v in row])


def read_plane_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=np.float32)


def export_slices(cgm: Cgm, spec: RegionSpec, axis: str, position: float, prefix,
                  lo: float = -250.0, hi: float = -70.0) -> dict:
    """Write ``<prefix>.ppm`` and ``<prefix>.csv`` for one slice of a CGM."""
    plane, layer = slice_plane(cgm.gains_db, spec, axis, position)
    prefix = str(prefix)
    write_ppm(prefix + ".ppm", plane, lo, hi)
    write_plane_csv(prefix + ".csv", plane)
    return {"axis": axis, "position": position, "layer": layer,
            "ppm": prefix + ".ppm", "csv": prefix + ".csv"}


# ---------------------------------------------------------------------------
# Report


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8")) if path and Path(path).exists() else None


def build_report(dataset_dir, checkpoint, evaluation=None, trace=None, config=None) -> dict:
    """Assemble the run report purely from artifacts on disk."""
    from .cgan import load_checkpoint
    from .dataset import open_dataset

    ds = open_dataset(dataset_dir)
    model = load_checkpoint(checkpoint)
    ds_bytes = ds.byte_size()
    ckpt_bytes = os.path.getsize(checkpoint)
    # storage needed at inference time: the generator weights only
    gen_bytes = 4 * model.generator.param_count() + 4 * sum(
        b.size for _, b in model.generator.named_buffers())
    return {
        "dataset": {"samples": len(ds), "train": len(ds.train), "test": len(ds.test),
                    "env_ref": ds.env_ref.hex(), "bytes": ds_bytes, "meta": ds.meta},
        "model": {"side": model.side, "hyper": model.hyper.to_dict(),
                  "normalizer": model.normalizer.to_dict(), "param_counts": model.param_counts(),
                  "checkpoint_bytes": ckpt_bytes, "generator_bytes": gen_bytes, "meta": model.meta},
        "storage_ratio": ckpt_bytes / ds_bytes if ds_bytes else None,
        "generator_storage_ratio": gen_bytes / ds_bytes if ds_bytes else None,
        "evaluation": _read_json(evaluation),
        "loss_trace": _read_json(trace),
        "config": _read_json(config),
    }


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
