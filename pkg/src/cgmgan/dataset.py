"""CGM corpus: base-station sampling, binary CGM files, manifest and splits.

A dataset directory looks like::

    manifest.json      sample list, split membership, environment hash
    environment.json   copy of the environment file the maps came from
    cgm/00000.cgm ...  one binary CGM per base station

CGM file layout (little endian)::

    8s   magic  b"CGMTNSR\\x00"
    u32  version
    u32  nx, ny, nz
    f64  bs x, y, z
    32s  SHA-256 environment hash
    f32  nx*ny*nz gains, x fastest, then y, z slowest
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envfile import environment_hash, save_environment
from .grid import Point3, cell_centers
from .radiosim import ChannelParams, Cgm, generate_cgm
from .urbangen import UrbanEnvironment

CGM_MAGIC = b"CGMTNSR\x00"
CGM_VERSION = 1
_HEADER = struct.Struct("<8sI3I3d32s")
MANIFEST = "manifest.json"
ENV_FILE = "environment.json"
DEFAULT_MIX = (0.4, 0.3, 0.3)


class CgmFileError(ValueError):
    """Base class for CGM file validation failures."""


class CorruptCgmError(CgmFileError):
    pass


class ShapeMismatchError(CgmFileError):
    pass


class EnvHashMismatchError(CgmFileError):
    pass


class BsType(enum.Enum):
    GBS = "GBS"
    SBS = "SBS"
    ABS = "ABS"


# ---------------------------------------------------------------------------
# Binary CGM files


def encode_cgm_file(cgm: Cgm) -> bytes:
    nx, ny, nz = cgm.gains_db.shape
    header = _HEADER.pack(CGM_MAGIC, CGM_VERSION, nx, ny, nz, *cgm.bs, cgm.env_ref)
    payload = np.asarray(cgm.gains_db, dtype="<f4").tobytes(order="F")
    return header + payload


def save_cgm(path, cgm: Cgm) -> int:
    blob = encode_cgm_file(cgm)
    Path(path).write_bytes(blob)
    return len(blob)


def load_cgm(path, expected_env: bytes | None = None, expected_shape=None) -> Cgm:
    """Read a CGM file, validating magic, version, size, shape and environment."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptCgmError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, nx, ny, nz, x, y, z, env_ref = _HEADER.unpack_from(blob, 0)
    if magic != CGM_MAGIC:
        raise CorruptCgmError(f"{path}: bad magic {magic!r}")
    if version != CGM_VERSION:
        raise CorruptCgmError(f"{path}: unsupported version {version}")
    count = nx * ny * nz
    if len(blob) != _HEADER.size + 4 * count:
        raise CorruptCgmError(f"{path}: payload holds {len(blob) - _HEADER.size} bytes, "
                              f"header promises {4 * count}")
    if expected_shape is not None and (nx, ny, nz) != tuple(expected_shape):
        raise ShapeMismatchError(f"{path}: shape {(nx, ny, nz)} != expected {tuple(expected_shape)}")
    if expected_env is not None and env_ref != expected_env:
        raise EnvHashMismatchError(f"{path}: environment hash {env_ref.hex()[:16]}... does not "
                                   f"match {expected_env.hex()[:16]}...")
    gains = np.frombuffer(blob, dtype="<f4", count=count, offset=_HEADER.size)
    gains = gains.reshape((nx, ny, nz), order="F").astype(np.float32)
    return Cgm(bs=Point3(x, y, z), gains_db=gains, env_ref=env_ref)


# ---------------------------------------------------------------------------
# Base-station sampling


def admissible_cells(env: UrbanEnvironment, bs_type: BsType) -> np.ndarray:
    """Boolean mask of free cells where a base station of ``bs_type`` may sit."""
    free = ~env.mask
    if bs_type is BsType.GBS:
        out = np.zeros_like(free)
        out[:, :, 0] = free[:, :, 0]
        return out
    if bs_type is BsType.SBS:
        occ = env.mask
        near = np.zeros_like(occ)
        near[1:] |= occ[:-1]
        near[:-1] |= occ[1:]
        near[:, 1:] |= occ[:, :-1]
        near[:, :-1] |= occ[:, 1:]
        near[:, :, 1:] |= occ[:, :, :-1]
        near[:, :, :-1] |= occ[:, :, 1:]
        return free & near
    median = float(np.median([b.height for b in env.buildings])) if env.buildings else 0.0
    z = cell_centers(env.spec)[..., 2]
    return free & (z > median)


def _type_counts(count: int, mix) -> list[int]:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (3,) or (mix < 0).any() or not np.isclose(mix.sum(), 1.0):
        raise ValueError(f"mix must be three nonnegative fractions summing to 1, got {tuple(mix)}")
    raw = mix * count
    counts = np.floor(raw).astype(int)
    # largest remainder, ties to the earlier type
    order = sorted(range(3), key=lambda t: (-(raw[t] - counts[t]), t))
    for t in order[:count - counts.sum()]:
        counts[t] += 1
    return [int(c) for c in counts]


def sample_bs_locations(env: UrbanEnvironment, count: int, mix=DEFAULT_MIX,
                        seed: int = 0) -> list[tuple[Point3, BsType]]:
    """Draw distinct free cell centers for base stations of the three types."""
    if count < 0:
        raise ValueError("count must be >= 0")
    counts = _type_counts(count, mix)
    rng = np.random.default_rng(seed)
    centers = cell_centers(env.spec)
    taken = np.zeros(env.spec.shape, dtype=bool)
    picks: list[tuple[Point3, BsType]] = []
    for bs_type, n in zip(BsType, counts):
        if n == 0:
            continue
        allowed = admissible_cells(env, bs_type) & ~taken
        cells = np.argwhere(allowed)
        if len(cells) < n:
            raise ValueError(f"{bs_type.value}: {n} base stations requested but only "
                             f"{len(cells)} admissible cells available")
        chosen = cells[np.sort(rng.choice(len(cells), size=n, replace=False))]
        for i, j, k in chosen:
            taken[i, j, k] = True
            picks.append((Point3(*(float(v) for v in centers[i, j, k])), bs_type))
    order = rng.permutation(len(picks))
    return [picks[i] for i in order]


# ---------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True)
class Sample:
    bs: Point3
    bs_type: BsType
    path: str


@dataclass(frozen=True, eq=False)
class CgmDataset:
    root: Path
    env_ref: bytes
    samples: tuple[Sample, ...]
    train: tuple[int, ...] = ()
    test: tuple[int, ...] = ()
    shape: tuple[int, int, int] = (0, 0, 0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.train) & set(self.test):
            raise ValueError("train and test splits overlap")
        n = len(self.samples)
        for i in (*self.train, *self.test):
            if not 0 <= i < n:
                raise ValueError(f"split index {i} out of range for {n} samples")

    def __len__(self) -> int:
        return len(self.samples)

    def coords(self, indices=None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.array([self.samples[i].bs for i in idx], dtype=np.float64).reshape(-1, 3)

    def load(self, index: int) -> Cgm:
        return load_cgm(self.root / self.samples[index].path, expected_env=self.env_ref,
                        expected_shape=self.shape)

    def load_many(self, indices) -> list[Cgm]:
        return [self.load(i) for i in indices]

    def stack(self, indices) -> np.ndarray:
        """Gains of the given samples as one float32 array (n, nx, ny, nz)."""
        out = np.empty((len(indices),) + tuple(self.shape), dtype=np.float32)
        for row, i in enumerate(indices):
            out[row] = self.load(i).gains_db
        return out

    def byte_size(self) -> int:
        return sum(os.path.getsize(self.root / s.path) for s in self.samples)


def _manifest_doc(ds: CgmDataset) -> dict:
    return {
        "format": "cgmgan-dataset",
        "version": 1,
        "env_ref": ds.env_ref.hex(),
        "environment": ENV_FILE,
        "shape": list(ds.shape),
        "samples": [{"path": s.path, "bs": list(s.bs), "type": s.bs_type.value}
                    for s in ds.samples],
        "split": {"train": list(ds.train), "test": list(ds.test)},
        "meta": ds.meta,
    }


def write_manifest(ds: CgmDataset) -> Path:
    path = ds.root / MANIFEST
    path.write_text(json.dumps(_manifest_doc(ds), sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def open_dataset(root, verify: bool = False) -> CgmDataset:
    """Load a dataset manifest; with ``verify`` every CGM file is checked."""
    root = Path(root)
    try:
        doc = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{root / MANIFEST}: malformed manifest ({exc})") from exc
    samples = tuple(Sample(Point3(*s["bs"]), BsType(s["type"]), s["path"]) for s in doc["samples"])
    ds = CgmDataset(root=root, env_ref=bytes.fromhex(doc["env_ref"]), samples=samples,
                    train=tuple(doc["split"]["train"]), test=tuple(doc["split"]["test"]),
                    shape=tuple(doc["shape"]), meta=doc.get("meta", {}))
    if verify:
        for i in range(len(ds)):
            ds.load(i)
    return ds


def build_dataset(env: UrbanEnvironment, params: ChannelParams, locations, out_dir,
                  meta: dict | None = None) -> CgmDataset:
    """Simulate one CGM per location and write files plus manifest under ``out_dir``."""
    root = Path(out_dir)
    (root / "cgm").mkdir(parents=True, exist_ok=True)
    env_ref = save_environment(root / ENV_FILE, env, params)
    assert env_ref == environment_hash(env, params)
    samples = []
    for n, (bs, bs_type) in enumerate(locations):
        rel = f"cgm/{n:05d}.cgm"
        cgm = generate_cgm(env, params, bs, env_ref=env_ref)
        save_cgm(root / rel, cgm)
        samples.append(Sample(Point3(*bs), BsType(bs_type), rel))
    ds = CgmDataset(root=root, env_ref=env_ref, samples=tuple(samples), shape=env.spec.shape,
                    meta=dict(meta or {}))
    write_manifest(ds)
    return ds


def split_dataset(ds: CgmDataset, train_count: int, seed: int = 0,
                  test_count: int | None = None) -> CgmDataset:
    """Draw a training subset from the non-test pool.

    The test set is created once (from ``test_count``) and then never
    changes.  Training subsets for one seed are nested: the first
    ``train_count`` entries of a fixed permutation of the pool.
    """
    n = len(ds.samples)
    test = ds.test
    if not test:
        if test_count is None:
            test_count = 0
        if not 0 <= test_count <= n:
            raise ValueError(f"test_count {test_count} out of range for {n} samples")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
        test = tuple(sorted(int(i) for i in rng.choice(n, size=test_count, replace=False)))
    elif test_count is not None and test_count != len(test):
        raise ValueError(f"dataset already has a fixed test set of {len(test)} samples")
    test_set = set(test)
    pool = [i for i in range(n) if i not in test_set]
    if not 0 <= train_count <= len(pool):
        raise ValueError(f"train_count {train_count} exceeds the {len(pool)} non-test samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    perm = rng.permutation(len(pool))[:train_count]
    train = tuple(sorted(pool[i] for i in perm))
    return replace(ds, train=train, test=test)
