"""Environment file: region, generator parameters, buildings and channel block.

The document is JSON.  Floats are written with ``repr`` precision so that a
load reproduces every coordinate bit for bit; the occupancy mask is never
stored and is recomputed from the building list on load.  The identity hash
of an environment is the SHA-256 of its canonical serialization, so CGM
files can be tied to the exact scene (and channel model) that produced them.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .grid import RegionSpec
from .urbangen import Building, UrbanEnvironment, UrbanParams, environment_from_buildings

FORMAT = "cgmgan-environment"
VERSION = 1


def environment_document(env: UrbanEnvironment, channel=None) -> dict:
    # floats are coerced so that 128 and 128.0 hash identically
    params = env.params.to_dict()
    for key in ("alpha", "beta", "gamma_h"):
        params[key] = float(params[key])
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "region": {k: float(v) for k, v in env.spec.to_dict().items()},
        "params": params,
        "shadow_seed": int(env.shadow_seed),
        "buildings": [[float(v) for v in b.to_list()] for b in env.buildings],
    }
    if channel is not None:
        block = channel.to_dict() if hasattr(channel, "to_dict") else dict(channel)
        doc["channel"] = {k: float(v) for k, v in block.items()}
    return doc


def canonical_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")


def environment_hash(env: UrbanEnvironment, channel=None) -> bytes:
    """32-byte identity of (environment, channel parameters)."""
    return hashlib.sha256(canonical_bytes(environment_document(env, channel))).digest()


def save_environment(path, env: UrbanEnvironment, channel=None) -> bytes:
    """Write the environment file and return its identity hash."""
    blob = canonical_bytes(environment_document(env, channel))
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).digest()


def load_environment(path) -> tuple[UrbanEnvironment, dict | None]:
    """Read an environment file; returns the environment and the raw channel block."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a valid environment file ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not an environment file (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported environment version {doc.get('version')!r}")
    spec = RegionSpec.from_dict(doc["region"])
    params = UrbanParams.from_dict(doc["params"])
    buildings = [Building(*map(float, row)) for row in doc["buildings"]]
    env = environment_from_buildings(spec, params, buildings, shadow_seed=int(doc["shadow_seed"]))
    return env, doc.get("channel")
