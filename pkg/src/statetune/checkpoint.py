"""Two-part checkpoint files.

Line 1 is a single-line UTF-8 JSON manifest terminated by ``\\n``; the rest
of the file holds raw little-endian float32 arrays at the offsets listed in
``manifest["tensors"]`` (relative to the first byte after the newline).
Arithmetic elsewhere is float64; only persistence is 32-bit.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .core import FrozenWeights, ModelDims
from .errors import DigestError, FormatError

FORMAT_NAME = "statetune-checkpoint"
DTYPE = np.dtype("<f4")


def _digest32(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=DTYPE).tobytes()).hexdigest()


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> dict:
    """Write ``tensors`` (name -> array) and return the manifest written."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=DTYPE)
        if not np.all(np.isfinite(data)):
            raise FormatError(f"tensor {name!r} has non-finite entries")
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset,
                        "nbytes": len(raw), "digest": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_NAME, "version": 1, "dtype": "float32-le",
                "tensors": entries, **(meta or {})}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)
    return manifest


def load_checkpoint(path):
    """Return (tensors as float64 arrays, manifest); verifies every tensor digest."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{path}: not a {FORMAT_NAME} file")
    data = blob[nl + 1:]
    tensors = {}
    for entry in manifest.get("tensors", []):
        start, n = int(entry["offset"]), int(entry["nbytes"])
        raw = data[start:start + n]
        if len(raw) != n:
            raise FormatError(f"{path}: tensor {entry['name']!r} truncated")
        if hashlib.sha256(raw).hexdigest() != entry["digest"]:
            raise DigestError(f"{path}: digest mismatch for tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
    return tensors, manifest


def weights_meta(weights: FrozenWeights) -> dict:
    return {"weights": weights.describe()}


def restore_weights(manifest) -> FrozenWeights:
    """Regenerate frozen weights from a manifest and check their digest."""
    info = manifest.get("weights")
    if info is None:
        raise FormatError("manifest carries no frozen-weight description")
    weights = FrozenWeights.generate(ModelDims(**info["dims"]), info["seed"],
                                     decay_bias=info["decay_bias"])
    if weights.digest != info["digest"]:
        raise DigestError("frozen weights regenerated from the manifest do not match its digest")
    return weights


def verify_fixed_tensors(tensors, lift) -> None:
    """Check stored supports and Q against a rebuilt lift (at float32 precision)."""
    for name, ref in (("kernel.supports", lift.supports.vectors), ("kernel.q", lift.Q)):
        if name in tensors and _digest32(tensors[name]) != _digest32(ref):
            raise DigestError(f"stored {name} differs from the fixed value")
