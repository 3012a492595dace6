"""Parameter store: ``manifest.json`` plus raw little-endian float64 ``params.bin``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


def save_checkpoint(directory, params: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write parameters in sorted-name order; ``meta`` is echoed into the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=DTYPE, order="C")
        chunks.append(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    manifest = {"format_version": FORMAT_VERSION, "dtype": "float64-le", "params": entries}
    manifest.update(meta or {})
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Return ``(params, manifest)``; offsets must tile the blob exactly."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = (directory / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {directory}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{directory / MANIFEST}: invalid JSON") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.get('format_version')!r}")
    params, expect = {}, 0
    for e in manifest["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * DTYPE.itemsize
        if e["offset"] != expect or e["nbytes"] != n:
            raise CheckpointError(f"parameter {e['name']}: offsets are not contiguous")
        params[e["name"]] = np.frombuffer(blob, DTYPE, n // DTYPE.itemsize, e["offset"]).reshape(tuple(e["shape"])).copy()
        expect += n
    if expect != len(blob):
        raise CheckpointError(f"{BLOB} has {len(blob)} bytes, manifest describes {expect}")
    return params, manifest
