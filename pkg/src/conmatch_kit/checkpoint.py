"""Array container: a JSON manifest plus one flat little-endian binary file."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT = "conmatch-kit-arrays"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_numpy(a) -> np.ndarray:
    if torch.is_tensor(a):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def save_arrays(prefix: str | Path, arrays: Mapping[str, object], meta: dict | None = None) -> Path:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(f"{prefix}.bin", "wb") as fh:
        for name, value in arrays.items():
            arr = _as_numpy(value)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            data = np.ascontiguousarray(le).tobytes()
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(data)}
            )
            fh.write(data)
            offset += len(data)
    manifest = {"format": FORMAT, "version": VERSION, "entries": entries, "meta": meta or {}}
    path = Path(f"{prefix}.manifest")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_arrays(prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(str(prefix).removesuffix(".manifest"))
    manifest = json.loads(Path(f"{prefix}.manifest").read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported container version {manifest.get('version')}")
    blob = Path(f"{prefix}.bin").read_bytes()
    arrays = {}
    for e in manifest["entries"]:
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def module_arrays(module: torch.nn.Module, namespace: str) -> dict[str, np.ndarray]:
    return {f"{namespace}/{k}": _as_numpy(v) for k, v in module.state_dict().items()}


def restore_module(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], namespace: str) -> None:
    prefix = f"{namespace}/"
    state = {k[len(prefix) :]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)
