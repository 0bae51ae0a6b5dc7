"""Single-file checkpoint container: JSON header + named raw tensors.

Layout (little-endian)::

    bytes 0..7   magic  b"SLENC\\x01\\n\\xff"
    bytes 8..11  uint32 header length
    header       UTF-8 JSON: format, hyperparams, extractors, seed, version,
                 and a "tensors" index of {name, shape, dtype, offset, nbytes}
    payload      concatenated tensor bytes, row-major, in index order

Tensor names are the encoder/head state-dict keys, sorted, so the file is
byte-stable for identical parameters.
"""

from __future__ import annotations

import json
import struct
import subprocess
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import MissingArtifactError

MAGIC = b"SLENC\x01\n\xff"
CKPT_FORMAT = "cobra-lite-ckpt/1"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def code_version() -> str:
    """Package version, with git describe appended when available."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).parent,
        )
        if desc.returncode == 0:
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor],
                    meta: dict) -> None:
    """Write named tensors plus metadata. ``meta`` must be JSON-serializable."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(state):
        t = state[name].detach().cpu()
        arr = t.numpy()
        if arr.dtype == np.float32:
            code = "<f4"
        elif arr.dtype == np.float64:
            code = "<f8"
        else:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        blob = np.ascontiguousarray(arr).astype(code, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    header = dict(meta)
    header["format"] = CKPT_FORMAT
    header.setdefault("version", code_version())
    header["tensors"] = entries
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Returns (header, state) where state maps names to torch tensors."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise MissingArtifactError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(raw[start : start + header_len].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise MissingArtifactError(
            f"{path}: unsupported checkpoint format {header.get('format')!r}"
        )
    payload = raw[start + header_len :]
    state: dict[str, torch.Tensor] = {}
    for ent in header["tensors"]:
        dt = _DTYPES[ent["dtype"]]
        arr = np.frombuffer(
            payload, dtype=dt, count=int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1,
            offset=ent["offset"],
        ).reshape(ent["shape"]).copy()
        state[ent["name"]] = torch.from_numpy(arr)
    return header, state
