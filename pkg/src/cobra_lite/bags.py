"""Patch-embedding bags and their on-disk container format.

A bag is the atomic input unit: the ``N_t x d`` matrix of patch-embedding
vectors one frozen extractor produced for one slide, tagged with patient,
slide, extractor and magnification.

File layout (little-endian throughout)::

    bytes 0..7   magic  b"PBAG\\x01\\n\\xff\\n"
    bytes 8..11  uint32 header length in bytes
    header       UTF-8 JSON: patient_id, slide_id, extractor_id,
                 magnification_mpp, n_tiles, dim, dtype (always "<f4")
    payload      n_tiles * dim float32 values, row-major

The format is self-describing and has no third-party dependencies, so bags
round-trip bit-exactly and can be read from any language.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BagHeaderError, BagPayloadError, BagValueError

MAGIC = b"PBAG\x01\n\xff\n"
_DTYPE_CODE = "<f4"

DEFAULT_EXTRACTOR_DIMS = (768, 1024, 1280, 1536)
DEFAULT_MAGNIFICATIONS = (0.5, 1.14, 2.0)


@dataclass(frozen=True)
class ExtractorSpec:
    """One frozen feature extractor: its id, output dim and map seed."""

    id: str
    dim: int
    seed: int = 0

    def validate(self) -> None:
        if not self.id:
            raise ValueError("extractor id must be a non-empty string")
        if self.dim <= 0:
            raise ValueError(f"extractor {self.id!r}: dim must be > 0, got {self.dim}")


@dataclass
class PatchBag:
    """A matrix of patch embeddings from one (slide, extractor, magnification)."""

    patient_id: str
    slide_id: str
    extractor_id: str
    magnification_mpp: float
    features: np.ndarray  # (n_tiles, dim) float32

    @property
    def n_tiles(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def validate(self) -> None:
        f = self.features
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("bag must contain at least one tile")
        if f.dtype != np.float32:
            raise ValueError(f"features must be float32, got {f.dtype}")
        if not np.isfinite(f).all():
            raise ValueError("bag contains non-finite values")


def write_bag(bag: PatchBag, path: str | Path) -> None:
    """Serialize a validated bag. Round-trips bit-exactly through read_bag."""
    bag.validate()
    header = {
        "patient_id": bag.patient_id,
        "slide_id": bag.slide_id,
        "extractor_id": bag.extractor_id,
        "magnification_mpp": float(bag.magnification_mpp),
        "n_tiles": bag.n_tiles,
        "dim": bag.dim,
        "dtype": _DTYPE_CODE,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(bag.features, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_bag(path: str | Path) -> PatchBag:
    """Parse a bag file, distinguishing header, payload and value errors."""
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < len(MAGIC) + 4:
        raise BagHeaderError(f"{path}: file shorter than magic + header length")
    if raw[: len(MAGIC)] != MAGIC:
        raise BagHeaderError(f"{path}: bad magic bytes")

    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if len(raw) < header_end:
        raise BagHeaderError(f"{path}: truncated header")
    try:
        header = json.loads(raw[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BagHeaderError(f"{path}: corrupt header: {exc}") from exc

    required = {"patient_id", "slide_id", "extractor_id", "magnification_mpp",
                "n_tiles", "dim", "dtype"}
    missing = required - header.keys()
    if missing:
        raise BagHeaderError(f"{path}: header missing fields {sorted(missing)}")
    if header["dtype"] != _DTYPE_CODE:
        raise BagHeaderError(f"{path}: unsupported dtype code {header['dtype']!r}")

    n_tiles, dim = int(header["n_tiles"]), int(header["dim"])
    if n_tiles < 1 or dim < 1:
        raise BagHeaderError(f"{path}: non-positive shape {n_tiles}x{dim} in header")
    expect = n_tiles * dim * 4
    payload = raw[header_end:]
    if len(payload) < expect:
        raise BagPayloadError(
            f"{path}: payload shorter than header claims "
            f"({len(payload)} bytes < {expect})"
        )
    if len(payload) > expect:
        raise BagPayloadError(
            f"{path}: {len(payload) - expect} trailing bytes after payload"
        )

    features = np.frombuffer(payload, dtype="<f4").reshape(n_tiles, dim).copy()
    if not np.isfinite(features).all():
        raise BagValueError(f"{path}: payload contains non-finite values")

    return PatchBag(
        patient_id=header["patient_id"],
        slide_id=header["slide_id"],
        extractor_id=header["extractor_id"],
        magnification_mpp=float(header["magnification_mpp"]),
        features=features,
    )
