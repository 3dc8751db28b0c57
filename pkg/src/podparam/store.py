"""On-disk containers: line-oriented key=value manifests and binary arrays.

Every store directory carries a manifest.txt plus one or more binary
payloads whose sha256 digests are recorded in the manifest, so truncation
or corruption is detected on load.  The same key=value syntax (with an
``include=`` directive) backs the CLI configuration files.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np


class StoreError(ValueError):
    """Magic/version mismatch, checksum failure, or malformed manifest."""


def parse_kv_lines(lines, base_dir: Path | None = None,
                   allow_include: bool = False) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise StoreError(f"malformed line (expected key=value): {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key == "include":
            if not allow_include:
                raise StoreError("include= is not allowed here")
            inc = (base_dir or Path(".")) / value
            out.update(read_kv_file(inc, allow_include=True))
            continue
        out[key] = value
    return out


def read_kv_file(path: Path | str, allow_include: bool = False) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return parse_kv_lines(path.read_text().splitlines(), base_dir=path.parent,
                          allow_include=allow_include)


def write_kv_file(path: Path | str, mapping: dict[str, str]) -> None:
    lines = [f"{k}={v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_array_bin(path: Path | str, magic: bytes, array: np.ndarray) -> None:
    """Magic line, u32 row count, u32 row length, little-endian float64 rows."""
    array = np.ascontiguousarray(array, dtype="<f8")
    if array.ndim != 2:
        raise ValueError("expected a 2-D array")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", array.shape[0], array.shape[1]))
        fh.write(array.tobytes())


def read_array_bin(path: Path | str, magic: bytes) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(magic))
        if head != magic:
            raise StoreError(f"{path}: magic mismatch (got {head!r}, want {magic!r})")
        meta = fh.read(8)
        if len(meta) != 8:
            raise StoreError(f"{path}: truncated header")
        rows, cols = struct.unpack("<II", meta)
        data = fh.read(rows * cols * 8)
        if len(data) != rows * cols * 8:
            raise StoreError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy()


def check_digest(path: Path | str, expected: str) -> None:
    actual = sha256_file(path)
    if actual != expected:
        raise StoreError(f"{path}: checksum failure ({actual} != {expected})")


def fmt_float(x: float) -> str:
    return f"{float(x):.17g}"
