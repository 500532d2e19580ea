"""Named-tensor container used for latent caches, checkpoints and bundles.

A tensor file holds one array::

    b"TFT1" | uint32 ndim | ndim x uint64 dims | float32 data (little-endian, row-major)

A tensor group is a directory with one tensor file per name and a
``manifest.json`` recording shape and sha256 of every file, plus free-form
metadata. Groups are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CorruptionError

MAGIC = b"TFT1"
MANIFEST = "manifest.json"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(data: bytes, name: str = "<tensor>") -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptionError(f"{name}: bad magic or truncated header")
    (ndim,) = struct.unpack_from("<I", data, 4)
    offset = 8 + 8 * ndim
    if len(data) < offset:
        raise CorruptionError(f"{name}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}Q", data, 8)
    expected = offset + 4 * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise CorruptionError(f"{name}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> str:
    """Write one tensor file and return its sha256."""
    data = encode_tensor(array)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), str(path))


def _file_name(name: str) -> str:
    safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in name)
    return safe + ".tft"


def save_group(
    directory: str | os.PathLike,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
    extra_files: Mapping[str, str] | None = None,
) -> Path:
    """Atomically write a tensor group directory.

    ``extra_files`` maps file names to text content (JSON sidecars); their
    checksums are recorded alongside the tensors.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        entries = {}
        for name, array in tensors.items():
            fname = _file_name(name)
            digest = write_tensor(tmp / fname, np.asarray(array))
            entries[name] = {"file": fname, "shape": list(np.shape(array)), "sha256": digest}
        files = {}
        for fname, text in (extra_files or {}).items():
            data = text.encode("utf-8")
            (tmp / fname).write_bytes(data)
            files[fname] = sha256_bytes(data)
        manifest = {"tensors": entries, "files": files, "meta": dict(meta or {})}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_group(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str], dict]:
    """Read a tensor group, verifying every checksum.

    Returns ``(tensors, extra_files, meta)``.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        entries = manifest["tensors"]
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{directory}: unreadable manifest ({exc})") from exc
    tensors = {}
    for name, entry in entries.items():
        try:
            data = (directory / entry["file"]).read_bytes()
        except FileNotFoundError as exc:
            raise CorruptionError(f"{directory}: missing tensor file for {name!r}") from exc
        if sha256_bytes(data) != entry["sha256"]:
            raise CorruptionError(f"{directory}: checksum mismatch for {name!r}")
        arr = decode_tensor(data, name)
        if list(arr.shape) != list(entry["shape"]):
            raise CorruptionError(f"{directory}: shape mismatch for {name!r}")
        tensors[name] = arr
    files = {}
    for fname, digest in manifest.get("files", {}).items():
        try:
            data = (directory / fname).read_bytes()
        except FileNotFoundError as exc:
            raise CorruptionError(f"{directory}: missing file {fname}") from exc
        if sha256_bytes(data) != digest:
            raise CorruptionError(f"{directory}: checksum mismatch for {fname}")
        files[fname] = data.decode("utf-8")
    return tensors, files, manifest.get("meta", {})


def state_dict_to_numpy(state: Mapping[str, Any], prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in state.items()}


def numpy_to_state_dict(tensors: Mapping[str, np.ndarray], prefix: str) -> dict:
    import torch

    return {
        k[len(prefix):]: torch.from_numpy(np.array(v, dtype=np.float32))
        for k, v in tensors.items()
        if k.startswith(prefix)
    }


def hash_module(module) -> str:
    """Content hash over a module's parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
