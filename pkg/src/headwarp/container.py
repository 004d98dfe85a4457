"""Single-file tensor container shared by every weight/flow/track artifact.

Layout (little-endian throughout):

    header:  magic b"SHGW" | format version u32 | tensor count u32
    tensor:  name length u16 | name utf-8 | dtype code u8 | rank u8
             | dims u32[rank] | raw data (row-major, little-endian)

dtype codes: 0=f32, 1=f64, 2=i64, 3=u8.  Code 0 is the interchange
default; the others exist for RNG/optimizer state and embedded metadata.
Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
import torch

MAGIC = b"SHGW"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(Exception):
    """Base error for container I/O."""


class CorruptFileError(ContainerError):
    """File is truncated or structurally invalid."""


class VersionError(ContainerError):
    """File carries an unsupported format version or version tag."""


def _as_array(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _DTYPE_CODES:
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f4")
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8")
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr)


def write_tensors(path, tensors, version: int = FORMAT_VERSION) -> None:
    """Write an ordered mapping of name -> tensor/array to `path`."""
    items = [(name, _as_array(value)) for name, value in tensors.items()]
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", version, len(items)))
            for name, arr in items:
                encoded = name.encode("utf-8")
                if len(encoded) > 0xFFFF:
                    raise ContainerError(f"tensor name too long: {name!r}")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CorruptFileError(f"truncated file while reading {what}")
    return data


def read_tensors(path, expect_version: int = FORMAT_VERSION):
    """Read a container back into an ordered dict of torch tensors."""
    out: dict[str, torch.Tensor] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise CorruptFileError(f"bad magic {magic!r} in {path}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != expect_version:
            raise VersionError(f"format version {version}, expected {expect_version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype/rank"))
            if code not in _CODE_DTYPES:
                raise CorruptFileError(f"unknown dtype code {code} for {name!r}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(f, nbytes, f"data of {name!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
            out[name] = torch.from_numpy(arr)
        trailing = f.read(1)
        if trailing:
            raise CorruptFileError("trailing bytes after last tensor")
    return out


def write_meta(tensors: dict, meta: dict, key: str = "_meta_json") -> None:
    """Embed a JSON metadata blob as a u8 tensor (in place)."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors[key] = np.frombuffer(blob, dtype=np.uint8).copy()


def read_meta(tensors: dict, key: str = "_meta_json") -> dict:
    if key not in tensors:
        return {}
    blob = tensors[key].numpy().tobytes()
    return json.loads(blob.decode("utf-8"))


def save_state_dict(path, state_dict, meta=None) -> None:
    """Persist a module/optimizer state dict; tensor order is preserved."""
    tensors = {k: v for k, v in state_dict.items()}
    if meta is not None:
        write_meta(tensors, meta)
    write_tensors(path, tensors)


def load_state_dict(path):
    """Load a container into (state_dict, meta)."""
    tensors = read_tensors(path)
    meta = read_meta(tensors)
    tensors.pop("_meta_json", None)
    return tensors, meta
