"""Binary tensor-table container used for model checkpoints and latent files.

Layout (all integers unsigned 32-bit little-endian)::

    b"IRRM" | version | header_len | header (UTF-8 "key=value" lines)
    | tensor_count | { name_len | name | rank | dims... | float32 LE data }*
    | crc32 of every preceding byte
"""
import os
import struct
import tempfile
import zlib
from dataclasses import fields

import numpy as np

from .model import IRRM, LatentPyramid, ModelConfig
from .tensor import Tensor

MAGIC = b"IRRM"
VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted container."""


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(header: dict, tensors: dict) -> bytes:
    lines = []
    for key, value in header.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"header entry {key!r}={value!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    head = "".join(lines).encode("utf-8")

    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(head)), head, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes):
    """Parse a container; returns ``(header, tensors)`` with float32 arrays."""
    if len(blob) < 4 + 4 * 4 or blob[:4] != MAGIC:
        raise CheckpointError("not an IRRM container (bad magic)")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC-32 mismatch: file is corrupted")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(body):
            raise CheckpointError("truncated container")
        (v,) = _U32.unpack_from(body, pos)
        pos += 4
        return v

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated container")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    header = {}
    for line in take(u32()).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            header[key] = value
    tensors = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return header, tensors


def save_tensors(path, header, tensors):
    atomic_write(path, encode(header, tensors))


def load_tensors(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        return decode(blob)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


# -- model checkpoints ----------------------------------------------------------

_ADAM_M = "adam.m/"
_ADAM_V = "adam.v/"


def model_header(cfg: ModelConfig):
    header = {"kind": "model", "num_rdm": cfg.num_rdm}
    for f in fields(ModelConfig):
        value = getattr(cfg, f.name)
        header[f.name] = repr(value) if isinstance(value, float) else value
    return header


def config_from_header(header):
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in header:
            raise CheckpointError(f"checkpoint header lacks {f.name!r}")
        raw = header[f.name]
        if f.type in (bool, "bool"):
            kwargs[f.name] = raw == "True"
        elif f.type in (int, "int"):
            kwargs[f.name] = int(raw)
        elif f.type in (float, "float"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return ModelConfig(**kwargs)


def save_checkpoint(path, model: IRRM, optimizer=None, extra=None):
    """Serialise model weights plus (optionally) Adam state and extra header keys."""
    header = model_header(model.config)
    tensors = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        header["adam_step"] = optimizer.step_count
        for name, arr in optimizer.m.items():
            tensors[_ADAM_M + name] = arr
        for name, arr in optimizer.v.items():
            tensors[_ADAM_V + name] = arr
    for key, value in (extra or {}).items():
        header[key] = value
    save_tensors(path, header, tensors)


def load_checkpoint(path):
    """Returns ``(model, optimizer_state_or_None, header)``.

    The optimizer state is a dict with ``m``, ``v`` and ``step`` entries.
    """
    header, tensors = load_tensors(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    model = IRRM(config_from_header(header))
    weights = {k: v for k, v in tensors.items() if not k.startswith(("adam.",))}
    model.load_state_dict(weights)
    opt = None
    if "adam_step" in header:
        opt = {
            "step": int(header["adam_step"]),
            "m": {k[len(_ADAM_M):]: v for k, v in tensors.items() if k.startswith(_ADAM_M)},
            "v": {k[len(_ADAM_V):]: v for k, v in tensors.items() if k.startswith(_ADAM_V)},
        }
    return model, opt, header


# -- latent files ---------------------------------------------------------------


def save_latents(path, z: LatentPyramid, extra=None):
    header = {"kind": "latent", "levels": len(z)}
    header.update(extra or {})
    save_tensors(path, header, {f"z{k}": level.data for k, level in enumerate(z, start=1)})


def load_latents(path, dtype=np.float32):
    header, tensors = load_tensors(path)
    if header.get("kind") != "latent":
        raise CheckpointError(f"{path}: not a latent file (kind={header.get('kind')!r})")
    levels = [Tensor(tensors[f"z{k}"], dtype=dtype) for k in range(1, int(header["levels"]) + 1)]
    return LatentPyramid(levels), header
