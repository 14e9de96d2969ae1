"""Checkpoint persistence and donor-weight initialization.

Binary layout (all integers little-endian)::

    b"SCMG"                      magic
    u32  version                 currently 1
    u32  meta_len                length of the metadata block
    meta_len bytes               UTF-8 JSON, sorted keys, compact separators
    u32  n_tensors
    n_tensors × entry:
        u16  name_len
        name_len bytes           UTF-8 tensor name
        u8   dtype code          see DTYPES
        u8   ndim                at most 32
        ndim × u32               shape
        payload                  row-major, little-endian, prod(shape) * itemsize bytes
    u32  crc32                   zlib.crc32 of every preceding byte
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import struct
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Module
from .errors import DataError, IoFailure, ShapeMismatch

MAGIC = b"SCMG"
VERSION = 1
DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8", 4: "|u1"}
MAX_NDIM = 32
_CODES = {np.dtype(v).str.replace("=", "<"): k for k, v in DTYPES.items()}


class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class CrcMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class MissingTensor(CheckpointError, KeyError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.``, with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def architecture_hash(arch: Mapping) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.str if arr.dtype.byteorder == "|" else arr.dtype.newbyteorder("<").str
    try:
        return _CODES[key]
    except KeyError:
        raise DataError(f"unsupported checkpoint dtype {arr.dtype}") from None


def flatten_models(models) -> dict[str, np.ndarray]:
    """``{"G_XY": module, ...}`` or a single module → flat name → array map."""
    if isinstance(models, Module):
        return models.state_dict()
    out: dict[str, np.ndarray] = {}
    for prefix, m in models.items():
        if isinstance(m, Module):
            for k, v in m.named_parameters():
                out[f"{prefix}.{k}"] = v.data
        else:
            out[prefix] = np.asarray(m)
    return out


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    meta_bytes = json.dumps(dict(meta), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(models, meta: Mapping | None, path) -> None:
    """Serialize named tensors plus metadata.

    ``models`` is a module, a mapping of prefix → module (or array), or a
    loaded :class:`Checkpoint`.  A ``created`` timestamp is added when the
    metadata has none, so re-saving a loaded checkpoint is byte-identical.
    """
    if isinstance(models, Checkpoint):
        tensors, base = models.tensors, dict(models.meta)
    else:
        tensors, base = flatten_models(models), {}
    base.update(meta or {})
    base.setdefault("created", _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    data = encode_checkpoint(tensors, base)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.pos = 0
        self.limit = limit

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.limit:
            raise TruncatedFile(f"checkpoint truncated inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _parse(data: bytes, limit: int, exact: bool = True) -> tuple[dict, dict[str, np.ndarray], int]:
    r = _Reader(data, limit)
    r.take(8, "header")
    (meta_len,) = struct.unpack("<I", r.take(4, "header"))
    meta_raw = r.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid JSON: {exc}") from exc
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, f"tensor #{i} header"))
        try:
            name = r.take(nlen, f"tensor #{i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor #{i} name is not UTF-8") from exc
        code, ndim = struct.unpack("<BB", r.take(2, f"tensor '{name}' header"))
        if code not in DTYPES:
            raise CheckpointError(f"tensor '{name}' has unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise CheckpointError(f"tensor '{name}' claims {ndim} dimensions")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor '{name}' shape"))
        dt = np.dtype(DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        payload = r.take(nbytes, f"tensor '{name}' payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name '{name}'")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    if exact and r.pos != limit:
        raise CheckpointError(f"{limit - r.pos} unexpected bytes after tensor table")
    return meta, tensors, r.pos


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedFile("checkpoint truncated inside magic")
        raise BadMagic("not a checkpoint (bad magic)")
    if len(data) < 8:
        raise TruncatedFile("checkpoint truncated inside header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} not supported (expected {VERSION})")
    if len(data) < 12:
        raise TruncatedFile("checkpoint truncated inside header")
    body_len = len(data) - 4
    (stored,) = struct.unpack_from("<I", data, body_len)
    if zlib.crc32(data[:body_len]) != stored:
        # tell truncation apart from corruption when the structure allows it
        try:
            _, _, end = _parse(data, len(data), exact=False)
        except TruncatedFile:
            raise
        except CheckpointError:
            end = None
        if end is not None and len(data) - end < 4:
            raise TruncatedFile("checkpoint truncated inside crc trailer")
        raise CrcMismatch("checkpoint CRC32 mismatch")
    meta, tensors, _ = _parse(data, body_len)
    return Checkpoint(meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


# ----------------------------------------------------------------- transfer

@dataclass
class TransferReport:
    transferred: list[str] = field(default_factory=list)
    skipped_shape_mismatch: list[str] = field(default_factory=list)
    missing_in_donor: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"transferred": self.transferred, "skipped_shape_mismatch": self.skipped_shape_mismatch,
                "missing_in_donor": self.missing_in_donor}


def transfer_init(target_models, donor: Checkpoint | Mapping[str, np.ndarray], policy: str = "permissive",
                  only: tuple[str, ...] | None = None) -> TransferReport:
    """Copy donor tensors into target parameters where name and shape match.

    ``target_models`` maps prefixes to modules (as in :func:`save_checkpoint`).
    ``only`` restricts copying to the given prefixes (e.g. generators only);
    parameters outside it are reported as missing in the donor.  With
    ``policy="strict"`` any mismatch raises.
    """
    if policy not in ("strict", "permissive"):
        raise ValueError(f"unknown transfer policy '{policy}'")
    tensors = donor.tensors if isinstance(donor, Checkpoint) else dict(donor)
    targets = {"": target_models} if isinstance(target_models, Module) else dict(target_models)
    report = TransferReport()
    for prefix, module in targets.items():
        for pname, param in module.named_parameters():
            name = f"{prefix}.{pname}" if prefix else pname
            src = tensors.get(name)
            if src is None or (only is not None and prefix not in only):
                if policy == "strict":
                    raise MissingTensor(f"donor has no tensor '{name}'")
                report.missing_in_donor.append(name)
            elif src.shape != param.shape:
                if policy == "strict":
                    raise ShapeMismatch(f"'{name}': donor {src.shape} vs target {param.shape}")
                report.skipped_shape_mismatch.append(name)
            else:
                param.data = np.array(src, dtype=param.dtype, copy=True)
                report.transferred.append(name)
    return report


def format_table(ckpt: Checkpoint) -> str:
    """Human-readable tensor table for ``ckpt-inspect``."""
    lines = [f"version {VERSION}  tensors {len(ckpt.tensors)}",
             "meta " + json.dumps(ckpt.meta, sort_keys=True)]
    total = 0
    for name, arr in ckpt.tensors.items():
        total += arr.size
        lines.append(f"{name:48s} {arr.dtype.str:>4s} {'x'.join(map(str, arr.shape)) or 'scalar'}")
    lines.append(f"total elements {total}")
    return "\n".join(lines)
