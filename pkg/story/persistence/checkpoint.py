"""
Named-tensor checkpoint archive.

Layout (all integers little-endian):

    b"VSTA"
    u32  format version
    u64  header length
    header: UTF-8 JSON {"meta": {...}, "tensors": {name: {shape, dtype, role, offset, nbytes}}}
    payload: raw little-endian tensor bytes at the recorded offsets
    32 bytes: sha256 of everything above

Saving is deterministic (sorted names, sorted JSON keys), so
``save(load(save(w)))`` writes the same bytes as ``save(w)``.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from story.exceptions import DataFormatError, DimensionError
from story.numerics.nn import Module, Parameter, Role

logger = logging.getLogger(__name__)

MAGIC = b"VSTA"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    roles: Dict[str, Role] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        start = len(prefix) + 1
        return {name[start:]: array for name, array in self.tensors.items() if name.startswith(prefix + ".")}

    def load_into(self, module: Module, prefix: str, strict: bool = True):
        """
        Copy tensors into ``module`` and restore their role tags.

        Frozen-base and encoder tensors come back frozen.
        """
        arrays = self.subset(prefix)
        if strict and not arrays:
            raise DataFormatError(f"Checkpoint has no tensors under '{prefix}'")
        try:
            module.load_arrays(arrays, strict=strict)
        except DimensionError as e:
            raise DataFormatError(f"Checkpoint does not fit {type(module).__name__}: {e.reason}")
        for name, param in module.named_parameters():
            role = self.roles.get(f"{prefix}.{name}")
            if role is not None:
                param.role = role
                if role in (Role.FROZEN_BASE, Role.ENCODER):
                    param.freeze()
        return module


def named_tensors(modules: Dict[str, Module]) -> Iterable[Tuple[str, Parameter]]:
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            yield f"{prefix}.{name}", param


def encode_checkpoint(modules: Dict[str, Module], meta: Optional[dict] = None) -> bytes:
    entries = {}
    payload = bytearray()
    for name, param in sorted(named_tensors(modules), key=lambda item: item[0]):
        array = np.ascontiguousarray(param.data)
        dtype = array.dtype.newbyteorder("<")
        raw = array.astype(dtype, copy=False).tobytes()
        entries[name] = {
            "shape": list(array.shape),
            "dtype": dtype.str,
            "role": param.role.value,
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload += raw
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    body = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + bytes(payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(modules: Dict[str, Module], path, meta: Optional[dict] = None) -> str:
    """Write an archive of every parameter in ``modules`` and return its sha256."""
    data = encode_checkpoint(modules, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    logger.info(f"Saved checkpoint {path} ({len(data)} bytes, sha256 {digest[:12]})")
    return digest


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREAMBLE.size + _DIGEST_SIZE:
        raise DataFormatError("Checkpoint is truncated", offset=len(data))
    magic, version, header_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataFormatError(f"Not a checkpoint (magic {magic!r})", offset=0)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})", offset=4)
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise DataFormatError("Checkpoint integrity hash mismatch", offset=len(body))
    header_start = _PREAMBLE.size
    payload_start = header_start + header_len
    if payload_start > len(body):
        raise DataFormatError("Checkpoint header runs past the end of the file", offset=header_start)
    try:
        header = json.loads(body[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataFormatError("Corrupt checkpoint header", offset=header_start)

    checkpoint = Checkpoint(meta=header.get("meta", {}))
    payload_len = len(body) - payload_start
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > payload_len:
            raise DataFormatError(f"Tensor '{name}' runs past the payload", offset=payload_start + start)
        dtype = np.dtype(entry["dtype"])
        raw = body[payload_start + start:payload_start + start + nbytes]
        array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        checkpoint.tensors[name] = array
        checkpoint.roles[name] = Role(entry["role"])
    return checkpoint


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def weights_hash(module: Module) -> str:
    """sha256 over parameter names and bytes; unchanged iff no weight moved."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters(), key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(param.data).tobytes())
    return digest.hexdigest()
