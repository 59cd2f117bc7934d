"""Binary checkpoints for base networks and per-domain adapter bundles.

Layout (little endian)::

    b"AMDL"  u16 version  u8 kind (0 = base, 1 = adapter bundle)
    u32 meta_len   meta_len bytes of UTF-8 JSON (sorted keys)
    u32 n_tensors
    n_tensors x { u16 name_len, UTF-8 name, u8 rank, rank x u32 dims, float32 values }
    u32 CRC32 of every preceding byte

Tensors are written in name order, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError
from .model import (
    BaseNetwork,
    DomainAdapterSet,
    ExitTopology,
    NetworkConfig,
    attach_domain,
    base_checksum,
    build_base,
    iter_tensors,
)
from .tensor import Tensor

MAGIC = b"AMDL"
VERSION = 1
KIND_BASE = 0
KIND_BUNDLE = 1
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


def _metadata(obj) -> tuple[int, dict]:
    if isinstance(obj, BaseNetwork):
        return KIND_BASE, {
            "config": obj.config.to_dict(),
            "num_classes": obj.num_classes,
            "frozen": obj.frozen,
        }
    if isinstance(obj, DomainAdapterSet):
        return KIND_BUNDLE, {
            "config": obj.config.to_dict(),
            "base_config_hash": obj.base_config_hash,
            "domain": obj.domain,
            "num_classes": obj.num_classes,
            "exit_topology": obj.topology.tag,
            "adapt": obj.adapt,
            "num_blocks": obj.num_blocks,
        }
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def dumps(obj: BaseNetwork | DomainAdapterSet) -> bytes:
    kind, meta = _metadata(obj)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HB", VERSION, kind), struct.pack("<I", len(meta_bytes)), meta_bytes]
    tensors = list(iter_tensors(obj))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, obj: BaseNetwork | DomainAdapterSet) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(obj))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes, base: BaseNetwork | None = None):
    """Parse a checkpoint; adapter bundles are checked against ``base`` when given."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an AMDL checkpoint", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (kind,) = r.unpack("<B", "kind")
    if kind not in (KIND_BASE, KIND_BUNDLE):
        raise FormatError(f"unknown checkpoint kind {kind}", 6)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata is not valid UTF-8 JSON", meta_at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "tensor name").decode()
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", r.pos - nlen) from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4").reshape(dims).astype(np.float32)
    crc_at = r.pos
    (stored,) = r.unpack("<I", "CRC32")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after CRC32", r.pos)
    if zlib.crc32(buf[:crc_at]) != stored:
        raise ChecksumError("CRC32 mismatch", crc_at)

    try:
        return _rebuild(meta, kind, tensors, base, meta_at)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"inconsistent checkpoint contents: {exc!r}", meta_at) from None


def _rebuild(meta: dict, kind: int, tensors: dict, base, meta_at: int):
    config = NetworkConfig.from_dict(meta["config"])
    _check_layout(meta, kind, config, tensors, meta_at)
    params = {n: Tensor(a, requires_grad=True) for n, a in tensors.items() if not n.endswith(_BUFFER_SUFFIXES)}
    buffers = {n: a for n, a in tensors.items() if n.endswith(_BUFFER_SUFFIXES)}

    if kind == KIND_BASE:
        net = BaseNetwork(config, meta["num_classes"], params, buffers)
        if meta.get("frozen"):
            for p in params.values():
                p.requires_grad = False
            net.frozen = True
            net.checksum = base_checksum(net)
        return net

    if meta["base_config_hash"] != config.config_hash():
        raise FormatError("bundle config does not match its recorded base hash", meta_at)
    bundle = DomainAdapterSet(
        meta["domain"],
        config,
        meta["num_classes"],
        ExitTopology.parse(meta["exit_topology"]),
        meta["adapt"],
        params,
        buffers,
    )
    bundle.num_blocks = meta["num_blocks"]
    if base is not None:
        check_compatible(base, bundle, meta_at)
    return bundle


def _check_layout(meta: dict, kind: int, config: NetworkConfig, tensors: dict, offset: int) -> None:
    """Tensor names and shapes must be exactly those of the recorded architecture."""
    skeleton = build_base(config, meta["num_classes"])
    if kind == KIND_BUNDLE:
        skeleton = attach_domain(
            skeleton, meta["num_classes"], meta["exit_topology"], meta["adapt"], require_frozen=False
        )
    expected = {n: a.shape for n, a in iter_tensors(skeleton)}
    found = {n: a.shape for n, a in tensors.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(n for n in set(expected) & set(found) if expected[n] != found[n])
        raise FormatError(f"tensor layout mismatch (missing {missing[:3]}, unexpected {extra[:3]}, bad shape {wrong[:3]})", offset)


def check_compatible(base: BaseNetwork, bundle: DomainAdapterSet, offset: int = 0) -> None:
    """Raise :class:`FormatError` unless ``bundle`` was trained against ``base``'s architecture."""
    if bundle.base_config_hash != base.config.config_hash():
        raise FormatError(
            f"adapter bundle for base config {bundle.base_config_hash} used with base {base.config.config_hash()}",
            offset,
        )
    for name in bundle.adapter_names():
        conv = name.replace(".adapter", "")
        if conv not in base.params or base.params[conv].shape[:2] != bundle.params[name].shape[:2]:
            raise FormatError(f"adapter {name} does not match the base convolution", offset)


def load_checkpoint(path, base: BaseNetwork | None = None):
    """Load a base network or an adapter bundle.

    When ``base`` is given, an adapter bundle is checked against it.
    """
    return loads(Path(path).read_bytes(), base=base)
