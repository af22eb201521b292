"""Binary model files.

Layout (all integers little-endian)::

    b"PATR" | version u16 | kind u8
    header_len u32 | header (UTF-8 JSON, sorted keys) | header_crc u32
    record_count u32
    per record:
        name_len u16 | name (UTF-8) | ndim u8 | dims u32 * ndim
        payload_len u32 | payload (float32 LE) | crc u32

The record CRC32 covers name, dims and payload. The header carries the net
config, schema, seed, branch order and the record-to-component map, so the
base is stored exactly once however many branches a model has.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ArticleSchema
from .errors import ComparisonError, CorruptionError, FormatError, UnsupportedVersionError
from .models import (MultiLabelModel, NetConfig, ProgressiveModel, attach_branch, count_params)

MAGIC = b"PATR"
VERSION = 1
KINDS = {"progressive": 0, "individual": 1, "multilabel": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}


def _header(model) -> dict:
    names = [n for n, _ in model.named_parameters()]
    header = {
        "net": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "seed": model.seed,
        "components": {n: model.component_of(n) for n in names},
    }
    if model.kind != "multilabel":
        header["branches"] = list(model.branches)
    return header


def to_bytes(model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HB", VERSION, KINDS[model.kind]))
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", zlib.crc32(header)))
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        dims = struct.pack(f"<B{p.data.ndim}I", p.data.ndim, *p.shape)
        payload = p.data.astype("<f4").tobytes()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(dims)
        buf.write(struct.pack("<I", len(payload)))
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(nb + dims + payload)))
    return buf.getvalue()


def save_model(model, path) -> int:
    """Write ``model`` to ``path``; returns the number of bytes written."""
    data = to_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(data: bytes) -> tuple[str, dict, "OrderedDict[str, np.ndarray]"]:
    """Decode a model file into (kind, header, name -> array)."""
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    r.take(4)
    version, kind = r.unpack("<HB")
    if version != VERSION:
        raise UnsupportedVersionError(f"file format version {version}; this build reads {VERSION}")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown model kind {kind}")
    (hlen,) = r.unpack("<I")
    hbytes = r.take(hlen)
    (hcrc,) = r.unpack("<I")
    if zlib.crc32(hbytes) != hcrc:
        raise CorruptionError("header checksum mismatch")
    header = json.loads(hbytes)
    (count,) = r.unpack("<I")
    records = OrderedDict()
    for i in range(count):
        (nlen,) = r.unpack("<H")
        nb = r.take(nlen)
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        dims = struct.pack(f"<B{ndim}I", ndim, *shape)
        (plen,) = r.unpack("<I")
        if plen != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptionError(f"record {i}: payload length {plen} disagrees with shape {shape}")
        payload = r.take(plen)
        (crc,) = r.unpack("<I")
        if zlib.crc32(nb + dims + payload) != crc:
            raise CorruptionError(f"record {i} ({nb.decode(errors='replace')}): checksum mismatch")
        name = nb.decode()
        if name in records:
            raise CorruptionError(f"duplicate record {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CorruptionError(f"{len(data) - r.pos} trailing bytes after the last record")
    return KIND_NAMES[kind], header, records


def read_records(path) -> "OrderedDict[str, np.ndarray]":
    return parse(Path(path).read_bytes())[2]


def from_bytes(data: bytes):
    kind, header, records = parse(data)
    config = NetConfig.from_dict(header["net"])
    schema = ArticleSchema.from_dict(header["schema"])
    seed = header["seed"]
    if kind == "multilabel":
        model = MultiLabelModel(config, schema, seed)
    else:
        model = ProgressiveModel(config, schema, seed, kind=kind)
        for name in header["branches"]:
            attach_branch(model, name)
    params = OrderedDict(model.named_parameters())
    if set(params) != set(records):
        missing = sorted(set(params) - set(records))
        extra = sorted(set(records) - set(params))
        raise CorruptionError(f"records do not match the architecture (missing {missing}, extra {extra})")
    for name, p in params.items():
        arr = records[name]
        if arr.shape != p.shape:
            raise CorruptionError(f"record {name!r} has shape {arr.shape}, expected {p.shape}")
        p.data[...] = arr
    return model


def load_model(path):
    """Rebuild a model saved by :func:`save_model`."""
    return from_bytes(Path(path).read_bytes())


@dataclass
class SizeReport:
    progressive_bytes: int
    individual_bytes: int
    ratio: float
    predicted_ratio: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def size_report(progressive_path, individual_paths) -> SizeReport:
    """Compare one progressive file with the individual files covering the same attributes."""
    prog = load_model(progressive_path)
    indiv = [load_model(p) for p in individual_paths]
    if prog.kind != "progressive" or any(m.kind != "individual" for m in indiv):
        raise ComparisonError("expected one progressive and several individual model files")
    if any(m.schema.article != prog.schema.article or m.config != prog.config for m in indiv):
        raise ComparisonError("individual models were built for a different article or net config")
    covered = sorted(a for m in indiv for a in m.branches)
    if covered != sorted(prog.branches):
        raise ComparisonError(f"individual models cover {covered}, progressive has {sorted(prog.branches)}")
    pb = os.path.getsize(progressive_path)
    ib = sum(os.path.getsize(p) for p in individual_paths)
    pc = count_params(prog)["total"]
    ic = sum(count_params(m)["total"] for m in indiv)
    return SizeReport(pb, ib, pb / ib, pc / ic)
