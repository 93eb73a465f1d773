"""Binary checkpoint files for detector weights and embedding tables.

Layout, all integers little-endian::

    b"EADK"  u16 version  u32 record_count
    record: u32 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
            u8 rank, u32 dim * rank, payload (row-major)

Weights files carry the detector parameters under their own names plus one
rank-0 ``config.<field>`` record per DetectorConfig field.  Table files
carry ``table.W``, ``table.num_classes`` and ``table.tokens_per_class``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import fields

import numpy as np

from . import autodiff as ad
from .detector import DetectorConfig, DetectorWeights, EmbeddingTable, TokenLayout
from .errors import ParseError

MAGIC = b"EADK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(records, version=VERSION):
    """Serialize ``(name, array)`` pairs to bytes."""
    parts = [MAGIC, struct.pack("<HI", version, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ValueError(f"record {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ParseError(f"{self.source}: truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data, source="<bytes>"):
    """Parse checkpoint bytes into ``(version, OrderedDict name -> array)``."""
    r = _Reader(memoryview(data).tobytes(), source)
    if r.take(4, "magic") != MAGIC:
        raise ParseError(f"{source}: bad magic, not an EADK checkpoint")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise ParseError(f"{source}: unsupported checkpoint version {version}")
    records = OrderedDict()
    for i in range(count):
        (n,) = r.unpack("<I", f"name length of record {i}")
        try:
            name = r.take(n, f"name of record {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{source}: record {i} name is not UTF-8") from None
        code, rank = r.unpack("<BB", f"header of {name!r}")
        if code not in _DTYPES:
            raise ParseError(f"{source}: record {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I", f"dims of {name!r}")
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(size, f"payload of {name!r}")
        if name in records:
            raise ParseError(f"{source}: duplicate record {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.data):
        raise ParseError(f"{source}: {len(r.data) - r.pos} trailing bytes after last record")
    return version, records


def write_records(path, records):
    with open(path, "wb") as fh:
        fh.write(encode(records))


def read_records(path):
    with open(path, "rb") as fh:
        return decode(fh.read(), str(path))[1]


# -- typed helpers ---------------------------------------------------------
def weights_records(weights):
    recs = [(f"config.{k}", np.float64(v)) for k, v in weights.config.to_dict().items()]
    recs += list(weights.arrays().items())
    return recs


def save_weights(path, weights):
    write_records(path, weights_records(weights))


def _config_from(records, source):
    kwargs = {}
    for f in fields(DetectorConfig):
        key = f"config.{f.name}"
        if key not in records:
            raise ParseError(f"{source}: missing record {key!r}; not a weights checkpoint")
        value = float(records[key])
        if f.type in (bool, "bool"):
            kwargs[f.name] = bool(value)
        elif f.type in (int, "int"):
            kwargs[f.name] = int(value)
        else:
            kwargs[f.name] = value
    return DetectorConfig(**kwargs)


def load_weights(path):
    """DetectorWeights from a weights checkpoint, returned frozen."""
    records = read_records(path)
    config = _config_from(records, path)
    params = [(k, ad.Tensor(v.astype(np.float64), name=k)) for k, v in records.items()
              if not k.startswith("config.")]
    try:
        return DetectorWeights(config, params)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def table_records(table):
    return [("table.W", table.W.data), ("table.num_classes", np.float64(table.num_classes)),
            ("table.tokens_per_class", np.float64(table.tokens_per_class))]


def save_table(path, table):
    write_records(path, table_records(table))


def load_table(path):
    records = read_records(path)
    for key in ("table.W", "table.num_classes", "table.tokens_per_class"):
        if key not in records:
            raise ParseError(f"{path}: missing record {key!r}; not an embedding checkpoint")
    layout = TokenLayout(int(records["table.num_classes"]), int(records["table.tokens_per_class"]))
    W = records["table.W"].astype(np.float64)
    if W.ndim != 2 or W.shape[0] != layout.num_tokens:
        raise ParseError(f"{path}: table.W has shape {W.shape}, layout needs {layout.num_tokens} rows")
    return EmbeddingTable(ad.Tensor(W, requires_grad=True, name="table"), layout)
