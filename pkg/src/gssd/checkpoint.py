"""Binary checkpoint container.

Layout (all integers little-endian):
    magic   8 bytes  b"GSSDCKPT"
    version u32      currently 1
    count   u32      number of records
    record  u16 name_len | name bytes (UTF-8) | u8 rank | rank*u32 dims
            | payload
Payload is float32 data in C order, except the reserved "__config__" record
whose payload is raw UTF-8 bytes (rank 1, dims = [byte length]) holding the
key=value config echo.
"""

from __future__ import annotations

import struct

import numpy as np

from gssd.tensor import ConfigError

MAGIC = b"GSSDCKPT"
VERSION = 1
CONFIG_RECORD = "__config__"


def save_checkpoint(path, records: dict, config_text: str) -> None:
    if CONFIG_RECORD in records:
        raise ConfigError(f"'{CONFIG_RECORD}' is a reserved record name")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(records) + 1))
        for name, arr in records.items():
            arr = np.asarray(arr, dtype=np.float32)
            _write_header(f, name, arr.shape)
            f.write(arr.tobytes())  # C order regardless of layout
        payload = config_text.encode("utf-8")
        _write_header(f, CONFIG_RECORD, (len(payload),))
        f.write(payload)


def load_checkpoint(path):
    """Returns (records, config_text); records are float32 arrays."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    records = {}
    config_text = None
    for _ in range(count):
        name, shape, pos = _read_header(data, pos, path)
        if name == CONFIG_RECORD:
            nbytes = shape[0]
            config_text = data[pos:pos + nbytes].decode("utf-8")
            pos += nbytes
        else:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            records[name] = arr.copy()
            pos += 4 * n
    if pos != len(data):
        raise ConfigError(f"{path}: {len(data) - pos} trailing bytes")
    if config_text is None:
        raise ConfigError(f"{path}: missing '{CONFIG_RECORD}' record")
    return records, config_text


def _write_header(f, name: str, shape) -> None:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise ConfigError(f"record name too long: {name[:32]}...")
    if len(shape) > 0xFF:
        raise ConfigError(f"record rank {len(shape)} too large")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", len(shape)))
    f.write(struct.pack(f"<{len(shape)}I", *shape))


def _read_header(data: bytes, pos: int, path):
    try:
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
    except (struct.error, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    return name, tuple(shape), pos
