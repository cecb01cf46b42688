"""Binary containers shared by datasets and checkpoints.

Both start with the magic ``b"FSUD"`` and a little-endian u32 format
version. A tensor file then holds one array and a trailing CRC32; a
checkpoint holds a sequence of named arrays until end of file.
"""

import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"FSUD"
VERSION = 1


class FormatError(ValueError):
    pass


def _array_bytes(arr):
    arr = np.asarray(arr, dtype="<f4")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def atomic_write(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(arr):
    body = MAGIC + struct.pack("<I", VERSION) + _array_bytes(arr)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(payload, label="tensor file"):
    if len(payload) < 16 or payload[:4] != MAGIC:
        raise FormatError(f"{label}: bad magic")
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{label}: checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise FormatError(f"{label}: unsupported version {version}")
    arr, end = _read_array(body, 8, label)
    if end != len(body):
        raise FormatError(f"{label}: {len(body) - end} trailing bytes")
    return arr


def _read_array(buf, offset, label):
    try:
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if offset + nbytes > len(buf):
            raise FormatError(f"{label}: truncated data")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    except struct.error as exc:
        raise FormatError(f"{label}: truncated header") from exc
    return arr.astype(np.float32), offset + nbytes


def write_tensor(path, arr):
    atomic_write(path, encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), label=os.fspath(path))


def encode_checkpoint(named):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + _array_bytes(arr))
    return b"".join(parts)


def decode_checkpoint(payload, label="checkpoint"):
    if len(payload) < 8 or payload[:4] != MAGIC:
        raise FormatError(f"{label}: bad magic")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != VERSION:
        raise FormatError(f"{label}: unsupported version {version}")
    out, offset = {}, 8
    while offset < len(payload):
        try:
            (n,) = struct.unpack_from("<I", payload, offset)
        except struct.error as exc:
            raise FormatError(f"{label}: truncated entry header") from exc
        offset += 4
        name = payload[offset:offset + n].decode("utf-8")
        offset += n
        arr, offset = _read_array(payload, offset, label)
        out[name] = arr
    return out


def save_checkpoint(path, named):
    atomic_write(path, encode_checkpoint(named))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), label=os.fspath(path))
