"""File formats: TNS1 tensors, binary PGM (P5) images, FCN1 checkpoints.

TNS1: magic ``TNS1``, u8 rank, rank x u32 little-endian extents, then
float32 little-endian payload, row-major.

FCN1: magic ``FCN1``, u32 little-endian JSON header length, JSON header
(the model config), then one TNS1 blob per parameter tensor in layer
order (weight, bias, weight, bias, ...).
"""

import io as _stdio
import json
import struct

import numpy as np


class FormatError(ValueError):
    """Raised on malformed or truncated files."""


# ---------------------------------------------------------------------------
# TNS1

def tns_bytes(arr):
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.ndim < 1 or a.ndim > 4:
        raise FormatError(f"TNS1 supports rank 1..4, got rank {a.ndim}")
    header = b"TNS1" + struct.pack("<B", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.astype("<f4").tobytes()


def save_tns(path, arr):
    with open(path, "wb") as f:
        f.write(tns_bytes(arr))


def read_tns_stream(f):
    magic = f.read(4)
    if magic != b"TNS1":
        raise FormatError(f"bad TNS1 magic: {magic!r}")
    rank = struct.unpack("<B", f.read(1))[0]
    if not 1 <= rank <= 4:
        raise FormatError(f"bad TNS1 rank: {rank}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated TNS1 payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def load_tns(path):
    with open(path, "rb") as f:
        return read_tns_stream(f)


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)

def write_pgm(path, img):
    a = np.asarray(img)
    if a.ndim != 2:
        raise FormatError(f"PGM image must be rank 2, got shape {a.shape}")
    a = a.astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header tokens: width, height, maxval; '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + w * h]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# FCN1 checkpoints

def save_checkpoint(path, config_dict, params):
    header = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"FCN1")
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for w, b in params:
            f.write(tns_bytes(w))
            f.write(tns_bytes(b))


def load_checkpoint(path):
    """Returns (config_dict, params) with params as [(weight, bias), ...]."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"FCN1":
        raise FormatError(f"{path}: bad FCN1 magic")
    (hlen,) = struct.unpack("<I", data[4:8])
    config = json.loads(data[8:8 + hlen].decode("utf-8"))
    stream = _stdio.BytesIO(data[8 + hlen:])
    tensors = []
    while stream.tell() < len(data) - 8 - hlen:
        tensors.append(read_tns_stream(stream))
    if len(tensors) % 2 != 0:
        raise FormatError(f"{path}: odd parameter tensor count")
    params = [(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]
    return config, params
