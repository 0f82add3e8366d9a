"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VRSR" | u8 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | float32 payload
    u64 step counter | 32-byte RNG state (PCG64 state and increment, u128 each)
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VRSR"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: bytes = field(default=b"\0" * 32)

    def digest(self) -> str:
        return hashlib.sha256(encode(self)).hexdigest()


def rng_to_bytes(rng: np.random.Generator) -> bytes:
    """32 bytes: PCG64 state then increment, little-endian.

    numpy's buffered 32-bit half-word is not part of the record; a restored
    generator resumes the stream exactly unless one was pending.
    """
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators can be checkpointed")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return s.to_bytes(16, "little") + inc.to_bytes(16, "little")


def rng_from_bytes(raw: bytes) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": int.from_bytes(raw[:16], "little"),
                          "inc": int.from_bytes(raw[16:32], "little")},
                "has_uint32": 0, "uinteger": 0}
    return np.random.Generator(bg)


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    if len(ckpt.rng_state) != 32:
        raise ValueError("rng state must be 32 bytes")
    out.append(struct.pack("<Q", ckpt.step) + ckpt.rng_state)
    return b"".join(out)


def decode(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic", 0)
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        start = pos
        label = f"tensor record {i}"
        (nlen,) = struct.unpack("<H", take(2, label + " name length"))
        try:
            name = take(nlen, label + " name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{label}: name is not valid UTF-8", start + 2) from None
        label = f"tensor record {i} ({name!r})"
        (rank,) = struct.unpack("<B", take(1, label + " rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, label + " dims"))
        n = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * n, label + " payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (step,) = struct.unpack("<Q", take(8, "step counter"))
    rng = take(32, "rng state")
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes", pos)
    return Checkpoint(tensors, step, rng)


def save(path: str | os.PathLike, ckpt: Checkpoint) -> str:
    data = encode(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes())


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
