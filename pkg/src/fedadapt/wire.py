"""Little-endian binary framing for weight uploads and server dispatches.

Layout::

    header (20 bytes)
      magic        u32   0x46454453 ("FEDS")
      version      u16   1
      msg_type     u8    1 = UPDATE, 2 = DISPATCH
      reserved     u8    0
      client_id    u32
      round        u32
      block_count  u16
      reserved     u16   0
    per block (6 bytes + payload)
      block_id     u16   bits 0-13 block index, bits 14-15 part (0 full, 1 encoder, 2 decoder)
      param_count  u32
      params       param_count x f32
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec

MAGIC = 0x46454453
VERSION = 1
HEADER = struct.Struct("<IHBBIIHH")
BLOCK_HEADER = struct.Struct("<HI")
HEADER_SIZE = HEADER.size
BLOCK_HEADER_SIZE = BLOCK_HEADER.size

_PART_CODES = {"full": 0, "encoder": 1, "decoder": 2}
_PART_NAMES = {v: k for k, v in _PART_CODES.items()}
_BLOCK_MASK = 0x3FFF


class WireError(ValueError):
    pass


class MsgType(enum.IntEnum):
    UPDATE = 1
    DISPATCH = 2


@dataclass(frozen=True)
class BlockPayload:
    block: int
    part: str
    values: np.ndarray

    def __post_init__(self):
        if self.part not in _PART_CODES:
            raise ValueError(f"unknown block part {self.part!r}")
        if not 0 <= self.block <= _BLOCK_MASK:
            raise ValueError(f"block index {self.block} does not fit the wire format")
        values = np.array(self.values, dtype=np.float32).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def key(self):
        return (self.block, self.part)

    def __eq__(self, other):
        if not isinstance(other, BlockPayload):
            return NotImplemented
        return (self.key == other.key
                and self.values.tobytes() == other.values.tobytes())


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    client_id: int
    round: int
    blocks: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def param_count(self) -> int:
        return sum(b.values.size for b in self.blocks)

    @property
    def block_ids(self) -> tuple:
        return tuple(b.block for b in self.blocks)


def encoded_length(msg: WireMessage) -> int:
    return HEADER_SIZE + sum(BLOCK_HEADER_SIZE + 4 * b.values.size for b in msg.blocks)


def encode(msg: WireMessage) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, int(msg.msg_type), 0, msg.client_id, msg.round,
                         len(msg.blocks), 0)]
    for b in msg.blocks:
        parts.append(BLOCK_HEADER.pack(b.block | (_PART_CODES[b.part] << 14), b.values.size))
        parts.append(b.values.astype("<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes, spec: ModelSpec | None = None) -> WireMessage:
    """Parse one frame; with ``spec``, block ids and sizes are checked against the model."""
    data = memoryview(data)
    if len(data) < HEADER_SIZE:
        raise WireError(f"truncated header: {len(data)} bytes")
    magic, version, msg_type, _, client_id, rnd, count, _ = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise WireError(f"unknown message type {msg_type}") from None
    offset, blocks = HEADER_SIZE, []
    for _ in range(count):
        if len(data) < offset + BLOCK_HEADER_SIZE:
            raise WireError("truncated block header")
        block_id, n = BLOCK_HEADER.unpack_from(data, offset)
        offset += BLOCK_HEADER_SIZE
        if len(data) < offset + 4 * n:
            raise WireError(f"truncated payload: need {4 * n} bytes")
        part_code = block_id >> 14
        if part_code not in _PART_NAMES:
            raise WireError(f"unknown part code {part_code}")
        block, part = block_id & _BLOCK_MASK, _PART_NAMES[part_code]
        if spec is not None:
            if block >= spec.num_blocks:
                raise WireError(f"block {block} out of range for {spec.num_blocks} blocks")
            expected = spec.part_slice(block, part)
            if n != expected.stop - expected.start:
                raise WireError(
                    f"block {block} ({part}) carries {n} params, model expects "
                    f"{expected.stop - expected.start}"
                )
        values = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
        blocks.append(BlockPayload(block, part, values))
        offset += 4 * n
    if offset != len(data):
        raise WireError(f"{len(data) - offset} trailing bytes after last block")
    return WireMessage(msg_type, client_id, rnd, tuple(blocks))
