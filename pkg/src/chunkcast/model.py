"""Tensor chunking geometry, element types, and deterministic identities.

A d-dimensional tensor of size S is partitioned into equally sized chunks of
size C.  Border chunks are stored physically full-size; elements outside the
logical region are zero padded.  Chunk payloads are row-major (last dimension
fastest), little-endian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import canon


class CoordinateError(ValueError):
    """A global or chunk coordinate lies outside the tensor."""


class Scalar(Enum):
    U8 = ("u8", np.uint8, 0)
    I16 = ("i16", np.int16, 1)
    U16 = ("u16", np.uint16, 2)
    F32 = ("f32", np.float32, 3)
    F64 = ("f64", np.float64, 4)

    def __init__(self, label, np_dtype, code):
        self.label = label
        self.np_dtype = np.dtype(np_dtype).newbyteorder("<")
        self.code = code

    @property
    def width(self) -> int:
        return self.np_dtype.itemsize

    @property
    def is_float(self) -> bool:
        return self in (Scalar.F32, Scalar.F64)

    def bounds(self):
        info = np.iinfo(self.np_dtype)
        return int(info.min), int(info.max)

    def vec(self, lanes: int) -> "ElementType":
        return ElementType(self, lanes)

    @staticmethod
    def from_code(code: int) -> "Scalar":
        for s in Scalar:
            if s.code == code:
                return s
        raise ValueError(f"unknown scalar code {code}")


@dataclass(frozen=True)
class ElementType:
    """Scalar base type plus a fixed lane count (1 = scalar, 2-4 = vector)."""

    scalar: Scalar
    lanes: int = 1

    def __post_init__(self):
        if not 1 <= self.lanes <= 4:
            raise ValueError("lane count must be in 1..4")

    @property
    def width(self) -> int:
        return self.scalar.width * self.lanes

    @property
    def np_dtype(self) -> np.dtype:
        return self.scalar.np_dtype

    def payload_shape(self, chunk_size) -> tuple:
        shape = tuple(int(c) for c in chunk_size)
        return shape + (self.lanes,) if self.lanes > 1 else shape

    def canon(self):
        return (self.scalar.code, self.lanes)

    def __str__(self):
        return self.scalar.label if self.lanes == 1 else f"{self.scalar.label}x{self.lanes}"


U8 = ElementType(Scalar.U8)
I16 = ElementType(Scalar.I16)
U16 = ElementType(Scalar.U16)
F32 = ElementType(Scalar.F32)
F64 = ElementType(Scalar.F64)
RGBA_U8 = ElementType(Scalar.U8, 4)
RGBA_F32 = ElementType(Scalar.F32, 4)


@dataclass(frozen=True)
class TensorMetaData:
    """Logical tensor shape, chunk shape, and element type."""

    size: tuple
    chunk_size: tuple
    element_type: ElementType

    def __init__(self, size, chunk_size, element_type=F32):
        object.__setattr__(self, "size", tuple(int(s) for s in size))
        object.__setattr__(self, "chunk_size", tuple(int(c) for c in chunk_size))
        object.__setattr__(self, "element_type", element_type)
        if self.num_dims < 1:
            raise ValueError("tensor must have at least one dimension")
        if len(self.chunk_size) != self.num_dims:
            raise ValueError("chunk_size dimensionality mismatch")
        if any(s < 1 for s in self.size) or any(c < 1 for c in self.chunk_size):
            raise ValueError("size and chunk_size entries must be positive")

    @property
    def num_dims(self) -> int:
        return len(self.size)

    @property
    def num_elements(self) -> int:
        return math.prod(self.size)

    def chunk_grid_dims(self) -> tuple:
        return tuple(-(-s // c) for s, c in zip(self.size, self.chunk_size))

    def num_chunks(self) -> int:
        return math.prod(self.chunk_grid_dims())

    def chunk_payload_bytes(self) -> int:
        return math.prod(self.chunk_size) * self.element_type.width

    def chunk_positions(self):
        """Iterate all chunk positions in row-major order."""
        return np.ndindex(*self.chunk_grid_dims())

    def chunk_index(self, h) -> int:
        """Row-major linearization of a chunk position over the chunk grid."""
        grid = self.chunk_grid_dims()
        idx = 0
        for hi, gi in zip(h, grid):
            if not 0 <= hi < gi:
                raise CoordinateError(f"chunk position {tuple(h)} outside grid {grid}")
            idx = idx * gi + int(hi)
        return idx

    def chunk_position_of_index(self, idx: int) -> tuple:
        grid = self.chunk_grid_dims()
        if not 0 <= idx < self.num_chunks():
            raise CoordinateError(f"chunk index {idx} outside grid {grid}")
        pos = []
        for gi in reversed(grid):
            pos.append(idx % gi)
            idx //= gi
        return tuple(reversed(pos))

    def chunk_logical_region(self, h):
        """Half-open element region [begin, end) covered by chunk h.

        Border chunks are clipped to the tensor size, so the region can be
        smaller than the chunk size but is never empty.
        """
        grid = self.chunk_grid_dims()
        h = tuple(int(x) for x in h)
        if len(h) != self.num_dims or any(not 0 <= hi < gi for hi, gi in zip(h, grid)):
            raise CoordinateError(f"chunk position {h} outside grid {grid}")
        begin = tuple(hi * ci for hi, ci in zip(h, self.chunk_size))
        end = tuple(min((hi + 1) * ci, si) for hi, ci, si in zip(h, self.chunk_size, self.size))
        return begin, end

    def canon(self):
        return {
            "size": list(self.size),
            "chunk": list(self.chunk_size),
            "et": list(self.element_type.canon()),
        }


@dataclass(frozen=True)
class EmbeddingData:
    """Physical interpretation: element spacing per dimension."""

    spacing: tuple

    def __init__(self, spacing):
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        if any(not math.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError("spacing entries must be finite and positive")

    def physical_size(self, size) -> tuple:
        return tuple(sp * si for sp, si in zip(self.spacing, size))

    def scaled(self, factors) -> "EmbeddingData":
        return EmbeddingData(tuple(sp * f for sp, f in zip(self.spacing, factors)))

    def without_dim(self, dim: int) -> "EmbeddingData":
        return EmbeddingData(self.spacing[:dim] + self.spacing[dim + 1 :])

    def canon(self):
        return list(self.spacing)


@dataclass(frozen=True)
class ChunkCoords:
    chunk_pos: tuple
    local_pos: tuple


def global_to_chunk(g, chunk_size, size=None) -> ChunkCoords:
    """Split a global position into chunk position and local position.

    h_i = floor(g_i / C_i), l_i = g_i mod C_i.
    """
    g = tuple(int(x) for x in g)
    if size is not None:
        if any(gi < 0 or gi >= si for gi, si in zip(g, size)):
            raise CoordinateError(f"global position {g} outside tensor size {tuple(size)}")
    elif any(gi < 0 for gi in g):
        raise CoordinateError(f"global position {g} has negative component")
    h = tuple(gi // ci for gi, ci in zip(g, chunk_size))
    l = tuple(gi % ci for gi, ci in zip(g, chunk_size))
    return ChunkCoords(h, l)


@dataclass(frozen=True)
class OperatorId:
    """Deterministic 128-bit operator identity.

    Recursively derived: it changes when the operator name, any parameter,
    or any input operator's identity changes.
    """

    value: bytes

    def __post_init__(self):
        if len(self.value) != 16:
            raise ValueError("OperatorId must be 16 bytes")

    def hex(self) -> str:
        return self.value.hex()

    def __repr__(self):
        return f"OperatorId({self.value.hex()[:12]})"


@dataclass(frozen=True)
class ChunkId:
    value: bytes

    def __post_init__(self):
        if len(self.value) != 16:
            raise ValueError("ChunkId must be 16 bytes")

    def hex(self) -> str:
        return self.value.hex()

    def __repr__(self):
        return f"ChunkId({self.value.hex()[:12]})"


def operator_id(name: str, params, inputs=()) -> OperatorId:
    """Digest (name, canonical params, input ids); order-sensitive throughout."""
    input_bytes = b"".join(i.value for i in inputs)
    return OperatorId(canon.digest128(b"OP", name.encode("utf-8"), canon.encode(params), input_bytes))


def chunk_id(op: OperatorId, h) -> ChunkId:
    return ChunkId(canon.digest128(b"CH", op.value, canon.encode([int(x) for x in h])))


def zero_payload(md: TensorMetaData) -> np.ndarray:
    return np.zeros(md.element_type.payload_shape(md.chunk_size), dtype=md.element_type.np_dtype)
