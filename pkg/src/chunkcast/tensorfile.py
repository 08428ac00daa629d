"""Chunked tensor files and LOD pyramid manifests.

One tensor per file: a fixed header, a chunk offset table, then chunk
payloads.  All fields little-endian.  Layout:

    magic "PLCT" | version u32 | element code u8 | lanes u8 | ndim u8
    size ndim*u64 | chunk_size ndim*u64 | spacing ndim*f64
    offset table num_chunks*u64 (row-major chunk order, 0 = chunk absent)
    chunk payloads (each product(chunk_size) * element width bytes)

A pyramid is one file per level plus a JSON manifest with keys
``format``, ``version`` and ``levels``: a list of ``{"path": str,
"spacing": [float], "const_table": str | null}`` objects, paths relative
to the manifest's directory, finest level first.
"""

from __future__ import annotations

import json
import os
import struct
import weakref
from dataclasses import dataclass

import numpy as np

from .model import ElementType, EmbeddingData, Scalar, TensorMetaData
from .graph import OperatorNode
from .ops import (
    OperatorError,
    SMOOTHING_KERNEL,
    build_const_chunk_table,
    downsample_mean,
    separable_conv,
)

MAGIC = b"PLCT"
VERSION = 1

_FIXED = struct.Struct("<4sIBBB")


class TensorFileError(OSError):
    pass


@dataclass(frozen=True)
class ChunkedFileHeader:
    md: TensorMetaData
    embedding: EmbeddingData
    offsets: tuple  # u64 per chunk, row-major; 0 = absent
    header_bytes: int

    @property
    def payload_bytes(self) -> int:
        return self.md.chunk_payload_bytes()


def _header_size(ndim: int, num_chunks: int) -> int:
    return _FIXED.size + ndim * 8 * 2 + ndim * 8 + num_chunks * 8


def _read_exact(f, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TensorFileError(f"{path}: truncated file")
    return buf


def read_header(path) -> ChunkedFileHeader:
    """Parse and validate a chunked file's header and offset table."""
    path = os.fspath(path)
    file_size = os.path.getsize(path)
    with open(path, "rb") as f:
        magic, version, code, lanes, ndim = _FIXED.unpack(_read_exact(f, _FIXED.size, path))
        if magic != MAGIC:
            raise TensorFileError(f"{path}: not a chunked tensor file (bad magic)")
        if version != VERSION:
            raise TensorFileError(f"{path}: unsupported version {version}")
        try:
            et = ElementType(Scalar.from_code(code), lanes)
        except ValueError as exc:
            raise TensorFileError(f"{path}: {exc}") from None
        size = struct.unpack(f"<{ndim}Q", _read_exact(f, ndim * 8, path))
        chunk = struct.unpack(f"<{ndim}Q", _read_exact(f, ndim * 8, path))
        spacing = struct.unpack(f"<{ndim}d", _read_exact(f, ndim * 8, path))
        md = TensorMetaData(size, chunk, et)
        n = md.num_chunks()
        offsets = struct.unpack(f"<{n}Q", _read_exact(f, n * 8, path))
    header_bytes = _header_size(ndim, n)
    payload = md.chunk_payload_bytes()
    for off in offsets:
        if off and not (header_bytes <= off and off + payload <= file_size):
            raise TensorFileError(f"{path}: chunk offset {off} outside file")
    return ChunkedFileHeader(md, EmbeddingData(spacing), offsets, header_bytes)


def _write_header(f, md: TensorMetaData, spacing, offsets):
    et = md.element_type
    f.write(_FIXED.pack(MAGIC, VERSION, et.scalar.code, et.lanes, md.num_dims))
    f.write(struct.pack(f"<{md.num_dims}Q", *[int(s) for s in md.size]))
    f.write(struct.pack(f"<{md.num_dims}Q", *[int(c) for c in md.chunk_size]))
    f.write(struct.pack(f"<{md.num_dims}d", *[float(s) for s in spacing]))
    f.write(struct.pack(f"<{len(offsets)}Q", *offsets))


class _ChunkWriter:
    """Sequential single-writer for one output file; offsets patched at close."""

    def __init__(self, path, md: TensorMetaData, spacing):
        self.path = os.fspath(path)
        self.md = md
        self.spacing = tuple(float(s) for s in spacing)
        self.offsets = [0] * md.num_chunks()
        self._f = open(self.path, "wb")
        _write_header(self._f, md, self.spacing, self.offsets)
        self._pos = _header_size(md.num_dims, md.num_chunks())

    def write_chunk(self, position, payload: np.ndarray):
        idx = self.md.chunk_index(position)
        arr = np.ascontiguousarray(payload, dtype=self.md.element_type.np_dtype)
        if arr.nbytes != self.md.chunk_payload_bytes():
            raise TensorFileError(
                f"{self.path}: chunk {tuple(position)} payload is {arr.nbytes} bytes, "
                f"expected {self.md.chunk_payload_bytes()}"
            )
        self.offsets[idx] = self._pos
        self._f.write(arr.tobytes())
        self._pos += arr.nbytes

    def close(self):
        self._f.seek(0)
        _write_header(self._f, self.md, self.spacing, self.offsets)
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        else:
            self._f.close()


def import_raw(input_path, output_path, md: TensorMetaData, embedding=None) -> ChunkedFileHeader:
    """Rechunk a dense row-major array file into a chunked file.

    The input must be exactly product(size) elements; border chunks are
    zero-padded to full chunk extent in the output.
    """
    input_path = os.fspath(input_path)
    expected = int(np.prod([int(s) for s in md.size])) * md.element_type.width
    actual = os.path.getsize(input_path)
    if actual != expected:
        raise TensorFileError(
            f"{input_path}: size mismatch: {actual} bytes on disk, "
            f"{expected} expected for {tuple(md.size)} {md.element_type}"
        )
    shape = md.element_type.payload_shape(md.size)
    data = np.memmap(input_path, dtype=md.element_type.np_dtype, mode="r", shape=shape)
    spacing = embedding.spacing if embedding is not None else (1.0,) * md.num_dims
    payload_shape = md.element_type.payload_shape(md.chunk_size)
    with _ChunkWriter(output_path, md, spacing) as w:
        buf = np.zeros(payload_shape, dtype=md.element_type.np_dtype)
        for pos in md.chunk_positions():
            begin, end = md.chunk_logical_region(pos)
            sel = tuple(slice(b, e) for b, e in zip(begin, end))
            dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
            buf[...] = 0
            buf[dst] = data[sel]
            w.write_chunk(pos, buf)
    return read_header(output_path)


def open_chunked(path) -> OperatorNode:
    """Source node reading chunks straight from a chunked file.

    Each chunk request is one positioned read on the worker pool; absent
    chunks resolve to zeros.  The file stays open as long as the node lives.
    """
    path = os.fspath(path)
    header = read_header(path)
    md = header.md
    fd = os.open(path, os.O_RDONLY)
    payload = md.chunk_payload_bytes()

    def kernel(h, input_arrays, out):
        off = header.offsets[md.chunk_index(h)]
        if off == 0:
            out[...] = 0
            return
        raw = os.pread(fd, payload, off)
        if len(raw) != payload:
            raise TensorFileError(f"{path}: short read at chunk {tuple(h)}")
        out[...] = np.frombuffer(raw, dtype=md.element_type.np_dtype).reshape(out.shape)

    node = OperatorNode(
        name=f"file:{os.path.basename(path)}",
        params={
            "path": os.path.abspath(path),
            "size": [int(s) for s in md.size],
            "chunk": [int(c) for c in md.chunk_size],
            "et": list(md.element_type.canon()),
        },
        inputs=(),
        md=md,
        embedding=header.embedding,
        dependencies=lambda h: [],
        kernel=kernel,
    )
    weakref.finalize(node, os.close, fd)
    return node


def save_tensor(node: OperatorNode, path, engine) -> ChunkedFileHeader:
    """Resolve every chunk of `node` (streaming) into a new chunked file."""
    spacing = node.embedding.spacing if node.embedding else (1.0,) * node.md.num_dims
    with _ChunkWriter(path, node.md, spacing) as w:
        for pos, arr in engine.resolve_iter(node):
            w.write_chunk(pos, arr)
    return read_header(path)


# ---------------------------------------------------------------------------
# pyramid manifests


@dataclass(frozen=True)
class PyramidLevel:
    path: str
    spacing: tuple
    const_table: str | None = None


@dataclass(frozen=True)
class PyramidManifest:
    """Per-level chunked files for one dataset, finest level first."""

    levels: tuple  # of PyramidLevel, paths absolute

    def __post_init__(self):
        if not self.levels:
            raise TensorFileError("manifest has no levels")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def open_level(self, k: int) -> OperatorNode:
        return open_chunked(self.levels[k].path)

    def open_const_table(self, k: int) -> OperatorNode | None:
        ct = self.levels[k].const_table
        return open_chunked(ct) if ct else None

    def open_pyramid(self):
        from .ops import LodPyramid

        return LodPyramid(tuple(
            (node, node.embedding)
            for node in (self.open_level(k) for k in range(self.num_levels))
        ))


def save_manifest(manifest: PyramidManifest, path) -> None:
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    doc = {
        "format": "chunked-pyramid",
        "version": 1,
        "levels": [
            {
                "path": os.path.relpath(lv.path, base),
                "spacing": [float(s) for s in lv.spacing],
                "const_table": os.path.relpath(lv.const_table, base) if lv.const_table else None,
            }
            for lv in manifest.levels
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> PyramidManifest:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"{path}: not a manifest: {exc}") from None
    if doc.get("format") != "chunked-pyramid":
        raise TensorFileError(f"{path}: not a pyramid manifest")
    base = os.path.dirname(os.path.abspath(path))

    def absolute(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    levels = tuple(
        PyramidLevel(absolute(lv["path"]), tuple(lv["spacing"]), absolute(lv.get("const_table")))
        for lv in doc["levels"]
    )
    return PyramidManifest(levels)


def build_lod_offline(input_path, manifest_path, engine, *,
                      smooth: bool = True, const_tables: bool = False) -> PyramidManifest:
    """Materialize an LOD pyramid on disk, one level at a time.

    Level k+1 streams from level k's already-written file, so peak memory
    stays bounded by the engine's store budget no matter the tensor size.
    The input file itself serves as level 0.
    """
    input_path = os.path.abspath(os.fspath(input_path))
    manifest_path = os.fspath(manifest_path)
    base = os.path.splitext(os.path.abspath(manifest_path))[0]

    levels = []
    cur_path = input_path
    k = 0
    while True:
        node = open_chunked(cur_path)
        ct_path = None
        if const_tables:
            ct_path = f"{base}.L{k}.ctab.plct"
            save_tensor(build_const_chunk_table(node), ct_path, engine)
        levels.append(PyramidLevel(cur_path, node.embedding.spacing, ct_path))
        md = node.md
        if all(s <= c for s, c in zip(md.size, md.chunk_size)):
            break
        if smooth:
            node = separable_conv(node, [SMOOTHING_KERNEL] * md.num_dims)
        node = downsample_mean(node)
        cur_path = f"{base}.L{k + 1}.plct"
        save_tensor(node, cur_path, engine)
        k += 1

    manifest = PyramidManifest(tuple(levels))
    save_manifest(manifest, manifest_path)
    return manifest
