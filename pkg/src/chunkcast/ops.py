"""Operator library: sources, pointwise math with fusion, convolution,
slicing, downsampling, and LOD pyramid assembly.

All operators are dimension-agnostic and produce immutable graph nodes; no
data moves until the engine pulls chunks.  Pointwise chains fuse at graph
construction time (`a - b`, `.abs()`, `.cast(...)` build one node), so
intermediate tensors of a chain never materialize chunks.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import canon
from .graph import OperatorNode
from .model import (
    ElementType,
    EmbeddingData,
    Scalar,
    TensorMetaData,
)


class OperatorError(ValueError):
    pass


def _coerce_embedding(embedding, d) -> EmbeddingData:
    if embedding is None:
        return EmbeddingData((1.0,) * d)
    if isinstance(embedding, EmbeddingData):
        return embedding
    return EmbeddingData(tuple(embedding))


# ---------------------------------------------------------------------------
# element casting


def cast_array(arr: np.ndarray, et: ElementType) -> np.ndarray:
    """Numeric conversion: floats pass through; float->int rounds to nearest
    even and saturates at the type bounds; NaN maps to 0."""
    if et.scalar.is_float:
        return arr.astype(et.np_dtype, copy=False)
    x = np.rint(np.asarray(arr, dtype=np.float64))
    x = np.where(np.isnan(x), 0.0, x)
    lo, hi = et.scalar.bounds()
    return np.clip(x, lo, hi).astype(et.np_dtype)


# ---------------------------------------------------------------------------
# pointwise expressions

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "min": np.minimum,
    "max": np.maximum,
}
_UNARY = {"abs": np.abs}

_fusion_enabled = threading.local()


def _fusion_on() -> bool:
    return getattr(_fusion_enabled, "value", True)


class fusion_disabled:
    """Context manager: build graphs without pointwise fusion (for tests
    asserting fusion transparency; results must be bitwise identical)."""

    def __enter__(self):
        self._prev = _fusion_on()
        _fusion_enabled.value = False
        return self

    def __exit__(self, *exc):
        _fusion_enabled.value = self._prev


@dataclass(frozen=True)
class Expr:
    """Per-element expression tree; leaves reference input tensors or consts."""

    kind: str
    children: tuple = ()
    value: float = 0.0  # const leaves
    index: int = -1  # input leaves
    et: ElementType | None = None  # cast target

    def canonical(self):
        if self.kind == "in":
            return ["in", self.index]
        if self.kind == "const":
            return ["const", float(self.value)]
        if self.kind == "cast":
            return ["cast", list(self.et.canon()), self.children[0].canonical()]
        return [self.kind] + [c.canonical() for c in self.children]

    def evaluate(self, inputs: list) -> np.ndarray:
        """Evaluate in float64; casts quantize mid-expression."""
        if self.kind == "in":
            return np.asarray(inputs[self.index], dtype=np.float64)
        if self.kind == "const":
            return np.float64(self.value)
        if self.kind == "cast":
            inner = self.children[0].evaluate(inputs)
            return cast_array(inner, self.et).astype(np.float64)
        if self.kind in _UNARY:
            return _UNARY[self.kind](self.children[0].evaluate(inputs))
        if self.kind in _BINARY:
            with np.errstate(divide="ignore", invalid="ignore"):
                return _BINARY[self.kind](
                    self.children[0].evaluate(inputs), self.children[1].evaluate(inputs)
                )
        raise OperatorError(f"unknown expression kind {self.kind!r}")

    def remap(self, mapping: dict) -> "Expr":
        if self.kind == "in":
            return Expr("in", index=mapping[self.index])
        if self.kind in ("const",):
            return self
        return Expr(
            self.kind,
            tuple(c.remap(mapping) for c in self.children),
            value=self.value,
            index=self.index,
            et=self.et,
        )


def _as_expr(operand, leaves: list) -> Expr:
    """Turn an operand into an expression, splicing fusable pointwise nodes."""
    if isinstance(operand, OperatorNode):
        info = getattr(operand, "_pointwise", None)
        if info is not None and _fusion_on() and info["fuse"]:
            mapping = {}
            for i, leaf in enumerate(info["leaves"]):
                mapping[i] = _leaf_index(leaf, leaves)
            spliced = info["expr"].remap(mapping)
            # quantize exactly where materialization would have: fusion must
            # be byte-transparent, not merely close
            return Expr("cast", (spliced,), et=operand.md.element_type)
        return Expr("in", index=_leaf_index(operand, leaves))
    if isinstance(operand, (int, float, np.integer, np.floating)):
        return Expr("const", value=float(operand))
    raise OperatorError(f"cannot use {type(operand).__name__} in a pointwise expression")


def _leaf_index(node: OperatorNode, leaves: list) -> int:
    for i, existing in enumerate(leaves):
        if existing is node or existing.op_id == node.op_id:
            return i
    leaves.append(node)
    return len(leaves) - 1


def pointwise(expr: Expr, inputs: list, element_type: ElementType | None = None,
              fuse: bool = True) -> OperatorNode:
    """Elementwise operator over tensors with identical size and chunking."""
    if not inputs:
        raise OperatorError("pointwise needs at least one input tensor")
    md0 = inputs[0].md
    for node in inputs[1:]:
        if tuple(node.md.size) != tuple(md0.size) or tuple(node.md.chunk_size) != tuple(
            md0.chunk_size
        ):
            raise OperatorError("pointwise inputs must share size and chunk size")
    out_et = element_type or _expr_type(expr, inputs) or md0.element_type
    md = TensorMetaData(md0.size, md0.chunk_size, out_et)

    def dependencies(h):
        return [[tuple(h)] for _ in inputs]

    def kernel(h, input_arrays, out):
        result = expr.evaluate([arrs[0] for arrs in input_arrays])
        np.copyto(out, cast_array(np.broadcast_to(result, out.shape), out_et))

    node = OperatorNode(
        name="pointwise",
        params={"expr": expr.canonical(), "et": list(out_et.canon())},
        inputs=tuple(inputs),
        md=md,
        embedding=inputs[0].embedding,
        dependencies=dependencies,
        kernel=kernel,
        supports_inplace=True,
    )
    object.__setattr__(node, "_pointwise", {"expr": expr, "leaves": list(inputs), "fuse": fuse})
    return node


def _expr_type(expr: Expr, leaves: list) -> ElementType | None:
    """Element type the expression produces, inferred bottom-up.

    Casts fix the type, input leaves carry their tensor's type, constants
    are polymorphic.  Splice wrappers (see _as_expr) make fused sub-chains
    carry the type they would have materialized with, so typing is the same
    fused or not.  Mixed operand types are the user's to resolve with an
    explicit cast.
    """
    if expr.kind == "cast":
        return expr.et
    if expr.kind == "in":
        return leaves[expr.index].md.element_type
    if expr.kind == "const":
        return None
    got = None
    for child in expr.children:
        t = _expr_type(child, leaves)
        if t is None:
            continue
        if got is None:
            got = t
        elif t != got:
            raise OperatorError(
                f"pointwise operands mix element types {got} and {t}; "
                "insert an explicit cast"
            )
    return got


def _binary_op(kind, a, b):
    leaves: list = []
    ea = _as_expr(a, leaves)
    eb = _as_expr(b, leaves)
    return pointwise(Expr(kind, (ea, eb)), leaves)


def add(a, b):
    return _binary_op("add", a, b)


def sub(a, b):
    return _binary_op("sub", a, b)


def mul(a, b):
    return _binary_op("mul", a, b)


def div(a, b):
    return _binary_op("div", a, b)


def minimum(a, b):
    return _binary_op("min", a, b)


def maximum(a, b):
    return _binary_op("max", a, b)


def absolute(a):
    leaves: list = []
    return pointwise(Expr("abs", (_as_expr(a, leaves),)), leaves)


def cast(node: OperatorNode, element_type: ElementType) -> OperatorNode:
    """Per-element numeric conversion (see cast_array for the rules)."""
    et = element_type
    if et.lanes not in (1, node.md.element_type.lanes):
        raise OperatorError(
            f"cannot cast {node.md.element_type.lanes} lanes to {et.lanes}"
        )
    leaves: list = []
    inner = _as_expr(node, leaves)
    return pointwise(Expr("cast", (inner,), et=et), leaves, element_type=et)


# ---------------------------------------------------------------------------
# sources


def source_from_array(data: np.ndarray, chunk_size, element_type: ElementType | None = None,
                      embedding=None) -> OperatorNode:
    """In-memory source; identity is content-addressed so equal arrays get
    equal operator ids across runs."""
    data = np.ascontiguousarray(data)
    if element_type is None:
        element_type = _element_type_for(data)
    lanes = element_type.lanes
    size = data.shape[:-1] if lanes > 1 else data.shape
    if lanes > 1 and data.shape[-1] != lanes:
        raise OperatorError(f"last axis must hold the {lanes} lanes")
    if len(size) != len(tuple(chunk_size)):
        raise OperatorError(
            f"array of shape {data.shape} does not match a {len(tuple(chunk_size))}-d chunking"
        )
    md = TensorMetaData(size, chunk_size, element_type)
    emb = _coerce_embedding(embedding, md.num_dims)
    data = data.astype(element_type.np_dtype, copy=False)
    digest = canon.digest128(b"ARRAY", data.tobytes())

    def dependencies(h):
        return []

    def kernel(h, input_arrays, out):
        begin, end = md.chunk_logical_region(h)
        sel = tuple(slice(b, e) for b, e in zip(begin, end))
        out[...] = 0
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = data[sel]

    return OperatorNode(
        name="source_array",
        params={
            "digest": digest,
            "size": [int(s) for s in md.size],
            "chunk": [int(c) for c in md.chunk_size],
            "et": list(element_type.canon()),
        },
        inputs=(),
        md=md,
        embedding=emb,
        dependencies=dependencies,
        kernel=kernel,
    )


def _element_type_for(data: np.ndarray) -> ElementType:
    table = {
        np.dtype(np.uint8): Scalar.U8,
        np.dtype(np.int16): Scalar.I16,
        np.dtype(np.uint16): Scalar.U16,
        np.dtype(np.float32): Scalar.F32,
        np.dtype(np.float64): Scalar.F64,
    }
    scalar = table.get(data.dtype)
    if scalar is None:
        raise OperatorError(f"unsupported source dtype {data.dtype}")
    return ElementType(scalar)


def source_procedural(generator, name: str, size, chunk_size,
                      element_type: ElementType = ElementType(Scalar.F32),
                      embedding=None, params: dict | None = None,
                      coord_scale: float = 1.0, coord_offset: float = 0.0) -> OperatorNode:
    """Source computed on demand from a pure function of global coordinates.

    `generator(coords)` receives one float64 array per dimension (already
    scaled by coord_scale/offset, used by procedural LOD levels) and returns
    element values for those positions.  No backing storage regardless of
    logical size.
    """
    md = TensorMetaData(size, chunk_size, element_type)
    emb = _coerce_embedding(embedding, md.num_dims)

    def dependencies(h):
        return []

    def kernel(h, input_arrays, out):
        begin, end = md.chunk_logical_region(h)
        axes = [np.arange(b, e, dtype=np.float64) for b, e in zip(begin, end)]
        grids = np.meshgrid(*axes, indexing="ij", sparse=True)
        coords = [g * coord_scale + coord_offset for g in grids]
        values = np.broadcast_to(
            np.asarray(generator(coords), dtype=np.float64),
            tuple(e - b for b, e in zip(begin, end)),
        )
        out[...] = 0
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = cast_array(values, element_type)

    return OperatorNode(
        name=f"source:{name}",
        params={
            "gen": name,
            "size": [int(s) for s in md.size],
            "chunk": [int(c) for c in md.chunk_size],
            "et": list(element_type.canon()),
            "extra": params or {},
            "scale": float(coord_scale),
            "offset": float(coord_offset),
        },
        inputs=(),
        md=md,
        embedding=emb,
        dependencies=dependencies,
        kernel=kernel,
    )


def constant(value: float, size, chunk_size,
             element_type: ElementType = ElementType(Scalar.F32), embedding=None) -> OperatorNode:
    md = TensorMetaData(size, chunk_size, element_type)
    emb = _coerce_embedding(embedding, md.num_dims)
    fill = cast_array(np.asarray(value, dtype=np.float64), element_type)

    def dependencies(h):
        return []

    def kernel(h, input_arrays, out):
        out[...] = 0
        begin, end = md.chunk_logical_region(h)
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = fill

    return OperatorNode(
        name="source_const",
        params={
            "value": float(value),
            "size": [int(s) for s in md.size],
            "chunk": [int(c) for c in md.chunk_size],
            "et": list(element_type.canon()),
        },
        inputs=(),
        md=md,
        embedding=emb,
        dependencies=dependencies,
        kernel=kernel,
    )


# ---------------------------------------------------------------------------
# block assembly shared by neighborhood operators


def _overlapping_chunks(md: TensorMetaData, begin, end):
    """Chunk positions intersecting the in-bounds region [begin, end)."""
    lo = [max(0, b) // c for b, c in zip(begin, md.chunk_size)]
    hi = [
        (min(int(e), int(s)) + c - 1) // c
        for e, s, c in zip(end, md.size, md.chunk_size)
    ]
    ranges = [range(int(l), max(int(l) + 1, int(h))) for l, h in zip(lo, hi)]
    out = []
    grid = md.chunk_grid_dims()
    for pos in np.ndindex(*[len(r) for r in ranges]):
        h = tuple(r[i] for r, i in zip(ranges, pos))
        if all(x < g for x, g in zip(h, grid)):
            out.append(h)
    return out


def assemble_region(md: TensorMetaData, chunks: dict, begin, end) -> np.ndarray:
    """Gather the in-bounds region [begin, end) from chunk payload arrays.

    `chunks` maps chunk position -> full padded payload array.  Only logical
    (valid) elements are copied.  Result dtype float64.
    """
    begin = [max(0, int(b)) for b in begin]
    end = [min(int(e), int(s)) for e, s in zip(end, md.size)]
    shape = [e - b for b, e in zip(begin, end)]
    if md.element_type.lanes > 1:
        shape.append(md.element_type.lanes)
    block = np.empty(shape, dtype=np.float64)
    for h in _overlapping_chunks(md, begin, end):
        cb, ce = md.chunk_logical_region(h)
        ob = [max(b, c) for b, c in zip(begin, cb)]
        oe = [min(e, c) for e, c in zip(end, ce)]
        if any(x >= y for x, y in zip(ob, oe)):
            continue
        src = tuple(slice(b - c, e - c) for b, e, c in zip(ob, oe, cb))
        dst = tuple(slice(b - rb, e - rb) for b, e, rb in zip(ob, oe, begin))
        block[dst] = chunks[h][src]
    return block


# ---------------------------------------------------------------------------
# separable convolution


def separable_conv(input_node: OperatorNode, kernels, border: str = "clamp") -> OperatorNode:
    """Successive 1-D convolutions along each dimension.

    `kernels` is one odd-length coefficient list per dimension ([1] is the
    identity).  Out-of-bounds reads clamp to the nearest in-bounds element.
    """
    md_in = input_node.md
    if md_in.element_type.lanes != 1:
        raise OperatorError("separable_conv expects scalar elements")
    if border != "clamp":
        raise OperatorError(f"unsupported border policy {border!r}")
    kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
    if len(kernels) != md_in.num_dims:
        raise OperatorError("one kernel per dimension required")
    for i, k in enumerate(kernels):
        if k.ndim != 1 or len(k) % 2 == 0:
            raise OperatorError(f"kernel for dim {i} must be 1-D of odd length")
        if not np.all(np.isfinite(k)):
            raise OperatorError(f"kernel for dim {i} has non-finite coefficients")
        if len(k) > 2 * md_in.size[i] + 1:
            raise OperatorError(
                f"kernel of length {len(k)} too long for dimension of size {md_in.size[i]}"
            )
    radius = [len(k) // 2 for k in kernels]
    md = TensorMetaData(md_in.size, md_in.chunk_size, md_in.element_type)

    def dependencies(h):
        begin, end = md.chunk_logical_region(h)
        lo = [b - r for b, r in zip(begin, radius)]
        hi = [e + r for e, r in zip(end, radius)]
        return [_overlapping_chunks(md_in, lo, hi)]

    def kernel(h, input_arrays, out):
        begin, end = md.chunk_logical_region(h)
        chunks = dict(zip(dependencies(h)[0], input_arrays[0]))
        lo = [b - r for b, r in zip(begin, radius)]
        hi = [e + r for e, r in zip(end, radius)]
        block = assemble_region(md_in, chunks, lo, hi)
        # clamp border: replicate edge elements for out-of-volume margins
        pad = [
            (max(0, -l), max(0, int(h_) - int(s)))
            for l, h_, s in zip(lo, hi, md_in.size)
        ]
        if any(p != (0, 0) for p in pad):
            block = np.pad(block, pad, mode="edge")
        for dim, k in enumerate(kernels):
            block = _conv1d(block, k, dim)
        out[...] = 0
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = cast_array(block, md.element_type)

    return OperatorNode(
        name="separable_conv",
        params={"kernels": [[float(c) for c in k] for k in kernels]},
        inputs=(input_node,),
        md=md,
        embedding=input_node.embedding,
        dependencies=dependencies,
        kernel=kernel,
    )


def _conv1d(block: np.ndarray, k: np.ndarray, dim: int) -> np.ndarray:
    """'valid' correlation along one axis (symmetric kernels make the
    correlation/convolution distinction moot for our use, but coefficients
    are applied in index order against increasing coordinates)."""
    n = len(k)
    if n == 1:
        return block * k[0]
    out_len = block.shape[dim] - (n - 1)
    acc = np.zeros(
        block.shape[:dim] + (out_len,) + block.shape[dim + 1 :], dtype=np.float64
    )
    for j in range(n):
        sel = [slice(None)] * block.ndim
        sel[dim] = slice(j, j + out_len)
        acc += k[j] * block[tuple(sel)]
    return acc


# ---------------------------------------------------------------------------
# slicing


def slice_node(input_node: OperatorNode, dim: int, index: int) -> OperatorNode:
    md_in = input_node.md
    if md_in.num_dims < 2:
        raise OperatorError("cannot slice a 1-D tensor")
    if not 0 <= dim < md_in.num_dims:
        raise OperatorError(f"slice dim {dim} out of range")
    if not 0 <= index < md_in.size[dim]:
        raise OperatorError(f"slice index {index} out of range for size {md_in.size[dim]}")
    size = tuple(s for i, s in enumerate(md_in.size) if i != dim)
    chunk = tuple(c for i, c in enumerate(md_in.chunk_size) if i != dim)
    md = TensorMetaData(size, chunk, md_in.element_type)
    h_dim = index // md_in.chunk_size[dim]
    l_dim = index % md_in.chunk_size[dim]
    embedding = input_node.embedding.without_dim(dim) if input_node.embedding else None

    def dependencies(h):
        src = list(h)
        src.insert(dim, h_dim)
        return [[tuple(src)]]

    def kernel(h, input_arrays, out):
        np.copyto(out, np.take(input_arrays[0][0], l_dim, axis=dim))

    return OperatorNode(
        name="slice",
        params={"dim": int(dim), "index": int(index)},
        inputs=(input_node,),
        md=md,
        embedding=embedding,
        dependencies=dependencies,
        kernel=kernel,
    )


def slice_node_getitem(node: OperatorNode, key) -> OperatorNode:
    """numpy-ish indexing: integers slice dimensions, `:` keeps them."""
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > node.md.num_dims:
        raise OperatorError("too many indices")
    out = node
    dim = 0
    for item in key:
        if isinstance(item, (int, np.integer)):
            out = slice_node(out, dim, int(item))
        elif item == slice(None):
            dim += 1
        else:
            raise OperatorError("only integer indices and ':' are supported")
    return out


# ---------------------------------------------------------------------------
# downsampling and LOD pyramids


def downsample_mean(input_node: OperatorNode, dims=None) -> OperatorNode:
    """Factor-2 mean downsampling; border blocks average only valid elements."""
    md_in = input_node.md
    d = md_in.num_dims
    selected = tuple(range(d)) if dims is None else tuple(sorted(dims))
    size = tuple(
        -(-s // 2) if i in selected else s for i, s in enumerate(md_in.size)
    )
    md = TensorMetaData(size, md_in.chunk_size, md_in.element_type)
    embedding = None
    if input_node.embedding is not None:
        embedding = EmbeddingData(
            tuple(
                sp * 2 if i in selected else sp
                for i, sp in enumerate(input_node.embedding.spacing)
            )
        )

    def src_region(h):
        begin, end = md.chunk_logical_region(h)
        lo = [b * 2 if i in selected else b for i, b in enumerate(begin)]
        hi = [
            min(e * 2, md_in.size[i]) if i in selected else e
            for i, e in enumerate(end)
        ]
        return lo, hi

    def dependencies(h):
        lo, hi = src_region(h)
        return [_overlapping_chunks(md_in, lo, hi)]

    def kernel(h, input_arrays, out):
        lo, hi = src_region(h)
        chunks = dict(zip(dependencies(h)[0], input_arrays[0]))
        block = assemble_region(md_in, chunks, lo, hi)
        for dim in selected:
            block = _pairwise_mean(block, dim)
        begin, end = md.chunk_logical_region(h)
        out[...] = 0
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = cast_array(block, md.element_type)

    return OperatorNode(
        name="downsample_mean",
        params={"dims": [int(i) for i in selected]},
        inputs=(input_node,),
        md=md,
        embedding=embedding,
        dependencies=dependencies,
        kernel=kernel,
    )


def _pairwise_mean(block: np.ndarray, dim: int) -> np.ndarray:
    n = block.shape[dim]
    even = n - n % 2
    sel_a = [slice(None)] * block.ndim
    sel_b = [slice(None)] * block.ndim
    sel_a[dim] = slice(0, even, 2)
    sel_b[dim] = slice(1, even, 2)
    paired = (block[tuple(sel_a)] + block[tuple(sel_b)]) * 0.5
    if n % 2:
        tail_sel = [slice(None)] * block.ndim
        tail_sel[dim] = slice(n - 1, n)
        paired = np.concatenate([paired, block[tuple(tail_sel)]], axis=dim)
    return paired


SMOOTHING_KERNEL = (0.25, 0.5, 0.25)


@dataclass(frozen=True)
class LodPyramid:
    """Resolution levels with constant physical extent; level 0 is finest."""

    levels: tuple  # of (OperatorNode, EmbeddingData)

    def __post_init__(self):
        if not self.levels:
            raise OperatorError("pyramid needs at least one level")
        base_node, base_emb = self.levels[0]
        base_phys = base_emb.physical_size(base_node.md.size)
        for node, emb in self.levels[1:]:
            phys = emb.physical_size(node.md.size)
            for p, b, sp in zip(phys, base_phys, emb.spacing):
                if abs(p - b) > sp + 1e-9:
                    raise OperatorError("pyramid level physical sizes diverge")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def node(self, level: int) -> OperatorNode:
        return self.levels[level][0]

    def embedding(self, level: int) -> EmbeddingData:
        return self.levels[level][1]

    @property
    def nodes(self):
        return [n for n, _ in self.levels]


def build_lod(input_node: OperatorNode, embedding=None, smooth: bool = True) -> LodPyramid:
    """Levels of smooth-then-halve until every dimension fits one chunk."""
    emb = _coerce_embedding(
        embedding if embedding is not None else input_node.embedding, input_node.md.num_dims
    )
    levels = [(input_node, emb)]
    node = input_node
    while any(s > c for s, c in zip(node.md.size, node.md.chunk_size)):
        if smooth:
            node = separable_conv(node, [SMOOTHING_KERNEL] * node.md.num_dims)
        node = downsample_mean(node)
        emb = EmbeddingData(tuple(sp * 2 for sp in emb.spacing))
        levels.append((node, emb))
    return LodPyramid(tuple(levels))


def single_level_lod(input_node: OperatorNode, embedding=None) -> LodPyramid:
    emb = _coerce_embedding(
        embedding if embedding is not None else input_node.embedding, input_node.md.num_dims
    )
    return LodPyramid(((input_node, emb),))


def procedural_lod(generator, name: str, size, chunk_size,
                   element_type: ElementType = ElementType(Scalar.F32),
                   embedding=None, params: dict | None = None) -> LodPyramid:
    """LOD pyramid for procedural sources: each level re-evaluates the
    generator at scaled coordinates instead of filtering the level below,
    so even absurdly large virtual volumes get cheap coarse levels."""
    emb0 = _coerce_embedding(embedding, len(tuple(size)))
    levels = []
    level = 0
    cur_size = tuple(int(s) for s in size)
    while True:
        scale = float(2**level)
        node = source_procedural(
            generator,
            name,
            cur_size,
            chunk_size,
            element_type,
            embedding=EmbeddingData(tuple(sp * scale for sp in emb0.spacing)),
            params=dict(params or {}, level=level),
            coord_scale=scale,
            coord_offset=(scale - 1.0) / 2.0,  # sample footprint centers
        )
        levels.append((node, node.embedding))
        if all(s <= c for s, c in zip(cur_size, node.md.chunk_size)):
            break
        cur_size = tuple(-(-s // 2) for s in cur_size)
        level += 1
    return LodPyramid(tuple(levels))


# ---------------------------------------------------------------------------
# const chunk tables (empty-space skipping support)


def sentinel_for(et: ElementType):
    """Marks a chunk as not uniform: NaN for floats, type max for integers."""
    if et.scalar.is_float:
        return math.nan
    return et.scalar.bounds()[1]


def build_const_chunk_table(input_node: OperatorNode, chunk_size=None) -> OperatorNode:
    """Tensor over the input's chunk grid: the chunk's uniform value, or the
    sentinel where the chunk is not uniform (logical region only)."""
    md_in = input_node.md
    et = md_in.element_type
    if et.lanes != 1:
        raise OperatorError("const chunk table requires scalar elements")
    grid = md_in.chunk_grid_dims()
    table_chunk = tuple(chunk_size) if chunk_size is not None else md_in.chunk_size
    table_chunk = tuple(min(c, g) for c, g in zip(table_chunk, grid))
    md = TensorMetaData(grid, table_chunk, et)
    sentinel = sentinel_for(et)

    def dependencies(h):
        begin, end = md.chunk_logical_region(h)
        span = [e - b for b, e in zip(begin, end)]
        return [[tuple(b + p for b, p in zip(begin, pos)) for pos in np.ndindex(*span)]]

    def kernel(h, input_arrays, out):
        begin, end = md.chunk_logical_region(h)
        positions = dependencies(h)[0]
        out[...] = 0
        for pos, arr in zip(positions, input_arrays[0]):
            cb, ce = md_in.chunk_logical_region(pos)
            valid = arr[tuple(slice(0, e - b) for b, e in zip(cb, ce))]
            first = valid.flat[0]
            value = first if np.all(valid == first) else sentinel
            out[tuple(p - b for p, b in zip(pos, begin))] = value

    return OperatorNode(
        name="const_chunk_table",
        params={"chunk": [int(c) for c in table_chunk]},
        inputs=(input_node,),
        md=md,
        embedding=None,
        dependencies=dependencies,
        kernel=kernel,
    )


# ---------------------------------------------------------------------------
# procedural generators


def mandelbulb_generator(size, power: int = 8, bailout: float = 2.0, max_iter: int = 8):
    """Power-8 triplex-iteration indicator on [-1.2, 1.2]^3.

    Returns the smoothed escape-iteration count normalized to [0, 1]
    (1.0 for points that never escape).  Pure and deterministic, so chunk
    payloads are reproducible by direct per-voxel evaluation.
    """
    size = tuple(int(s) for s in size)

    def generate(coords):
        axes = [
            2.4 * c / (s - 1) - 1.2 if s > 1 else np.zeros_like(c)
            for c, s in zip(coords, size)
        ]
        cx, cy, cz = np.broadcast_arrays(*axes)
        x, y, z = cx.copy(), cy.copy(), cz.copy()
        value = np.ones(cx.shape, dtype=np.float64)
        escaped = np.zeros(cx.shape, dtype=bool)
        for n in range(max_iter):
            r = np.sqrt(x * x + y * y + z * z)
            newly = (r > bailout) & ~escaped
            if np.any(newly):
                with np.errstate(divide="ignore", invalid="ignore"):
                    smooth = n - np.log2(np.log(r) / math.log(bailout))
                value = np.where(newly, np.clip(smooth / max_iter, 0.0, 1.0), value)
                escaped |= newly
            if np.all(escaped):
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                safe_r = np.where(r > 0, r, 1.0)
                theta = np.arccos(np.clip(z / safe_r, -1.0, 1.0))
                phi = np.arctan2(y, x)
            rp = np.where(escaped, 0.0, r**power)
            x = np.where(escaped, x, rp * np.sin(theta * power) * np.cos(phi * power) + cx)
            y = np.where(escaped, y, rp * np.sin(theta * power) * np.sin(phi * power) + cy)
            z = np.where(escaped, z, rp * np.cos(theta * power) + cz)
        return value

    return generate


def mandelbulb_source(size, chunk_size, element_type: ElementType = ElementType(Scalar.F32),
                      embedding=None) -> OperatorNode:
    gen = mandelbulb_generator(size)
    return source_procedural(
        gen, "mandelbulb", size, chunk_size, element_type, embedding,
        params={"power": 8, "bailout": 2.0, "max_iter": 8},
    )
