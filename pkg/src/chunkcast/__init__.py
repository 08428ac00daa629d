"""Out-of-core chunked tensor compute with bounded memory.

Tensors are described lazily as operator graphs over fixed-size chunks.
A pull-based engine materializes only the chunks a consumer asks for,
keeping RAM, accelerator, and disk stores within configured budgets and
spilling or recomputing as needed.
"""

from .model import (
    CoordinateError,
    Scalar,
    ElementType,
    U8,
    I16,
    U16,
    F32,
    F64,
    RGBA_U8,
    RGBA_F32,
    TensorMetaData,
    EmbeddingData,
    ChunkCoords,
    global_to_chunk,
    OperatorId,
    ChunkId,
    operator_id,
    chunk_id,
)
from .graph import OperatorNode, describe, ids_of_description
from .store import (
    Location,
    RAM,
    DISK,
    ChunkState,
    StoreConfig,
    StoreGroup,
    StoreError,
    AllocationTooLarge,
    ReclamationNeeded,
    quantize_size,
)
from .engine import (
    Engine,
    EngineConfig,
    EngineError,
    GraphDisciplineError,
    MemoryBudgetExhausted,
    TaskContext,
    ChunkRequest,
    WorkerJob,
    AllocationRequest,
    BarrierRequest,
    ReclamationRequest,
    InternalEvent,
    PinnedChunk,
)
from .ops import (
    OperatorError,
    Expr,
    fusion_disabled,
    pointwise,
    add,
    sub,
    mul,
    div,
    minimum,
    maximum,
    absolute,
    cast,
    cast_array,
    source_from_array,
    source_procedural,
    constant,
    mandelbulb_source,
    separable_conv,
    slice_node,
    downsample_mean,
    assemble_region,
    LodPyramid,
    build_lod,
    single_level_lod,
    procedural_lod,
    build_const_chunk_table,
    sentinel_for,
    SMOOTHING_KERNEL,
)
from .tensorfile import (
    TensorFileError,
    ChunkedFileHeader,
    read_header,
    import_raw,
    open_chunked,
    save_tensor,
    PyramidLevel,
    PyramidManifest,
    save_manifest,
    load_manifest,
    build_lod_offline,
)
from .pagetable import (
    PageTableHierarchy,
    FixedHashTable,
    encode_report_key,
    decode_report_key,
    TAG_CHUNK_USE,
    TAG_PAGE_USE,
    TAG_CHUNK_REQUEST,
)
from .render import (
    CameraState,
    RaycasterConfig,
    TransferFunction,
    camera_for_volume,
    view_projection,
    entry_exit_points,
    grey_ramp_tf,
    grey_ramp,
    raycast,
    render_frame,
    slice_view,
    image_view,
)

__version__ = "0.1.0"

__all__ = [
    "CoordinateError",
    "Scalar",
    "ElementType",
    "U8",
    "I16",
    "U16",
    "F32",
    "F64",
    "RGBA_U8",
    "RGBA_F32",
    "TensorMetaData",
    "EmbeddingData",
    "ChunkCoords",
    "global_to_chunk",
    "OperatorId",
    "ChunkId",
    "operator_id",
    "chunk_id",
    "OperatorNode",
    "describe",
    "ids_of_description",
    "Location",
    "RAM",
    "DISK",
    "ChunkState",
    "StoreConfig",
    "StoreGroup",
    "StoreError",
    "AllocationTooLarge",
    "ReclamationNeeded",
    "quantize_size",
    "Engine",
    "EngineConfig",
    "EngineError",
    "GraphDisciplineError",
    "MemoryBudgetExhausted",
    "TaskContext",
    "ChunkRequest",
    "WorkerJob",
    "AllocationRequest",
    "BarrierRequest",
    "ReclamationRequest",
    "InternalEvent",
    "PinnedChunk",
    "OperatorError",
    "Expr",
    "fusion_disabled",
    "pointwise",
    "add",
    "sub",
    "mul",
    "div",
    "minimum",
    "maximum",
    "absolute",
    "cast",
    "cast_array",
    "source_from_array",
    "source_procedural",
    "constant",
    "mandelbulb_source",
    "separable_conv",
    "slice_node",
    "downsample_mean",
    "assemble_region",
    "LodPyramid",
    "build_lod",
    "single_level_lod",
    "procedural_lod",
    "build_const_chunk_table",
    "sentinel_for",
    "SMOOTHING_KERNEL",
    "TensorFileError",
    "ChunkedFileHeader",
    "read_header",
    "import_raw",
    "open_chunked",
    "save_tensor",
    "PyramidLevel",
    "PyramidManifest",
    "save_manifest",
    "load_manifest",
    "build_lod_offline",
    "PageTableHierarchy",
    "FixedHashTable",
    "encode_report_key",
    "decode_report_key",
    "TAG_CHUNK_USE",
    "TAG_PAGE_USE",
    "TAG_CHUNK_REQUEST",
    "CameraState",
    "RaycasterConfig",
    "TransferFunction",
    "camera_for_volume",
    "view_projection",
    "entry_exit_points",
    "grey_ramp_tf",
    "grey_ramp",
    "raycast",
    "render_frame",
    "slice_view",
    "image_view",
]
