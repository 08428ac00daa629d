export {
    ApiError,
    StaleGenerationError,
    TileServiceClient,
    type DatasetInfo,
    type FetchLike,
    type FetchResponseLike,
    type SessionStatus,
    type TileResponse,
    type TileState,
} from './api.js';
export {
    MAX_ZOOM,
    MIN_ZOOM,
    centerOutOrder,
    defaultView,
    dragPan,
    orbitDrag,
    orbitEye,
    paramsFor,
    phaseOf,
    resolveTile,
    setSliceDim,
    setSliceIndex,
    setTime,
    setTransfer,
    spatialSize,
    tileGrid,
    tileKey,
    wheelZoom,
    type OrbitState,
    type TileEntry,
    type TilePhase,
    type ViewKind,
    type ViewState,
} from './state.js';
export { Debouncer, FetchPool, type FetchTask } from './scheduler.js';
export {
    blitImage,
    cloneImage,
    createImage,
    drawCheckerboard,
    fillRect,
    imagesEqual,
    type BlitOptions,
    type RgbaImage,
} from './surface.js';
export { PREVIEW_DIM, STALE_DIM, composeFrame, type TileLookup } from './render.js';
export { Viewer, type ConnectionPhase, type PngDecoder, type TileEvent, type ViewerOptions } from './viewer.js';
export { decodeWithCanvas, mountViewer, type MountOptions } from './dom.js';
