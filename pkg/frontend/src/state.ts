/**
 * state.ts
 *
 * Pure view state and reducers: pan/zoom for image and slice views, an
 * orbit camera for volume views, slice and time indices, and the freshness
 * rules that decide which tile pixels may be displayed.
 *
 * Coordinate contract shared with the server: `pan` is the full-resolution
 * element coordinate (as [x, y]) shown at canvas pixel (0, 0), and `zoom` is
 * screen pixels per full-resolution element, so canvas pixel p samples the
 * element floor((p + 0.5) / zoom + pan) on each axis.
 */

import { DatasetInfo, TileState } from './api.js';
import { RgbaImage } from './surface.js';

export type ViewKind = 'image' | 'slice' | 'raycast';

export const MIN_ZOOM = 1 / 64;
export const MAX_ZOOM = 256;
const MAX_ELEVATION_DEG = 85; // keep the view direction away from the up axis

/** Orbit camera: spherical position around a fixed target, up = +z. */
export interface OrbitState {
    azimuthDeg: number;
    elevationDeg: number;
    distance: number;
    target: [number, number, number];
}

export interface ViewState {
    dataset: DatasetInfo;
    kind: ViewKind;
    frame: [number, number]; // canvas [width, height] in pixels
    generation: number; // last generation acknowledged by the server
    pan: [number, number];
    zoom: number;
    sliceDim: number; // 0..2 over the spatial axes
    sliceIndex: number;
    time: number | null; // first axis of a 4-D dataset
    tf: [number, number] | null; // null lets the server pick its default
    cameraAuto: boolean; // server-side framing until the first orbit drag
    orbit: OrbitState;
    fov: number;
    compositing: 'dvr' | 'mop';
}

/** Spatial extent of a dataset: for 4-D data the first axis is time. */
export function spatialSize(dataset: DatasetInfo): number[] {
    return dataset.dims === 4 ? dataset.size.slice(1) : dataset.size.slice();
}

function defaultOrbit(dataset: DatasetInfo, fov: number): OrbitState {
    const size = spatialSize(dataset);
    const radius = 0.5 * Math.hypot(...size);
    return {
        azimuthDeg: 45,
        elevationDeg: 35,
        distance: radius / Math.tan(((fov / 2) * Math.PI) / 180),
        target: [size[0] / 2, size[1] / 2, size[2] / 2],
    };
}

/**
 * The view a dataset opens with: 2-D data as a pannable image, 3-D data as
 * an auto-framed volume rendering, 4-D data as a mid slice at time 0.
 */
export function defaultView(dataset: DatasetInfo, frame: [number, number]): ViewState {
    const kind: ViewKind = dataset.dims === 2 ? 'image' : dataset.dims === 3 ? 'raycast' : 'slice';
    const spatial = spatialSize(dataset);
    const fov = 45;
    return {
        dataset,
        kind,
        frame: [frame[0], frame[1]],
        generation: 0,
        pan: [0, 0],
        zoom: 1,
        sliceDim: 0,
        sliceIndex: dataset.dims >= 3 ? Math.floor(spatial[0] / 2) : 0,
        time: dataset.dims === 4 ? 0 : null,
        tf: null,
        cameraAuto: true,
        orbit: defaultOrbit(dataset, fov),
        fov,
        compositing: 'dvr',
    };
}

function clamp(value: number, lo: number, hi: number): number {
    return Math.min(hi, Math.max(lo, value));
}

/**
 * Zooms by `factor` keeping the content under `cursor` (canvas pixels)
 * fixed; on a volume view the camera dollies instead.
 */
export function wheelZoom(view: ViewState, factor: number, cursor: [number, number]): ViewState {
    if (view.kind === 'raycast') {
        const distance = clamp(view.orbit.distance / factor, 1e-3, 1e9);
        return { ...view, cameraAuto: false, orbit: { ...view.orbit, distance } };
    }
    const zoom = clamp(view.zoom * factor, MIN_ZOOM, MAX_ZOOM);
    if (zoom === view.zoom) return view;
    // (c + 0.5) / zoom + pan is the element under the cursor; keep it fixed.
    const pan: [number, number] = [
        view.pan[0] + (cursor[0] + 0.5) * (1 / view.zoom - 1 / zoom),
        view.pan[1] + (cursor[1] + 0.5) * (1 / view.zoom - 1 / zoom),
    ];
    return { ...view, zoom, pan };
}

/** Drags the content by (dx, dy) canvas pixels (the content follows). */
export function dragPan(view: ViewState, dx: number, dy: number): ViewState {
    if (view.kind === 'raycast') return orbitDrag(view, dx, dy);
    return { ...view, pan: [view.pan[0] - dx / view.zoom, view.pan[1] - dy / view.zoom] };
}

/** Orbits the camera: horizontal drag spins, vertical drag tilts (clamped). */
export function orbitDrag(view: ViewState, dxPx: number, dyPx: number): ViewState {
    const azimuthDeg = view.orbit.azimuthDeg - dxPx * 0.4;
    const elevationDeg = clamp(view.orbit.elevationDeg + dyPx * 0.4, -MAX_ELEVATION_DEG, MAX_ELEVATION_DEG);
    return { ...view, cameraAuto: false, orbit: { ...view.orbit, azimuthDeg, elevationDeg } };
}

export function setSliceIndex(view: ViewState, index: number): ViewState {
    const axis = spatialSize(view.dataset);
    return { ...view, sliceIndex: clamp(Math.round(index), 0, axis[view.sliceDim] - 1) };
}

export function setSliceDim(view: ViewState, dim: number): ViewState {
    const spatial = spatialSize(view.dataset);
    const sliceDim = clamp(Math.round(dim), 0, 2);
    return { ...view, sliceDim, sliceIndex: Math.min(view.sliceIndex, spatial[sliceDim] - 1) };
}

export function setTime(view: ViewState, time: number): ViewState {
    if (view.dataset.dims !== 4) return view;
    return { ...view, time: clamp(Math.round(time), 0, view.dataset.size[0] - 1) };
}

export function setTransfer(view: ViewState, lo: number, hi: number): ViewState {
    return { ...view, tf: [lo, hi] };
}

/** Camera eye position for the current orbit state. */
export function orbitEye(orbit: OrbitState): [number, number, number] {
    const az = (orbit.azimuthDeg * Math.PI) / 180;
    const el = (orbit.elevationDeg * Math.PI) / 180;
    return [
        orbit.target[0] + orbit.distance * Math.cos(el) * Math.cos(az),
        orbit.target[1] + orbit.distance * Math.cos(el) * Math.sin(az),
        orbit.target[2] + orbit.distance * Math.sin(el),
    ];
}

/** Serializes the view into the session parameter object the server expects. */
export function paramsFor(view: ViewState): Record<string, unknown> {
    const params: Record<string, unknown> = { frame: [view.frame[0], view.frame[1]] };
    if (view.tf !== null) params.tf = view.tf;
    if (view.kind === 'image') {
        params.pan = view.pan;
        params.zoom = view.zoom;
        return params;
    }
    if (view.time !== null) params.time = view.time;
    if (view.kind === 'slice') {
        params.dim = view.sliceDim;
        params.index = view.sliceIndex;
        params.pan = view.pan;
        params.zoom = view.zoom;
        return params;
    }
    params.fov = view.fov;
    params.compositing = view.compositing;
    params.camera = view.cameraAuto
        ? 'auto'
        : { eye: orbitEye(view.orbit), look_at: view.orbit.target, up: [0, 0, 1] };
    return params;
}

// ---------------------------------------------------------------------------
// tile bookkeeping

/** Decoded pixels of one tile plus the generation they belong to. */
export interface TileEntry {
    generation: number;
    state: TileState;
    image: RgbaImage;
}

/** What the compositor should do with a tile slot. */
export type TilePhase = 'missing' | 'stale' | 'preview' | 'final';

export function tileKey(x: number, y: number): string {
    return `${x},${y}`;
}

/** Tile grid (columns, rows) covering a frame. */
export function tileGrid(frame: [number, number], tileSize: number): [number, number] {
    return [Math.ceil(frame[0] / tileSize), Math.ceil(frame[1] / tileSize)];
}

/**
 * Tile coordinates ordered centre first, corners last, so the pixels the
 * user is looking at refine before the periphery.  Deterministic: ties
 * break in row-major order.
 */
export function centerOutOrder(cols: number, rows: number): Array<[number, number]> {
    const order: Array<[number, number]> = [];
    for (let y = 0; y < rows; y++) {
        for (let x = 0; x < cols; x++) order.push([x, y]);
    }
    const rank = (x: number, y: number) => {
        const dx = x + 0.5 - cols / 2;
        const dy = y + 0.5 - rows / 2;
        return dx * dx + dy * dy;
    };
    return order
        .map(([x, y], i) => ({ x, y, i, d: rank(x, y) }))
        .sort((a, b) => a.d - b.d || a.i - b.i)
        .map(({ x, y }) => [x, y]);
}

/**
 * Freshness resolution: which of the stored and the incoming tile survives.
 * Pixels of a newer generation are never replaced by older ones, and a
 * final tile is never demoted within its generation.
 */
export function resolveTile(stored: TileEntry | undefined, incoming: TileEntry): TileEntry {
    if (stored === undefined) return incoming;
    if (incoming.generation < stored.generation) return stored;
    if (incoming.generation > stored.generation) return incoming;
    return stored.state === 'final' ? stored : incoming;
}

/** How a stored tile relates to the view's current generation. */
export function phaseOf(entry: TileEntry | undefined, generation: number): TilePhase {
    if (entry === undefined) return 'missing';
    if (entry.generation !== generation) return 'stale';
    return entry.state === 'preview' ? 'preview' : 'final';
}
