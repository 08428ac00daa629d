/**
 * viewer.ts
 *
 * The interactive controller: owns the connection, one view session, the
 * decoded tile cache, and the schedulers.  Interactions mutate local view
 * state immediately; the matching parameter update is debounced, and the
 * returned generation invalidates older pixels, which stay on screen dimmed
 * until their replacements arrive (the cache is eventually consistent with
 * the latest parameters once the user pauses).
 */

import {
    ApiError,
    DatasetInfo,
    FetchLike,
    SessionStatus,
    StaleGenerationError,
    TileServiceClient,
    TileState,
} from './api.js';
import { Debouncer, FetchPool, FetchTask } from './scheduler.js';
import { composeFrame } from './render.js';
import {
    TileEntry,
    ViewKind,
    ViewState,
    defaultView,
    dragPan,
    paramsFor,
    phaseOf,
    resolveTile,
    setSliceDim,
    setSliceIndex,
    setTime,
    setTransfer,
    orbitDrag,
    tileGrid,
    tileKey,
    centerOutOrder,
    wheelZoom,
} from './state.js';
import { RgbaImage } from './surface.js';

/** Decodes a PNG into raw RGBA pixels (pngjs in tests, canvas in browsers). */
export type PngDecoder = (png: Uint8Array) => Promise<RgbaImage>;

export interface ViewerOptions {
    baseUrl: string;
    decode: PngDecoder;
    /** Canvas size in pixels; the server renders tiles against this frame. */
    frame?: [number, number];
    /** Must match the server's tile size (its --tile-size, default 512). */
    tileSize?: number;
    fetchImpl?: FetchLike;
    /** Minimum milliseconds between parameter updates while interacting. */
    debounceMs?: number;
    /** Maximum concurrent tile fetches. */
    maxInFlight?: number;
    /** Pause before re-polling a tile the server answered with a preview. */
    previewPollMs?: number;
    /** Called after every visible state change (repaint hook). */
    onChange?: () => void;
}

export type ConnectionPhase = 'idle' | 'connecting' | 'ready' | 'error';

/** One processed tile response, kept for diagnostics and tests. */
export interface TileEvent {
    x: number;
    y: number;
    generation: number;
    state: TileState;
    accepted: boolean;
}

const EVENT_LOG_LIMIT = 4096;

export class Viewer {
    readonly client: TileServiceClient;
    readonly frame: [number, number];
    readonly tileSize: number;

    connection: ConnectionPhase = 'idle';
    connectionError: string | null = null;
    datasets: DatasetInfo[] = [];
    view: ViewState | null = null;
    session: string | null = null;

    readonly tiles = new Map<string, TileEntry>();
    readonly tileEvents: TileEvent[] = [];
    readonly errors: Array<{ context: string; message: string }> = [];

    private readonly decode: PngDecoder;
    private readonly debouncer: Debouncer;
    private readonly pool: FetchPool;
    private readonly onChange: (() => void) | null;
    private readonly previewPollMs: number;
    private readonly pollTimers = new Set<ReturnType<typeof setTimeout>>();
    private committing = false;
    private recommit = false;
    private pollSeq = 0;

    constructor(options: ViewerOptions) {
        this.client = new TileServiceClient(options.baseUrl, options.fetchImpl);
        this.frame = options.frame ?? [1024, 768];
        this.tileSize = options.tileSize ?? 512;
        this.decode = options.decode;
        this.debouncer = new Debouncer(options.debounceMs ?? 50);
        this.pool = new FetchPool(options.maxInFlight ?? 8);
        this.previewPollMs = options.previewPollMs ?? 100;
        this.onChange = options.onChange ?? null;
    }

    /** Lists datasets; leaves the viewer in 'ready' or 'error' state. */
    async connect(): Promise<void> {
        this.connection = 'connecting';
        this.connectionError = null;
        this.touch();
        try {
            this.datasets = await this.client.listDatasets();
            this.connection = 'ready';
        } catch (error) {
            this.connection = 'error';
            this.connectionError = error instanceof Error ? error.message : String(error);
        }
        this.touch();
    }

    /**
     * Opens a dataset in its default view (a 2-D image, a 3-D volume
     * rendering, or a 4-D slice at time 0) and starts fetching tiles.
     */
    async openDataset(id: string, overrides: { kind?: ViewKind } = {}): Promise<void> {
        const dataset = this.datasets.find((d) => d.id === id);
        if (dataset === undefined) throw new Error(`unknown dataset ${JSON.stringify(id)}`);
        let view = defaultView(dataset, this.frame);
        if (overrides.kind !== undefined) view = { ...view, kind: overrides.kind };
        const created = await this.client.createSession(id, view.kind, paramsFor(view));
        this.session = created.session;
        this.view = { ...view, generation: created.generation };
        this.tiles.clear();
        this.tileEvents.length = 0;
        this.touch();
        this.scheduleTiles();
    }

    // -- interactions -------------------------------------------------------

    /** Wheel zoom at a canvas position (volume views dolly instead). */
    zoomAt(factor: number, cursor: [number, number]): void {
        if (this.view) this.applyView(wheelZoom(this.view, factor, cursor));
    }

    /** Pointer drag in canvas pixels: pans flat views, orbits volumes. */
    dragBy(dx: number, dy: number): void {
        if (this.view) this.applyView(dragPan(this.view, dx, dy));
    }

    orbitBy(dxPx: number, dyPx: number): void {
        if (this.view) this.applyView(orbitDrag(this.view, dxPx, dyPx));
    }

    setSliceIndex(index: number): void {
        if (this.view) this.applyView(setSliceIndex(this.view, index));
    }

    setSliceDim(dim: number): void {
        if (this.view) this.applyView(setSliceDim(this.view, dim));
    }

    setTime(time: number): void {
        if (this.view) this.applyView(setTime(this.view, time));
    }

    setTransfer(lo: number, hi: number): void {
        if (this.view) this.applyView(setTransfer(this.view, lo, hi));
    }

    // -- output ---------------------------------------------------------------

    /** Composites the tile cache onto `target` (must match the frame size). */
    render(target: RgbaImage): void {
        const view = this.view;
        if (!view) throw new Error('no dataset open');
        if (target.width !== view.frame[0] || target.height !== view.frame[1]) {
            throw new Error(
                `target is ${target.width}x${target.height}, frame is ${view.frame[0]}x${view.frame[1]}`
            );
        }
        composeFrame(target, view.frame, view.generation, this.tileSize, (x, y) =>
            this.tiles.get(tileKey(x, y))
        );
    }

    /** True when every tile of the current generation is final. */
    settled(): boolean {
        const view = this.view;
        if (!view) return false;
        const [cols, rows] = tileGrid(view.frame, this.tileSize);
        for (let y = 0; y < rows; y++) {
            for (let x = 0; x < cols; x++) {
                if (phaseOf(this.tiles.get(tileKey(x, y)), view.generation) !== 'final') return false;
            }
        }
        return true;
    }

    /**
     * Waits until the cache is fully final for the current generation, i.e.
     * the screen has converged to the latest parameters.
     */
    async settle(timeoutMs = 30_000): Promise<void> {
        const deadline = Date.now() + timeoutMs;
        while (Date.now() < deadline) {
            if (this.errors.length > 0) {
                throw new Error(`viewer errors: ${this.errors.map((e) => `${e.context}: ${e.message}`).join('; ')}`);
            }
            if (!this.committing && !this.debouncer.pending() && this.settled()) return;
            await sleep(10);
        }
        throw new Error(`settle timed out after ${timeoutMs} ms (${this.describeTiles()})`);
    }

    async status(): Promise<SessionStatus> {
        if (!this.session) throw new Error('no session');
        return this.client.status(this.session);
    }

    /** Cancels pending work; in-flight fetches finish and are ignored. */
    dispose(): void {
        this.debouncer.cancel();
        for (const timer of this.pollTimers) clearTimeout(timer);
        this.pollTimers.clear();
        this.pool.replace([]);
        this.session = null;
        this.view = null;
    }

    // -- internals ------------------------------------------------------------

    private touch(): void {
        this.onChange?.();
    }

    private applyView(next: ViewState): void {
        if (!this.view || next === this.view) return;
        this.view = next;
        this.touch();
        this.debouncer.schedule(() => void this.commitParams());
    }

    /**
     * Pushes the latest parameters to the server.  Updates are serialized:
     * overlapping requests could be applied out of order server-side, which
     * would pair the newest generation with outdated parameters.
     */
    private async commitParams(): Promise<void> {
        if (this.committing) {
            this.recommit = true;
            return;
        }
        this.committing = true;
        try {
            do {
                this.recommit = false;
                const view = this.view;
                const session = this.session;
                if (!view || !session) return;
                let generation: number;
                try {
                    generation = await this.client.updateParams(session, paramsFor(view));
                } catch (error) {
                    this.noteError('params', error);
                    return;
                }
                if (!this.view || this.session !== session) return;
                if (generation > this.view.generation) {
                    this.view = { ...this.view, generation };
                    this.touch();
                    this.scheduleTiles();
                }
            } while (this.recommit);
        } finally {
            this.committing = false;
        }
    }

    /** Queues a centre-out fetch round for the current generation. */
    private scheduleTiles(): void {
        const view = this.view;
        if (!view || !this.session) return;
        const [cols, rows] = tileGrid(view.frame, this.tileSize);
        const tasks = centerOutOrder(cols, rows).map(([x, y]) => this.tileTask(x, y, view.generation));
        this.pool.replace(tasks);
    }

    private tileTask(x: number, y: number, generation: number): FetchTask {
        return {
            key: `${generation}:${x},${y}:${this.pollSeq++}`,
            run: async () => {
                const session = this.session;
                if (!session || !this.view || this.view.generation !== generation) return;
                let response;
                try {
                    response = await this.client.fetchTile(session, x, y, generation);
                } catch (error) {
                    if (error instanceof StaleGenerationError) return; // a newer commit refetches
                    this.noteError(`tile ${x},${y}`, error);
                    return;
                }
                if (!this.view || this.session !== session) return;
                let image: RgbaImage;
                try {
                    image = await this.decode(response.png);
                } catch (error) {
                    this.noteError(`decode ${x},${y}`, error);
                    return;
                }
                // Drop pixels from the future: generations the view has not
                // acknowledged yet must never reach the screen.
                if (response.generation > this.view.generation) return;
                const key = tileKey(x, y);
                const stored = this.tiles.get(key);
                const incoming: TileEntry = { generation: response.generation, state: response.state, image };
                const kept = resolveTile(stored, incoming);
                const accepted = kept === incoming;
                if (accepted) {
                    this.tiles.set(key, incoming);
                    this.touch();
                }
                this.logEvent({ x, y, generation: response.generation, state: response.state, accepted });
                // A preview means the server is still refining: poll again
                // after a pause (the server answers buffered previews
                // immediately, so an eager loop would just spin).
                if (response.state === 'preview' && this.view.generation === generation) {
                    this.schedulePoll(x, y, generation);
                }
            },
        };
    }

    private schedulePoll(x: number, y: number, generation: number): void {
        const timer = setTimeout(() => {
            this.pollTimers.delete(timer);
            if (this.view?.generation === generation) this.pool.add(this.tileTask(x, y, generation));
        }, this.previewPollMs);
        this.pollTimers.add(timer);
    }

    private logEvent(event: TileEvent): void {
        this.tileEvents.push(event);
        if (this.tileEvents.length > EVENT_LOG_LIMIT) this.tileEvents.shift();
    }

    private noteError(context: string, error: unknown): void {
        const message =
            error instanceof ApiError || error instanceof Error ? error.message : String(error);
        this.errors.push({ context, message });
        this.touch();
    }

    private describeTiles(): string {
        const view = this.view;
        if (!view) return 'no view';
        const [cols, rows] = tileGrid(view.frame, this.tileSize);
        const counts: Record<string, number> = { missing: 0, stale: 0, preview: 0, final: 0 };
        for (let y = 0; y < rows; y++) {
            for (let x = 0; x < cols; x++) {
                counts[phaseOf(this.tiles.get(tileKey(x, y)), view.generation)]++;
            }
        }
        return `generation ${view.generation}: ${JSON.stringify(counts)}`;
    }
}

function sleep(ms: number): Promise<void> {
    return new Promise((resolve) => setTimeout(resolve, ms));
}
