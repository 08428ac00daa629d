/**
 * helpers.ts
 *
 * Shared test utilities: PNG encode/decode via pngjs, and an in-memory mock
 * of the tile service that speaks the same HTTP surface through a FetchLike,
 * with hooks to script tile states, delay responses, and inspect traffic.
 */

import { PNG } from 'pngjs';
import { DatasetInfo, FetchLike, FetchResponseLike, TileState } from '../src/api';
import { RgbaImage } from '../src/surface';

export function decodePng(bytes: Uint8Array): RgbaImage {
    const png = PNG.sync.read(Buffer.from(bytes));
    return {
        width: png.width,
        height: png.height,
        data: new Uint8ClampedArray(png.data.buffer.slice(png.data.byteOffset, png.data.byteOffset + png.data.length)),
    };
}

/** Async wrapper matching the viewer's PngDecoder signature. */
export async function decodePngAsync(bytes: Uint8Array): Promise<RgbaImage> {
    return decodePng(bytes);
}

export function encodePng(img: RgbaImage): Uint8Array {
    const png = new PNG({ width: img.width, height: img.height });
    png.data = Buffer.from(img.data.buffer.slice(img.data.byteOffset, img.data.byteOffset + img.data.length));
    return new Uint8Array(PNG.sync.write(png));
}

export function solidImage(width: number, height: number, rgba: [number, number, number, number]): RgbaImage {
    const data = new Uint8ClampedArray(width * height * 4);
    for (let i = 0; i < data.length; i += 4) {
        data[i] = rgba[0];
        data[i + 1] = rgba[1];
        data[i + 2] = rgba[2];
        data[i + 3] = rgba[3];
    }
    return { width, height, data };
}

/** Deterministic per-tile color so tests can recognize tile pixels. */
export function mockTileColor(generation: number, x: number, y: number): [number, number, number, number] {
    return [(x * 37 + generation * 83) % 256, (y * 53 + 11) % 256, (generation * 49 + 5) % 256, 255];
}

function makeResponse(status: number, bytes: Buffer, headers: Record<string, string>): FetchResponseLike {
    const map = new Map(Object.entries(headers).map(([k, v]) => [k.toLowerCase(), v]));
    return {
        ok: status >= 200 && status < 300,
        status,
        headers: { get: (name: string) => map.get(name.toLowerCase()) ?? null },
        json: async () => JSON.parse(bytes.toString('utf8')),
        text: async () => bytes.toString('utf8'),
        arrayBuffer: async () => {
            const copy = new ArrayBuffer(bytes.byteLength);
            new Uint8Array(copy).set(bytes);
            return copy;
        },
    };
}

function jsonResponse(status: number, body: unknown, headers: Record<string, string> = {}): FetchResponseLike {
    return makeResponse(status, Buffer.from(JSON.stringify(body)), {
        'content-type': 'application/json',
        ...headers,
    });
}

export interface MockTileRequest {
    session: string;
    generation: number;
    x: number;
    y: number;
    poll: number; // 1-based count of requests for this (session, generation, tile)
}

export interface MockTile {
    state: TileState;
    image: RgbaImage;
}

interface MockSession {
    dataset: DatasetInfo;
    kind: string;
    params: Record<string, unknown>;
    generation: number;
}

export const MOCK_DATASETS: DatasetInfo[] = [
    { id: 'plasma', dims: 2, size: [256, 256], levels: 2, element_type: 'u8' },
    { id: 'skull', dims: 3, size: [64, 64, 64], levels: 3, element_type: 'f32' },
];

/**
 * In-memory tile service double.  Mirrors the real wire contract: sessions
 * with generations, 409 + X-Generation on stale tile requests, PNG tiles
 * with X-State / X-Generation headers.
 */
export class MockServer {
    readonly log: string[] = [];
    readonly tileRequests: MockTileRequest[] = [];
    readonly sessions = new Map<string, MockSession>();

    /** Overrides tile content/state; default is a solid final tile. */
    tileScript: ((request: MockTileRequest) => MockTile) | null = null;
    /** Awaited before a tile request is processed (gate for race tests). */
    tileDelay: ((request: Omit<MockTileRequest, 'poll'>) => Promise<void>) | null = null;
    /** When true every request rejects like an unreachable host. */
    unreachable = false;

    private sessionCounter = 0;
    private readonly polls = new Map<string, number>();

    constructor(readonly tileSize = 64, readonly datasets: DatasetInfo[] = MOCK_DATASETS) {}

    readonly fetch: FetchLike = async (url, init) => {
        const method = init?.method ?? 'GET';
        const parsed = new URL(url);
        this.log.push(`${method} ${parsed.pathname}${parsed.search}`);
        if (this.unreachable) throw new TypeError('fetch failed: connection refused');
        const parts = parsed.pathname.split('/').filter((p) => p.length > 0);

        if (method === 'GET' && parsed.pathname === '/datasets') {
            return jsonResponse(200, this.datasets);
        }
        if (method === 'POST' && parsed.pathname === '/sessions') {
            const body = JSON.parse(init?.body ?? '{}') as {
                dataset?: string;
                kind?: string;
                params?: Record<string, unknown>;
            };
            const dataset = this.datasets.find((d) => d.id === body.dataset);
            if (!dataset) return jsonResponse(404, { detail: `unknown dataset ${body.dataset}` });
            const sid = `s${this.sessionCounter++}`;
            this.sessions.set(sid, { dataset, kind: body.kind ?? '', params: body.params ?? {}, generation: 0 });
            return jsonResponse(200, { session: sid, generation: 0 });
        }
        if (parts.length === 3 && parts[0] === 'sessions') {
            const session = this.sessions.get(parts[1]);
            if (!session) return jsonResponse(404, { detail: `unknown session ${parts[1]}` });
            if (method === 'PUT' && parts[2] === 'params') {
                session.params = JSON.parse(init?.body ?? '{}') as Record<string, unknown>;
                session.generation += 1;
                return jsonResponse(200, { generation: session.generation });
            }
            if (method === 'GET' && parts[2] === 'tile') {
                return this.tileResponse(parts[1], session, parsed);
            }
            if (method === 'GET' && parts[2] === 'status') {
                const frame = (session.params.frame as [number, number]) ?? [this.tileSize, this.tileSize];
                const cols = Math.ceil(frame[0] / this.tileSize);
                const rows = Math.ceil(frame[1] / this.tileSize);
                return jsonResponse(200, {
                    generation: session.generation,
                    tiles: { total: cols * rows, final: -1 },
                    bytes_read: 0,
                    occupancy: { ram: 0 },
                });
            }
        }
        return jsonResponse(404, { detail: `no route for ${method} ${parsed.pathname}` });
    };

    private async tileResponse(sid: string, session: MockSession, parsed: URL): Promise<FetchResponseLike> {
        const x = Number(parsed.searchParams.get('x'));
        const y = Number(parsed.searchParams.get('y'));
        const gen = parsed.searchParams.get('gen') !== null ? Number(parsed.searchParams.get('gen')) : session.generation;
        if (this.tileDelay) await this.tileDelay({ session: sid, generation: gen, x, y });
        if (gen !== session.generation) {
            return jsonResponse(
                409,
                { detail: { current_generation: session.generation } },
                { 'X-Generation': String(session.generation) }
            );
        }
        const pollKey = `${sid}:${gen}:${x},${y}`;
        const poll = (this.polls.get(pollKey) ?? 0) + 1;
        this.polls.set(pollKey, poll);
        const request: MockTileRequest = { session: sid, generation: gen, x, y, poll };
        this.tileRequests.push(request);
        const tile: MockTile = this.tileScript
            ? this.tileScript(request)
            : { state: 'final', image: solidImage(this.tileSize, this.tileSize, mockTileColor(gen, x, y)) };
        return makeResponse(200, Buffer.from(encodePng(tile.image)), {
            'content-type': 'image/png',
            'X-State': tile.state,
            'X-Generation': String(gen),
        });
    }
}

export function sleep(ms: number): Promise<void> {
    return new Promise((resolve) => setTimeout(resolve, ms));
}
