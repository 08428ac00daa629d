/**
 * api.ts
 *
 * Typed client for the tile service HTTP API: dataset discovery, view
 * sessions, parameter updates (which bump the session generation) and tile
 * fetches.  The transport is injectable so tests can script a server; the
 * default is the platform fetch.
 */

/** One dataset row as reported by GET /datasets. */
export interface DatasetInfo {
    id: string;
    dims: number;
    size: number[];
    levels: number;
    element_type: string;
}

/** Tile freshness as reported by the server in the X-State header. */
export type TileState = 'preview' | 'final';

/** A tile response: PNG bytes plus the generation they were rendered under. */
export interface TileResponse {
    state: TileState;
    generation: number;
    png: Uint8Array;
}

/** Progress summary from GET /sessions/{id}/status. */
export interface SessionStatus {
    generation: number;
    tiles: { total: number; final: number };
    bytes_read: number;
    occupancy: Record<string, number>;
}

export interface FetchResponseLike {
    ok: boolean;
    status: number;
    headers: { get(name: string): string | null };
    json(): Promise<unknown>;
    text(): Promise<string>;
    arrayBuffer(): Promise<ArrayBuffer>;
}

/** The slice of the fetch contract the client relies on. */
export type FetchLike = (
    url: string,
    init?: { method?: string; headers?: Record<string, string>; body?: string }
) => Promise<FetchResponseLike>;

/** Server rejected a request (any non-2xx other than a stale-generation 409). */
export class ApiError extends Error {
    constructor(readonly status: number, message: string) {
        super(`HTTP ${status}: ${message}`);
        this.name = 'ApiError';
    }
}

/**
 * The generation in a tile request is no longer the session's current one.
 * Carries the server's current generation so callers can resynchronize.
 */
export class StaleGenerationError extends Error {
    constructor(readonly currentGeneration: number) {
        super(`stale generation, server is at ${currentGeneration}`);
        this.name = 'StaleGenerationError';
    }
}

async function errorDetail(response: FetchResponseLike): Promise<string> {
    try {
        const body = (await response.json()) as { detail?: unknown };
        if (body && body.detail !== undefined) return JSON.stringify(body.detail);
    } catch {
        // fall through to the raw text
    }
    try {
        return await response.text();
    } catch {
        return '(no body)';
    }
}

export class TileServiceClient {
    private readonly fetchImpl: FetchLike;

    constructor(readonly baseUrl: string, fetchImpl?: FetchLike) {
        this.baseUrl = baseUrl.replace(/\/$/, '');
        this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
    }

    /** Lists the datasets the server exposes. */
    async listDatasets(): Promise<DatasetInfo[]> {
        const response = await this.fetchImpl(`${this.baseUrl}/datasets`);
        if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
        return (await response.json()) as DatasetInfo[];
    }

    /** Creates a view session; returns its id (generation starts at 0). */
    async createSession(
        dataset: string,
        kind: string,
        params: Record<string, unknown>
    ): Promise<{ session: string; generation: number }> {
        const response = await this.fetchImpl(`${this.baseUrl}/sessions`, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({ dataset, kind, params }),
        });
        if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
        return (await response.json()) as { session: string; generation: number };
    }

    /** Replaces the session parameters; returns the bumped generation. */
    async updateParams(session: string, params: Record<string, unknown>): Promise<number> {
        const response = await this.fetchImpl(`${this.baseUrl}/sessions/${session}/params`, {
            method: 'PUT',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify(params),
        });
        if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
        const body = (await response.json()) as { generation: number };
        return body.generation;
    }

    /**
     * Fetches one tile of the given generation.  Blocks server-side until at
     * least a preview exists; throws StaleGenerationError when the session
     * has already moved past `generation`.
     */
    async fetchTile(session: string, x: number, y: number, generation: number): Promise<TileResponse> {
        const url = `${this.baseUrl}/sessions/${session}/tile?x=${x}&y=${y}&gen=${generation}`;
        const response = await this.fetchImpl(url);
        if (response.status === 409) {
            const header = response.headers.get('X-Generation');
            if (header !== null) throw new StaleGenerationError(Number(header));
            const body = (await response.json()) as { detail?: { current_generation?: number } };
            throw new StaleGenerationError(body.detail?.current_generation ?? generation + 1);
        }
        if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
        const state = (response.headers.get('X-State') ?? 'final') as TileState;
        const served = Number(response.headers.get('X-Generation') ?? generation);
        return { state, generation: served, png: new Uint8Array(await response.arrayBuffer()) };
    }

    /** Tile progress and engine occupancy for one session. */
    async status(session: string): Promise<SessionStatus> {
        const response = await this.fetchImpl(`${this.baseUrl}/sessions/${session}/status`);
        if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
        return (await response.json()) as SessionStatus;
    }
}
