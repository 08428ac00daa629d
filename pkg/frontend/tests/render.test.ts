import { describe, expect, it } from 'vitest';
import { PREVIEW_DIM, STALE_DIM, composeFrame } from '../src/render';
import { TileEntry, tileKey } from '../src/state';
import { CHECKER_DARK, CHECKER_LIGHT, createImage, imagesEqual, RgbaImage } from '../src/surface';
import { solidImage } from './helpers';

const TILE = 64;

function pixel(img: RgbaImage, x: number, y: number): number[] {
    const offset = (y * img.width + x) * 4;
    return Array.from(img.data.slice(offset, offset + 4));
}

function compose(frame: [number, number], generation: number, tiles: Map<string, TileEntry>): RgbaImage {
    const target = createImage(frame[0], frame[1]);
    composeFrame(target, frame, generation, TILE, (x, y) => tiles.get(tileKey(x, y)));
    return target;
}

function dimmed(color: number[], dim: number): number[] {
    return [Math.round(color[0] * dim), Math.round(color[1] * dim), Math.round(color[2] * dim), color[3]];
}

describe('composeFrame', () => {
    it('draws a checkerboard placeholder where no tile arrived yet', () => {
        const out = compose([128, 128], 0, new Map());
        expect(pixel(out, 0, 0)).toEqual(Array.from(CHECKER_LIGHT));
        expect(pixel(out, 16, 0)).toEqual(Array.from(CHECKER_DARK));
        expect(pixel(out, 16, 16)).toEqual(Array.from(CHECKER_LIGHT));
        expect(pixel(out, 127, 127)).toHaveLength(4);
    });

    it('anchors the placeholder pattern globally so tiles align seamlessly', () => {
        const out = compose([128, 128], 0, new Map());
        // Across the tile boundary at x = 64 the global 16px pattern holds.
        for (const [x, y] of [[48, 0], [63, 0], [64, 0], [65, 0], [80, 16], [127, 127]]) {
            const light = (Math.floor(x / 16) & 1) === (Math.floor(y / 16) & 1);
            expect(pixel(out, x, y), `pixel ${x},${y}`).toEqual(Array.from(light ? CHECKER_LIGHT : CHECKER_DARK));
        }
    });

    it('copies final tiles of the current generation verbatim', () => {
        const tiles = new Map<string, TileEntry>();
        const color: [number, number, number, number] = [10, 200, 30, 255];
        tiles.set(tileKey(0, 0), { generation: 1, state: 'final', image: solidImage(TILE, TILE, color) });
        const out = compose([128, 128], 1, tiles);
        expect(pixel(out, 0, 0)).toEqual(Array.from(color));
        expect(pixel(out, 63, 63)).toEqual(Array.from(color));
        expect(pixel(out, 64, 0)).toEqual(Array.from(CHECKER_LIGHT)); // neighbours still missing
    });

    it('keeps stale pixels visible but dimmed until replaced', () => {
        const tiles = new Map<string, TileEntry>();
        const color: [number, number, number, number] = [100, 150, 250, 255];
        tiles.set(tileKey(0, 0), { generation: 0, state: 'final', image: solidImage(TILE, TILE, color) });
        const out = compose([128, 128], 1, tiles);
        expect(pixel(out, 10, 10)).toEqual(dimmed(Array.from(color), STALE_DIM));
    });

    it('marks previews of the current generation with a light dim', () => {
        const tiles = new Map<string, TileEntry>();
        const color: [number, number, number, number] = [100, 150, 250, 255];
        tiles.set(tileKey(0, 0), { generation: 1, state: 'preview', image: solidImage(TILE, TILE, color) });
        const out = compose([128, 128], 1, tiles);
        expect(pixel(out, 10, 10)).toEqual(dimmed(Array.from(color), PREVIEW_DIM));
    });

    it('clips border tiles to the frame', () => {
        const tiles = new Map<string, TileEntry>();
        tiles.set(tileKey(0, 0), { generation: 0, state: 'final', image: solidImage(TILE, TILE, [1, 1, 1, 255]) });
        tiles.set(tileKey(1, 0), { generation: 0, state: 'final', image: solidImage(TILE, TILE, [2, 2, 2, 255]) });
        const out = compose([96, 64], 0, tiles);
        expect(pixel(out, 63, 0)).toEqual([1, 1, 1, 255]);
        expect(pixel(out, 64, 0)).toEqual([2, 2, 2, 255]);
        expect(pixel(out, 95, 63)).toEqual([2, 2, 2, 255]);
    });

    it('renders a fully final cache with no placeholder or dim anywhere', () => {
        const tiles = new Map<string, TileEntry>();
        const colors: Array<[number, number, number, number]> = [
            [10, 0, 0, 255],
            [0, 20, 0, 255],
            [0, 0, 30, 255],
            [40, 40, 40, 255],
        ];
        tiles.set(tileKey(0, 0), { generation: 2, state: 'final', image: solidImage(TILE, TILE, colors[0]) });
        tiles.set(tileKey(1, 0), { generation: 2, state: 'final', image: solidImage(TILE, TILE, colors[1]) });
        tiles.set(tileKey(0, 1), { generation: 2, state: 'final', image: solidImage(TILE, TILE, colors[2]) });
        tiles.set(tileKey(1, 1), { generation: 2, state: 'final', image: solidImage(TILE, TILE, colors[3]) });
        const out = compose([128, 128], 2, tiles);
        const expected = createImage(128, 128);
        for (let y = 0; y < 128; y++) {
            for (let x = 0; x < 128; x++) {
                const color = colors[(y >= TILE ? 2 : 0) + (x >= TILE ? 1 : 0)];
                expected.data.set(color, (y * 128 + x) * 4);
            }
        }
        expect(imagesEqual(out, expected)).toBe(true);
    });

    it('is deterministic: repainting the same cache is byte-identical', () => {
        const tiles = new Map<string, TileEntry>();
        tiles.set(tileKey(0, 0), { generation: 1, state: 'final', image: solidImage(TILE, TILE, [9, 8, 7, 255]) });
        tiles.set(tileKey(1, 0), { generation: 0, state: 'final', image: solidImage(TILE, TILE, [200, 100, 50, 255]) });
        const first = compose([128, 128], 1, tiles);
        const second = compose([128, 128], 1, tiles);
        expect(imagesEqual(first, second)).toBe(true);
    });
});
