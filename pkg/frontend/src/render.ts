/**
 * render.ts
 *
 * Composites the tile cache onto a surface.  The rules, in order per tile
 * slot: nothing cached yet draws a checkerboard placeholder; pixels from an
 * older generation stay visible but dimmed until replaced; previews of the
 * current generation are lightly dimmed to mark them; finals are copied
 * verbatim.  Composition is deterministic, so repainting an unchanged cache
 * yields byte-identical pixels.
 */

import { RgbaImage, blitImage, drawCheckerboard } from './surface.js';
import { TileEntry, phaseOf, tileGrid } from './state.js';

export const STALE_DIM = 0.6;
export const PREVIEW_DIM = 0.85;

export interface TileLookup {
    (x: number, y: number): TileEntry | undefined;
}

/**
 * Draws every tile slot of a frame onto `target`, which must match the
 * frame size.  Border slots clip the tile image to the frame.
 */
export function composeFrame(
    target: RgbaImage,
    frame: [number, number],
    generation: number,
    tileSize: number,
    lookup: TileLookup
): void {
    const [cols, rows] = tileGrid(frame, tileSize);
    for (let y = 0; y < rows; y++) {
        for (let x = 0; x < cols; x++) {
            const dx = x * tileSize;
            const dy = y * tileSize;
            const width = Math.min(tileSize, frame[0] - dx);
            const height = Math.min(tileSize, frame[1] - dy);
            const entry = lookup(x, y);
            const phase = phaseOf(entry, generation);
            if (phase === 'missing') {
                drawCheckerboard(target, dx, dy, width, height);
                continue;
            }
            const dim = phase === 'stale' ? STALE_DIM : phase === 'preview' ? PREVIEW_DIM : 1;
            blitImage(target, entry!.image, dx, dy, {
                dim,
                srcRect: { x: 0, y: 0, width, height },
            });
        }
    }
}
