/**
 * surface.ts
 *
 * Software RGBA pixel buffers and the handful of drawing operations the
 * viewer needs.  Keeping composition off the DOM makes every rendering rule
 * directly testable; the browser layer only copies the finished surface to a
 * canvas.
 */

/** Tightly packed RGBA8 rows, same layout as canvas ImageData. */
export interface RgbaImage {
    width: number;
    height: number;
    data: Uint8ClampedArray;
}

export function createImage(width: number, height: number): RgbaImage {
    return { width, height, data: new Uint8ClampedArray(width * height * 4) };
}

/** Fills a rectangle (clipped to the image) with one RGBA color. */
export function fillRect(
    img: RgbaImage,
    x0: number,
    y0: number,
    width: number,
    height: number,
    rgba: [number, number, number, number]
): void {
    const xBegin = Math.max(0, x0);
    const yBegin = Math.max(0, y0);
    const xEnd = Math.min(img.width, x0 + width);
    const yEnd = Math.min(img.height, y0 + height);
    for (let y = yBegin; y < yEnd; y++) {
        let offset = (y * img.width + xBegin) * 4;
        for (let x = xBegin; x < xEnd; x++) {
            img.data[offset] = rgba[0];
            img.data[offset + 1] = rgba[1];
            img.data[offset + 2] = rgba[2];
            img.data[offset + 3] = rgba[3];
            offset += 4;
        }
    }
}

export const CHECKER_LIGHT: [number, number, number, number] = [200, 200, 200, 255];
export const CHECKER_DARK: [number, number, number, number] = [164, 164, 164, 255];

/**
 * Draws the placeholder checkerboard over a rectangle.  The pattern is
 * anchored at image coordinates so adjacent placeholder tiles line up.
 */
export function drawCheckerboard(
    img: RgbaImage,
    x0: number,
    y0: number,
    width: number,
    height: number,
    cell = 16
): void {
    const xBegin = Math.max(0, x0);
    const yBegin = Math.max(0, y0);
    const xEnd = Math.min(img.width, x0 + width);
    const yEnd = Math.min(img.height, y0 + height);
    for (let y = yBegin; y < yEnd; y++) {
        const parityY = Math.floor(y / cell) & 1;
        let offset = (y * img.width + xBegin) * 4;
        for (let x = xBegin; x < xEnd; x++) {
            const color = (Math.floor(x / cell) & 1) === parityY ? CHECKER_LIGHT : CHECKER_DARK;
            img.data[offset] = color[0];
            img.data[offset + 1] = color[1];
            img.data[offset + 2] = color[2];
            img.data[offset + 3] = color[3];
            offset += 4;
        }
    }
}

export interface BlitOptions {
    /** Multiplies the RGB channels (not alpha); 1 copies verbatim. */
    dim?: number;
    /** Source rectangle; defaults to the whole source image. */
    srcRect?: { x: number; y: number; width: number; height: number };
}

/**
 * Copies a source image onto the destination at (dx, dy), clipping to both
 * buffers.  With `dim` below 1 the RGB channels are attenuated, which is how
 * stale and preview tiles are visually marked.
 */
export function blitImage(dst: RgbaImage, src: RgbaImage, dx: number, dy: number, opts: BlitOptions = {}): void {
    const rect = opts.srcRect ?? { x: 0, y: 0, width: src.width, height: src.height };
    const dim = opts.dim ?? 1;
    const width = Math.min(rect.width, src.width - rect.x, dst.width - dx);
    const height = Math.min(rect.height, src.height - rect.y, dst.height - dy);
    for (let row = 0; row < height; row++) {
        let from = ((rect.y + row) * src.width + rect.x) * 4;
        let to = ((dy + row) * dst.width + dx) * 4;
        if (dim === 1) {
            dst.data.set(src.data.subarray(from, from + width * 4), to);
            continue;
        }
        for (let col = 0; col < width; col++) {
            dst.data[to] = Math.round(src.data[from] * dim);
            dst.data[to + 1] = Math.round(src.data[from + 1] * dim);
            dst.data[to + 2] = Math.round(src.data[from + 2] * dim);
            dst.data[to + 3] = src.data[from + 3];
            from += 4;
            to += 4;
        }
    }
}

/** Byte equality of two images (dimensions and pixels). */
export function imagesEqual(a: RgbaImage, b: RgbaImage): boolean {
    if (a.width !== b.width || a.height !== b.height) return false;
    if (a.data.length !== b.data.length) return false;
    for (let i = 0; i < a.data.length; i++) {
        if (a.data[i] !== b.data[i]) return false;
    }
    return true;
}

/** Deep copy, for screenshots that must not alias the live surface. */
export function cloneImage(img: RgbaImage): RgbaImage {
    return { width: img.width, height: img.height, data: new Uint8ClampedArray(img.data) };
}
