/**
 * dom.ts
 *
 * Browser glue: mounts a dataset picker, a canvas, and a status line, wires
 * pointer and wheel events to the viewer, and copies the software surface
 * to the canvas on animation frames.  Everything above this module is DOM
 * free and runs under plain node.
 */

import { Viewer } from './viewer.js';
import { RgbaImage, createImage } from './surface.js';

/** Decodes a PNG via an offscreen canvas (browser decoder for the viewer). */
export async function decodeWithCanvas(png: Uint8Array): Promise<RgbaImage> {
    const bitmap = await createImageBitmap(new Blob([png.slice().buffer], { type: 'image/png' }));
    const canvas = document.createElement('canvas');
    canvas.width = bitmap.width;
    canvas.height = bitmap.height;
    const ctx = canvas.getContext('2d');
    if (!ctx) throw new Error('2d canvas unavailable');
    ctx.drawImage(bitmap, 0, 0);
    const pixels = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
    return { width: pixels.width, height: pixels.height, data: pixels.data };
}

export interface MountOptions {
    frame?: [number, number];
    tileSize?: number;
}

/**
 * Builds the viewer UI inside `root` and connects to a tile service.
 * Returns the viewer so callers can script it.
 */
export async function mountViewer(
    root: HTMLElement,
    baseUrl: string,
    options: MountOptions = {}
): Promise<Viewer> {
    const frame = options.frame ?? [1024, 768];

    const picker = document.createElement('select');
    const status = document.createElement('div');
    const canvas = document.createElement('canvas');
    canvas.width = frame[0];
    canvas.height = frame[1];
    root.append(picker, status, canvas);
    const ctx = canvas.getContext('2d');
    if (!ctx) throw new Error('2d canvas unavailable');

    const surface = createImage(frame[0], frame[1]);
    let repaintQueued = false;

    const viewer = new Viewer({
        baseUrl,
        frame,
        tileSize: options.tileSize ?? 512,
        decode: decodeWithCanvas,
        onChange: () => {
            if (repaintQueued) return;
            repaintQueued = true;
            requestAnimationFrame(() => {
                repaintQueued = false;
                if (viewer.view) {
                    viewer.render(surface);
                    ctx.putImageData(new ImageData(surface.data.slice(), surface.width, surface.height), 0, 0);
                }
                status.textContent = describe(viewer);
            });
        },
    });

    await viewer.connect();
    if (viewer.connection === 'error') {
        status.textContent = `connection failed: ${viewer.connectionError}`;
        return viewer;
    }
    for (const dataset of viewer.datasets) {
        const option = document.createElement('option');
        option.value = dataset.id;
        option.textContent = `${dataset.id} (${dataset.size.join('x')} ${dataset.element_type})`;
        picker.append(option);
    }
    picker.addEventListener('change', () => void viewer.openDataset(picker.value));

    canvas.addEventListener('wheel', (event) => {
        event.preventDefault();
        const rect = canvas.getBoundingClientRect();
        const cursor: [number, number] = [event.clientX - rect.left, event.clientY - rect.top];
        viewer.zoomAt(Math.pow(2, -event.deltaY / 240), cursor);
    });

    let dragging = false;
    let last: [number, number] = [0, 0];
    canvas.addEventListener('pointerdown', (event) => {
        dragging = true;
        last = [event.clientX, event.clientY];
        canvas.setPointerCapture(event.pointerId);
    });
    canvas.addEventListener('pointermove', (event) => {
        if (!dragging) return;
        viewer.dragBy(event.clientX - last[0], event.clientY - last[1]);
        last = [event.clientX, event.clientY];
    });
    canvas.addEventListener('pointerup', () => {
        dragging = false;
    });

    window.addEventListener('keydown', (event) => {
        const view = viewer.view;
        if (!view) return;
        if (view.kind === 'slice' && (event.key === 'ArrowUp' || event.key === 'ArrowDown')) {
            viewer.setSliceIndex(view.sliceIndex + (event.key === 'ArrowUp' ? 1 : -1));
        }
        if (view.time !== null && (event.key === 'ArrowRight' || event.key === 'ArrowLeft')) {
            viewer.setTime(view.time + (event.key === 'ArrowRight' ? 1 : -1));
        }
    });

    if (viewer.datasets.length > 0) await viewer.openDataset(viewer.datasets[0].id);
    return viewer;
}

function describe(viewer: Viewer): string {
    if (viewer.connection !== 'ready') return viewer.connection;
    const view = viewer.view;
    if (!view) return 'pick a dataset';
    const parts = [`${view.dataset.id}`, view.kind, `generation ${view.generation}`];
    if (view.kind !== 'raycast') parts.push(`zoom ${view.zoom.toFixed(2)}`);
    if (view.kind === 'slice') parts.push(`slice ${view.sliceDim}=${view.sliceIndex}`);
    if (view.time !== null) parts.push(`t=${view.time}`);
    parts.push(viewer.settled() ? 'final' : 'refining');
    return parts.join(' | ');
}
