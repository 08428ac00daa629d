"""Progressive tile rendering over LOD pyramids.

Volumes live in a physical box [0, size*spacing) per dimension.  Rays are
parameterized from their near-plane point by world-space distance t along a
unit direction.  The entry-exit node packs, per pixel, four lanes:

    (t_entry, t_exit, footprint_at_0, footprint_slope)

with t_entry > t_exit marking rays that miss the volume.  Entry and exit
positions follow as origin + t * direction; the pixel footprint at depth t
is footprint_at_0 + t * footprint_slope.

Raycast tiles march front to back.  Every sample first tries its target
level (the coarsest whose finest spacing does not exceed the footprint,
plus bias): const-table hit or resident brick.  A preview pass falls back
to preview_lod_offset levels coarser for the rest and emits a Preview tile;
the final pass fetches every missing target brick, so the Final payload
depends only on geometry, never on what happened to be resident.  Bricks
are tracked in per-level page tables owned by the tile task; marching jobs
report uses and misses through a fixed-size hash table the task drains
between segments.  Frames are RGBA, row-major, premultiplied alpha.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .model import (
    ElementType,
    EmbeddingData,
    RGBA_F32,
    RGBA_U8,
    Scalar,
    TensorMetaData,
)
from .graph import OperatorNode
from .ops import (
    LodPyramid,
    OperatorError,
    _overlapping_chunks,
    assemble_region,
    build_const_chunk_table,
    sentinel_for,
    single_level_lod,
    slice_node,
)
from .pagetable import (
    FixedHashTable,
    PageTableHierarchy,
    TAG_CHUNK_REQUEST,
    TAG_CHUNK_USE,
    decode_report_key,
    encode_report_key,
)
from .store import RAM, ChunkState, Location, quantize_size
from .engine import ChunkRequest, WorkerJob

EARLY_TERMINATION_ALPHA = 0.99


# ---------------------------------------------------------------------------
# cameras and projections


@dataclass(frozen=True)
class CameraState:
    eye: tuple
    look_at: tuple
    up: tuple = (0.0, 0.0, 1.0)
    fov_deg: float = 45.0
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise OperatorError("vertical fov must be in (0, 180) degrees")
        if not 0.0 < self.near < self.far:
            raise OperatorError("need 0 < near < far")
        view = np.subtract(self.look_at, self.eye, dtype=np.float64)
        if np.linalg.norm(view) == 0:
            raise OperatorError("eye and look-at coincide")
        cross = np.cross(view, np.asarray(self.up, np.float64))
        if np.linalg.norm(cross) < 1e-12 * np.linalg.norm(view):
            raise OperatorError("up vector is parallel to the view direction")

    def canon(self):
        return {
            "eye": [float(v) for v in self.eye],
            "look_at": [float(v) for v in self.look_at],
            "up": [float(v) for v in self.up],
            "fov": float(self.fov_deg),
            "near": float(self.near),
            "far": float(self.far),
        }


def camera_for_volume(md: TensorMetaData, embedding, fov_deg: float = 45.0) -> CameraState:
    """Frame the volume: eye on the box diagonal, bounding sphere spanning fov."""
    if md.num_dims != 3:
        raise OperatorError("camera fitting needs a 3-D tensor")
    emb = embedding if isinstance(embedding, EmbeddingData) else EmbeddingData(tuple(embedding))
    phys = np.asarray(emb.physical_size(md.size), np.float64)
    center = phys / 2.0
    radius = float(np.linalg.norm(phys)) / 2.0
    dist = radius / math.tan(math.radians(fov_deg) / 2.0)
    direction = np.ones(3) / math.sqrt(3.0)
    eye = center + dist * direction
    return CameraState(
        eye=tuple(eye),
        look_at=tuple(center),
        up=(0.0, 0.0, 1.0),
        fov_deg=float(fov_deg),
        near=max(1e-3 * radius, dist - 2.0 * radius),
        far=dist + 2.0 * radius,
    )


def view_projection(camera: CameraState, aspect: float) -> np.ndarray:
    """Right-handed look-at plus perspective; NDC z in [-1, 1]."""
    eye = np.asarray(camera.eye, np.float64)
    fwd = np.asarray(camera.look_at, np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(camera.up, np.float64))
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = right, up, -fwd
    view[:3, 3] = -view[:3, :3] @ eye

    fy = 1.0 / math.tan(math.radians(camera.fov_deg) / 2.0)
    n, f = camera.near, camera.far
    proj = np.zeros((4, 4))
    proj[0, 0] = fy / aspect
    proj[1, 1] = fy
    proj[2, 2] = (f + n) / (n - f)
    proj[2, 3] = 2.0 * f * n / (n - f)
    proj[3, 2] = -1.0
    return proj @ view


def _invert_projection(matrix) -> np.ndarray:
    m = np.asarray(matrix, np.float64)
    if m.shape != (4, 4):
        raise OperatorError("projection must be a 4x4 matrix")
    try:
        return np.linalg.inv(m)
    except np.linalg.LinAlgError:
        raise OperatorError("singular projection matrix") from None


def _unproject(inv_vp: np.ndarray, ndc: np.ndarray) -> np.ndarray:
    """ndc (..., 3) -> world (..., 3)."""
    h = np.concatenate([ndc, np.ones(ndc.shape[:-1] + (1,))], axis=-1)
    w = h @ inv_vp.T
    return w[..., :3] / w[..., 3:4]


def _pixel_rays(inv_vp, frame_size, rows, cols):
    """Near-plane origins, unit directions, segment lengths, footprint a+b*t."""
    hgt, wdt = int(frame_size[0]), int(frame_size[1])
    ndc_x = (cols + 0.5) / wdt * 2.0 - 1.0
    ndc_y = 1.0 - (rows + 0.5) / hgt * 2.0
    ndc = np.stack([ndc_x, ndc_y], axis=-1)
    near = _unproject(inv_vp, np.concatenate([ndc, np.full(ndc.shape[:-1] + (1,), -1.0)], -1))
    far = _unproject(inv_vp, np.concatenate([ndc, np.full(ndc.shape[:-1] + (1,), 1.0)], -1))
    seg = far - near
    length = np.linalg.norm(seg, axis=-1)
    direction = seg / length[..., None]

    # pixel pitch on the near and far planes (constant across the frame)
    c_ndc = np.array([[0.0, 0.0], [2.0 / wdt, 0.0]])
    pn = _unproject(inv_vp, np.concatenate([c_ndc, np.full((2, 1), -1.0)], -1))
    pf = _unproject(inv_vp, np.concatenate([c_ndc, np.full((2, 1), 1.0)], -1))
    pitch_near = float(np.linalg.norm(pn[1] - pn[0]))
    pitch_far = float(np.linalg.norm(pf[1] - pf[0]))
    fp0 = np.full_like(length, pitch_near)
    fps = (pitch_far - pitch_near) / length
    return near, direction, length, fp0, fps


def _slab_clip(origin, direction, length, extent):
    """Ray-box [0, extent] intersection; empty marked by t_entry > t_exit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (0.0 - origin) * inv
        t1 = (extent - origin) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # parallel rays: inside the slab -> infinite interval, outside -> empty
    par = direction == 0.0
    inside = (origin >= 0.0) & (origin <= extent)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_in = np.maximum(lo.max(axis=-1), 0.0)
    t_out = np.minimum(hi.min(axis=-1), length)
    return t_in, t_out


def entry_exit_points(md: TensorMetaData, embedding, frame_md: TensorMetaData,
                      projection) -> OperatorNode:
    """Per-pixel ray segments through the volume's physical box.

    `projection` is a CameraState or an invertible 4x4 view-projection
    matrix (aspect taken from frame_md when a camera is given).  Rays from
    inside the volume enter at their near-plane start (t_entry = 0).
    """
    if md.num_dims != 3:
        raise OperatorError("entry-exit points need a 3-D tensor")
    emb = embedding if isinstance(embedding, EmbeddingData) else EmbeddingData(tuple(embedding))
    if isinstance(projection, CameraState):
        aspect = frame_md.size[1] / frame_md.size[0]
        projection = view_projection(projection, aspect)
    matrix = np.asarray(projection, np.float64)
    inv_vp = _invert_projection(matrix)
    extent = np.asarray(emb.physical_size(md.size), np.float64)
    out_md = TensorMetaData(frame_md.size, frame_md.chunk_size, ElementType(Scalar.F32, 4))

    def kernel(h, input_arrays, out):
        begin, end = out_md.chunk_logical_region(h)
        rows, cols = np.meshgrid(
            np.arange(begin[0], end[0], dtype=np.float64),
            np.arange(begin[1], end[1], dtype=np.float64),
            indexing="ij",
        )
        origin, direction, length, fp0, fps = _pixel_rays(inv_vp, out_md.size, rows, cols)
        t_in, t_out = _slab_clip(origin, direction, length, extent)
        miss = t_in > t_out
        t_in = np.where(miss, np.inf, t_in)
        t_out = np.where(miss, -np.inf, t_out)
        out[...] = 0
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = np.stack([t_in, t_out, fp0, fps], axis=-1).astype(np.float32)

    return OperatorNode(
        name="eep",
        params={
            "vp": [float(v) for v in matrix.reshape(-1)],
            "extent": [float(v) for v in extent],
            "frame": [int(s) for s in frame_md.size],
            "tile": [int(c) for c in frame_md.chunk_size],
        },
        inputs=(),
        md=out_md,
        embedding=None,
        dependencies=lambda h: [],
        kernel=kernel,
    )


# ---------------------------------------------------------------------------
# transfer functions


@dataclass(frozen=True)
class TransferFunction:
    """Monotone grey ramp: value <= lo -> transparent black, >= hi -> opaque white."""

    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.hi > self.lo:
            raise OperatorError("transfer function needs hi > lo")

    def apply(self, values: np.ndarray) -> np.ndarray:
        """values (...,) -> straight RGBA (..., 4) in [0, 1]."""
        t = np.clip((np.asarray(values, np.float64) - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        return np.stack([t, t, t, t], axis=-1)

    def canon(self):
        return ["grey_ramp", float(self.lo), float(self.hi)]


def grey_ramp_tf(lo: float = 0.0, hi: float = 1.0) -> TransferFunction:
    return TransferFunction(lo, hi)


def grey_ramp(tf: TransferFunction, value: float):
    return tuple(tf.apply(np.float64(value)).tolist())


# ---------------------------------------------------------------------------
# raycasting


@dataclass(frozen=True)
class RaycasterConfig:
    compositing: str = "dvr"  # "dvr" | "mop"
    sample_distance_factor: float = 0.5
    lod_bias: float = 0.0
    preview_lod_offset: int = 2
    use_const_table: bool = False

    def __post_init__(self):
        if self.compositing not in ("dvr", "mop"):
            raise OperatorError("compositing must be 'dvr' or 'mop'")
        if not self.sample_distance_factor > 0:
            raise OperatorError("sample distance factor must be positive")
        if self.preview_lod_offset < 1:
            raise OperatorError("preview_lod_offset must be >= 1")

    def canon(self):
        return {
            "comp": self.compositing,
            "sdf": float(self.sample_distance_factor),
            "bias": float(self.lod_bias),
            "preview": int(self.preview_lod_offset),
            "es": bool(self.use_const_table),
        }


class _LevelGeo:
    """Per-level constants the march kernel needs."""

    def __init__(self, nodes):
        self.spacing = []
        self.size = []
        self.chunk = []
        self.grid = []
        minsp = []
        for node in nodes:
            emb = node.embedding or EmbeddingData((1.0,) * node.md.num_dims)
            self.spacing.append(np.asarray(emb.spacing, np.float64))
            self.size.append(np.asarray([int(s) for s in node.md.size]))
            self.chunk.append(np.asarray([int(c) for c in node.md.chunk_size]))
            self.grid.append(tuple(node.md.chunk_grid_dims()))
            minsp.append(float(min(emb.spacing)))
        self.minsps = np.asarray(minsp)
        self.num_levels = len(nodes)

    def select_level(self, footprint, bias):
        """Coarsest level whose finest spacing does not exceed the footprint."""
        sel = np.searchsorted(self.minsps, footprint, side="right") - 1
        lev = np.floor(sel + bias).astype(np.int64)
        return np.clip(lev, 0, self.num_levels - 1)

    def brick_of(self, pos, lv):
        """Positions (n, d) -> (linear brick index, flat in-brick offset)."""
        idx = np.floor(pos / self.spacing[lv]).astype(np.int64)
        np.clip(idx, 0, self.size[lv] - 1, out=idx)
        brick = idx // self.chunk[lv]
        blin = np.ravel_multi_index(tuple(brick.T), self.grid[lv])
        lflat = np.ravel_multi_index(tuple((idx - brick * self.chunk[lv]).T),
                                     tuple(self.chunk[lv]))
        return blin, lflat


def _march_pass(rays, geo: _LevelGeo, resident: dict, tables, report: FixedHashTable,
                cfg: RaycasterConfig, tf: TransferFunction, offset: int, state):
    """Advance rays until each finishes, terminates, or needs a brick.

    One sample per ray per iteration, so per-pixel compositing order is
    fixed by t no matter how the gathers are grouped.  Missing bricks go
    into `report` and their pixels stall at the current t; a rerun with
    the bricks resident continues exactly where they stopped.  Returns
    (complete, every sample so far was target fidelity).
    """
    origin, direction, _, t_exit, fp0, fps = rays
    t, acc_c, acc_a, mop_a, mop_c, alive = state
    ds0 = float(geo.minsps[0])
    stall = np.zeros(t.shape, bool)
    all_target = True

    while True:
        act = alive & ~stall & (t <= t_exit)
        ids = np.nonzero(act)[0]
        if ids.size == 0:
            break
        fp = fp0[ids] + fps[ids] * t[ids]
        targ = geo.select_level(fp, cfg.lod_bias)
        samp = np.clip(targ + offset, 0, geo.num_levels - 1)
        pos = origin[ids] + t[ids, None] * direction[ids]

        value = np.zeros(ids.size)
        have = np.zeros(ids.size, bool)

        def gather(lv, sub, request):
            if sub.size == 0:
                return
            blin, lflat = geo.brick_of(pos[sub], lv)
            rest = np.ones(sub.size, bool)
            if tables is not None:
                tmask, tval = tables[lv]
                uni = tmask[blin]
                value[sub[uni]] = tval[blin[uni]]
                have[sub[uni]] = True
                rest &= ~uni
            for bl in np.unique(blin[rest]):
                grp = rest & (blin == bl)
                payload = resident.get((lv, int(bl)))
                if payload is None:
                    if request:
                        report.insert(encode_report_key(TAG_CHUNK_REQUEST, lv, int(bl)))
                        stall[ids[sub[grp]]] = True
                else:
                    report.insert(encode_report_key(TAG_CHUNK_USE, lv, int(bl)))
                    value[sub[grp]] = payload.reshape(-1)[lflat[grp]].astype(np.float64)
                    have[sub[grp]] = True

        for lv in np.unique(targ):
            gather(int(lv), np.nonzero(targ == lv)[0], request=offset == 0)
        fid = have.copy()
        if offset:
            left = ~have
            for lv in np.unique(samp[left]):
                gather(int(lv), np.nonzero(left & (samp == lv))[0], request=True)
            if np.any(have & ~fid):
                all_target = False

        go = np.nonzero(have)[0]
        if go.size:
            px = ids[go]
            dt = cfg.sample_distance_factor * geo.minsps[np.where(fid[go], targ[go], samp[go])]
            rgba = tf.apply(value[go])
            color, alpha = rgba[:, :3], rgba[:, 3]
            if cfg.compositing == "dvr":
                corrected = 1.0 - np.power(1.0 - alpha, dt / ds0)
                weight = (1.0 - acc_a[px]) * corrected
                acc_c[px] += weight[:, None] * color
                acc_a[px] += weight
                alive[px] &= acc_a[px] < EARLY_TERMINATION_ALPHA
            else:
                better = alpha > mop_a[px]
                upd = px[better]
                mop_a[upd] = alpha[better]
                mop_c[upd] = color[better]
            t[px] += dt

    return not stall.any(), all_target


def _quantize_rgba8(rgba: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)


def raycast(lod: LodPyramid, eep: OperatorNode, config: RaycasterConfig,
            tf: TransferFunction, frame_md: TensorMetaData,
            const_tables=None) -> OperatorNode:
    """Progressive raycast frame over an LOD pyramid.

    Each tile runs a preview pass (falling back preview_lod_offset levels
    coarser where the target level is unavailable) and then a final pass;
    the tile is already Final after the preview pass when every sample
    resolved at its target level.  With use_const_table, per-level const
    tables composite uniform bricks without fetching them; `const_tables`
    supplies prebuilt table nodes (for example from an offline build),
    otherwise tables derive from the pyramid levels.
    """
    if lod.num_levels < 1:
        raise OperatorError("pyramid is empty")
    levels = tuple(lod.nodes)
    if any(n.md.element_type.lanes != 1 for n in levels):
        raise OperatorError("raycast needs scalar volumes")
    out_et = frame_md.element_type
    if out_et not in (RGBA_U8, RGBA_F32):
        raise OperatorError("frame element type must be RGBA (u8 or f32)")
    tables = ()
    if config.use_const_table:
        tables = tuple(const_tables) if const_tables is not None else tuple(
            build_const_chunk_table(n) for n in levels
        )
        if len(tables) != len(levels):
            raise OperatorError("need one const table per pyramid level")
    out_md = TensorMetaData(frame_md.size, frame_md.chunk_size, out_et)
    geo = _LevelGeo(levels)

    def _fetch_tables():
        per_level = []
        for tnode in tables:
            req = ChunkRequest(tnode, list(tnode.md.chunk_positions()), RAM, ChunkState.FINAL)
            handles = yield req
            chunks = {p: h.read() for p, h in zip(req.positions, handles)}
            for h in handles:
                h.release()
            dense = assemble_region(tnode.md, chunks, (0,) * tnode.md.num_dims, tnode.md.size)
            sent = sentinel_for(tnode.md.element_type)
            if isinstance(sent, float) and math.isnan(sent):
                mask = ~np.isnan(dense)
            else:
                mask = dense != sent
            per_level.append((mask.reshape(-1), dense.reshape(-1)))
        return per_level

    def _render_tile(ctx, pos, brick_loc, max_resident, fetch_batch):
        begin, end = out_md.chunk_logical_region(pos)
        shape = (end[0] - begin[0], end[1] - begin[1])
        npx = shape[0] * shape[1]

        # cached query buffer: ray segments and footprints for this tile
        handles = yield ChunkRequest(eep, [pos], RAM, ChunkState.FINAL)
        eep_arr = handles[0].read()[: shape[0], : shape[1]].reshape(npx, 4).astype(np.float64)
        handles[0].release()
        inv_vp = _invert_projection(np.asarray(eep.params["vp"]).reshape(4, 4))
        rows, cols = np.meshgrid(
            np.arange(begin[0], end[0], dtype=np.float64),
            np.arange(begin[1], end[1], dtype=np.float64),
            indexing="ij",
        )
        origin, direction, _, _, _ = _pixel_rays(inv_vp, out_md.size, rows, cols)
        rays = (
            origin.reshape(npx, 3), direction.reshape(npx, 3),
            eep_arr[:, 0], eep_arr[:, 1], eep_arr[:, 2], eep_arr[:, 3],
        )

        level_tables = None
        if tables:
            level_tables = yield from _fetch_tables()

        resident: dict = {}
        lru: OrderedDict = OrderedDict()

        def drop(lv, index, handle):
            handle.release()
            resident.pop((lv, index), None)
            lru.pop((lv, index), None)

        ptabs = [
            PageTableHierarchy(on_remove=lambda i, h, lv=lv: drop(lv, i, h))
            for lv in range(geo.num_levels)
        ]
        report = FixedHashTable()

        def composite(state):
            _, acc_c, acc_a, mop_a, mop_c, _ = state
            if config.compositing == "dvr":
                rgba = np.concatenate([acc_c, acc_a[:, None]], axis=1)
            else:
                rgba = np.concatenate([mop_a[:, None] * mop_c, mop_a[:, None]], axis=1)
            frame = np.zeros(out_md.element_type.payload_shape(out_md.chunk_size),
                             dtype=out_md.element_type.np_dtype)
            block = rgba.reshape(shape[0], shape[1], 4)
            if out_et == RGBA_U8:
                block = _quantize_rgba8(block)
            frame[: shape[0], : shape[1]] = block
            return frame

        max_off = min(config.preview_lod_offset, geo.num_levels - 1)
        passes = [max_off, 0] if max_off > 0 else [0]
        for offset in passes:
            state = (
                np.where(np.isfinite(rays[2]), rays[2], np.inf).copy(),
                np.zeros((npx, 3)), np.zeros(npx),
                np.zeros(npx), np.zeros((npx, 3)),
                np.ones(npx, bool),
            )
            all_target = True
            while True:
                complete, at_target = yield WorkerJob(
                    _march_pass, rays, geo, resident, level_tables, report,
                    config, tf, offset, state,
                )
                all_target &= at_target
                misses = []
                for key in sorted(report.drain()):
                    tag, lv, bl = decode_report_key(key)
                    if tag == TAG_CHUNK_USE:
                        ptabs[lv].touch(bl)
                        if (lv, bl) in lru:
                            lru.move_to_end((lv, bl))
                    elif (lv, bl) not in resident:
                        misses.append((lv, bl))
                if complete:
                    break
                for lv, bl in misses[:fetch_batch]:
                    while len(lru) >= max_resident:
                        evict_lv, evict_bl = next(iter(lru))
                        ptabs[evict_lv].remove(evict_bl)
                    posn = tuple(int(v) for v in np.unravel_index(bl, geo.grid[lv]))
                    got = yield ChunkRequest(levels[lv], [posn], brick_loc, ChunkState.FINAL)
                    if (lv, bl) in resident:
                        got[0].release()
                        continue
                    ptabs[lv].insert(bl, got[0])
                    resident[(lv, bl)] = got[0].array
                    lru[(lv, bl)] = None
            frame = composite(state)
            if offset == 0 or all_target:
                break
            yield from ctx.store_chunk(pos, frame, ChunkState.PREVIEW)
        for tab in ptabs:
            tab.evict_lru(tab.mapped_count())  # releases every pinned brick
        yield from ctx.store_chunk(pos, frame, ChunkState.FINAL)

    def task_body(ctx):
        group = ctx.stores
        brick_loc = Location.device(0) if Location.device(0) in group.stores else RAM
        brick_bytes = quantize_size(levels[0].md.chunk_payload_bytes())
        cap = group.store(brick_loc).capacity // max(1, brick_bytes)
        max_resident = max(2, int(cap) // max(1, ctx.config.max_active_tasks_per_operator))
        fetch_batch = max(1, min(ctx.config.max_requests_per_task, max_resident))
        for pos in ctx.positions:
            yield from _render_tile(ctx, pos, brick_loc, max_resident, fetch_batch)

    return OperatorNode(
        name="raycast",
        params={
            "config": config.canon(),
            "tf": tf.canon(),
            "frame": [int(s) for s in frame_md.size],
            "tile": [int(c) for c in frame_md.chunk_size],
            "et": list(out_et.canon()),
        },
        inputs=(eep,) + levels + tables,
        md=out_md,
        embedding=None,
        task_body=task_body,
    )


def render_frame(engine, pyramid: LodPyramid, camera, config: RaycasterConfig,
                 tf: TransferFunction, frame_size, tile_size,
                 element_type: ElementType = RGBA_U8, const_tables=None) -> np.ndarray:
    """Resolve a full raycast frame and assemble it into one array."""
    frame_md = TensorMetaData(frame_size, tile_size, element_type)
    base = pyramid.node(0)
    emb = pyramid.embedding(0)
    if camera == "auto" or camera is None:
        camera = camera_for_volume(base.md, emb)
    eep = entry_exit_points(base.md, emb, frame_md, camera)
    node = raycast(pyramid, eep, config, tf, frame_md, const_tables=const_tables)
    chunks = {pos: arr for pos, arr in engine.resolve_iter(node)}
    frame = assemble_region(node.md, chunks, (0, 0), frame_md.size)
    return frame.astype(element_type.np_dtype)


# ---------------------------------------------------------------------------
# slice and image viewers


def _zoom_level(zoom: float, num_levels: int) -> int:
    if not zoom > 0:
        raise OperatorError("zoom must be positive")
    return int(np.clip(math.floor(-math.log2(zoom)), 0, num_levels - 1))


def _resample_nn(input_node: OperatorNode, frame_md: TensorMetaData,
                 scale, offset) -> OperatorNode:
    """Nearest-neighbor gather: frame pixel p samples floor((p+.5)*scale+offset)."""
    src_md = input_node.md
    out_md = TensorMetaData(frame_md.size, frame_md.chunk_size, src_md.element_type)
    scale = tuple(float(s) for s in scale)
    offset = tuple(float(o) for o in offset)

    def src_axes(h):
        begin, end = out_md.chunk_logical_region(h)
        axes = [
            np.floor((np.arange(b, e, dtype=np.float64) + 0.5) * s + o).astype(np.int64)
            for b, e, s, o in zip(begin, end, scale, offset)
        ]
        valid = [(a >= 0) & (a < int(sz)) for a, sz in zip(axes, src_md.size)]
        return begin, end, axes, valid

    def region(axes, valid):
        lo = [int(a[v].min()) for a, v in zip(axes, valid)]
        hi = [int(a[v].max()) + 1 for a, v in zip(axes, valid)]
        return lo, hi

    def dependencies(h):
        _, _, axes, valid = src_axes(h)
        if not all(v.any() for v in valid):
            return [[]]
        lo, hi = region(axes, valid)
        return [_overlapping_chunks(src_md, lo, hi)]

    def kernel(h, input_arrays, out):
        begin, end, axes, valid = src_axes(h)
        out[...] = 0
        if not all(v.any() for v in valid):
            return
        lo, hi = region(axes, valid)
        chunks = dict(zip(dependencies(h)[0], input_arrays[0]))
        block = assemble_region(src_md, chunks, lo, hi)
        rr = np.clip(axes[0] - lo[0], 0, hi[0] - lo[0] - 1)
        cc = np.clip(axes[1] - lo[1], 0, hi[1] - lo[1] - 1)
        gathered = block[np.ix_(rr, cc)]
        mask = np.logical_and.outer(valid[0], valid[1])
        if src_md.element_type.lanes > 1:
            mask = mask[..., None]
        sampled = np.where(mask, gathered, 0)
        dst = tuple(slice(0, e - b) for b, e in zip(begin, end))
        out[dst] = sampled.astype(src_md.element_type.np_dtype)

    return OperatorNode(
        name="resample_nn",
        params={
            "scale": list(scale),
            "offset": list(offset),
            "frame": [int(s) for s in frame_md.size],
            "tile": [int(c) for c in frame_md.chunk_size],
        },
        inputs=(input_node,),
        md=out_md,
        embedding=None,
        dependencies=dependencies,
        kernel=kernel,
    )


def slice_view(source, dim: int, index: int, pan, zoom: float,
               frame_md: TensorMetaData) -> OperatorNode:
    """Axis-aligned slice under pan/zoom; background 0 outside the tensor.

    `pan` is the level-0 element coordinate shown at frame pixel (0, 0);
    `zoom` is screen pixels per level-0 element.  The level is the one
    where a single output pixel covers at least one source element, so
    zoom 1 reads level 0 and zoom 0.5 reads level 1.  Output keeps the
    source element type.
    """
    pyramid = source if isinstance(source, LodPyramid) else single_level_lod(source)
    base = pyramid.node(0)
    if base.md.num_dims != 3:
        raise OperatorError("slice view needs a 3-D source")
    if not 0 <= dim < base.md.num_dims:
        raise OperatorError(f"slice dim {dim} out of range")
    if not 0 <= index < base.md.size[dim]:
        raise OperatorError(f"slice index {index} out of range for size {base.md.size[dim]}")
    level = _zoom_level(zoom, pyramid.num_levels)
    node = pyramid.node(level)
    idx = min(index >> level, node.md.size[dim] - 1)
    plane = slice_node(node, dim, idx)
    factor = float(1 << level)
    scale = (1.0 / (zoom * factor),) * 2
    offset = tuple(float(p) / factor for p in pan)
    return _resample_nn(plane, frame_md, scale, offset)


def image_view(pyramid: LodPyramid, pan, zoom: float,
               frame_md: TensorMetaData) -> OperatorNode:
    """Pan/zoom viewer over a 2-D pyramid; level switches at powers of two."""
    if pyramid.node(0).md.num_dims != 2:
        raise OperatorError("image view needs a 2-D pyramid")
    level = _zoom_level(zoom, pyramid.num_levels)
    node = pyramid.node(level)
    factor = float(1 << level)
    scale = (1.0 / (zoom * factor),) * 2
    offset = tuple(float(p) / factor for p in pan)
    return _resample_nn(node, frame_md, scale, offset)
