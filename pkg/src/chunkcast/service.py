"""HTTP tile service for interactive viewers.

Exposes datasets (LOD pyramids on disk) and view sessions.  A session holds
view parameters (camera, slice, pan/zoom, transfer function) plus a
generation counter that increments on every parameter change; tile
responses carry the generation they were rendered under, so clients can
discard stale pixels.

One engine serves all sessions and is owned by a single worker thread that
consumes render commands from a queue; HTTP handlers only validate, enqueue
and read tile buffers.  Each tile is PNG-encoded once and cached per
(session, generation, tile), which makes repeated polls of a finished tile
byte-identical: a tile's response sequence is a prefix of previews followed
by one repeated final.
"""

from __future__ import annotations

import io
import itertools
import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException, Response

from .engine import Engine, EngineConfig
from .model import RGBA_U8, TensorMetaData
from .ops import LodPyramid, OperatorError, slice_node
from .render import (
    CameraState,
    RaycasterConfig,
    TransferFunction,
    camera_for_volume,
    entry_exit_points,
    image_view,
    raycast,
    slice_view,
)
from .store import ChunkState, StoreConfig
from .tensorfile import PyramidManifest, read_header

log = logging.getLogger(__name__)

RENDER_TIMEOUT_S = 60.0
MAX_FRAME_DIM = 8192


class ParamError(ValueError):
    """Session parameters that fail validation (HTTP 400)."""


@dataclass
class _TileBuffer:
    state: str  # "preview" | "final"
    png: bytes


class _Dataset:
    def __init__(self, name: str, manifest: PyramidManifest):
        self.name = name
        self.manifest = manifest
        self.pyramid = manifest.open_pyramid()
        tables = [manifest.open_const_table(k) for k in range(manifest.num_levels)]
        self.const_tables = tables if all(t is not None for t in tables) else None
        self.md = self.pyramid.node(0).md

    def describe(self) -> dict:
        return {
            "id": self.name,
            "dims": self.md.num_dims,
            "size": list(self.md.size),
            "levels": self.pyramid.num_levels,
            "element_type": str(self.md.element_type),
        }


class _Session:
    def __init__(self, sid: str, dataset: _Dataset, kind: str, params: dict):
        self.id = sid
        self.dataset = dataset
        self.kind = kind
        self.params = params
        self.generation = 0
        self.lock = threading.Lock()
        self.tiles: dict[tuple, _TileBuffer] = {}  # (gen, x, y)
        self.events: dict[tuple, threading.Event] = {}
        self.queued: set = set()
        self.errors: dict[tuple, str] = {}
        self._node_cache: tuple | None = None  # (gen, node)

    def bump(self, params: dict) -> int:
        with self.lock:
            self.generation += 1
            self.params = params
            self._node_cache = None
            self.tiles.clear()
            self.queued.clear()
            self.errors.clear()
            for ev in self.events.values():
                ev.set()  # wake pollers of older generations
            self.events.clear()
            return self.generation

    def grid(self, tile_size: int) -> tuple:
        wdt, hgt = self.params["frame"]
        return (-(-wdt // tile_size), -(-hgt // tile_size))  # (cols, rows)


class TileService:
    """Engine, datasets, sessions, and the FastAPI app serving them."""

    def __init__(self, manifests: dict, tile_size: int = 512,
                 ram_budget: int = 1 << 28, device_budget: int = 0):
        self.tile_size = int(tile_size)
        if self.tile_size < 1:
            raise ParamError("tile size must be positive")
        caps = (device_budget,) if device_budget else ()
        self._engine = Engine(EngineConfig(
            stores=StoreConfig(ram_capacity=ram_budget, device_capacities=caps)))
        self._datasets = {name: _Dataset(name, m) for name, m in manifests.items()}
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count()
        self._commands: queue.Queue = queue.Queue()
        self._owner = threading.Thread(target=self._engine_owner, daemon=True,
                                       name="tile-engine")
        self._owner.start()
        self.app = self._build_app()

    def close(self):
        self._commands.put(None)
        self._owner.join(timeout=10)
        self._engine.close()

    # -- engine owner thread ------------------------------------------------

    def _engine_owner(self):
        while True:
            command = self._commands.get()
            if command is None:
                return
            session, gen, key = command
            try:
                if session.generation == gen:
                    self._render_tile(session, gen, key)
            except Exception as exc:  # surfaced to the poller as HTTP 500
                log.exception("tile %s of session %s failed", key, session.id)
                with session.lock:
                    session.errors[key] = str(exc)
            finally:
                with session.lock:
                    session.queued.discard(key)
                    event = session.events.get(key)
                    if event is not None:
                        event.set()

    def _render_tile(self, session: _Session, gen: int, key: tuple):
        node = self._node_for(session, gen)
        _, x, y = key
        pos = (y, x)  # tile grid is row-major, query coords are x (col), y (row)
        tf = session.params.get("tf", (0.0, 1.0))
        progressive = session.kind == "raycast" and session.dataset.pyramid.num_levels > 1
        if progressive:
            arr = self._engine.resolve_one(node, pos, min_state=ChunkState.PREVIEW)
            self._buffer(session, key, _to_rgba8(arr, node.md.element_type, tf), "preview")
        arr = self._engine.resolve_one(node, pos)
        self._buffer(session, key, _to_rgba8(arr, node.md.element_type, tf), "final")

    def _buffer(self, session: _Session, key: tuple, arr: np.ndarray, state: str):
        png = _encode_png(arr)
        with session.lock:
            current = session.tiles.get(key)
            if current is not None and current.state == "final":
                return  # monotone: a final tile never changes
            session.tiles[key] = _TileBuffer(state, png)
            event = session.events.get(key)
            if event is not None:
                event.set()

    def _node_for(self, session: _Session, gen: int):
        cached = session._node_cache
        if cached is not None and cached[0] == gen:
            return cached[1]
        node = self._build_node(session.dataset, session.kind, session.params)
        session._node_cache = (gen, node)
        return node

    def _build_node(self, dataset: _Dataset, kind: str, params: dict):
        wdt, hgt = params["frame"]
        frame_md = TensorMetaData((hgt, wdt), (self.tile_size, self.tile_size), RGBA_U8)
        pyramid = dataset.pyramid
        tables = dataset.const_tables
        if "time" in params:
            pyramid = _time_slice(pyramid, params["time"])
            tables = None
        if kind == "image":
            pan = params["pan"]
            return image_view(pyramid, (pan[1], pan[0]), params["zoom"], frame_md)
        if kind == "slice":
            pan = params["pan"]
            return slice_view(pyramid, params["dim"], params["index"],
                              (pan[1], pan[0]), params["zoom"], frame_md)
        camera = params["camera"]
        if camera == "auto":
            cam = camera_for_volume(pyramid.node(0).md, pyramid.embedding(0),
                                    fov_deg=params["fov"])
        else:
            cam = CameraState(eye=tuple(camera["eye"]), look_at=tuple(camera["look_at"]),
                              up=tuple(camera.get("up", (0.0, 0.0, 1.0))),
                              fov_deg=params["fov"])
        config = RaycasterConfig(compositing=params["compositing"],
                                 use_const_table=params["es"])
        tf = TransferFunction(*params["tf"])
        eep = entry_exit_points(pyramid.node(0).md, pyramid.embedding(0), frame_md, cam)
        return raycast(pyramid, eep, config, tf, frame_md,
                       const_tables=tables if params["es"] else None)

    # -- parameter validation -------------------------------------------------

    def _validate(self, dataset: _Dataset, kind: str, params) -> dict:
        if not isinstance(params, dict):
            raise ParamError("params must be an object")
        if kind not in ("image", "slice", "raycast"):
            raise ParamError(f"unknown view kind {kind!r}")
        out = {"frame": _frame(params.get("frame", [self.tile_size, self.tile_size]))}
        ndim = dataset.md.num_dims
        if "time" in params or ndim == 4:
            if kind == "image":
                raise ParamError("time index only applies to slice and raycast views")
            if ndim != 4:
                raise ParamError(f"dataset is {ndim}-D, time index needs 4-D")
            out["time"] = _index(params.get("time"), dataset.md.size[0], "time")
            ndim = 3
        if kind == "image":
            if ndim != 2:
                raise ParamError(f"image view needs a 2-D dataset, got {ndim}-D")
            out.update(pan=_pan(params.get("pan", [0.0, 0.0])),
                       zoom=_zoom(params.get("zoom", 1.0)))
        elif kind == "slice":
            if ndim != 3:
                raise ParamError(f"slice view needs a 3-D dataset, got {ndim}-D")
            dim = params.get("dim", 0)
            if not isinstance(dim, int) or not 0 <= dim < 3:
                raise ParamError(f"slice dim must be 0..2, got {dim!r}")
            axis = dim if "time" not in out else dim + 1
            out.update(dim=dim,
                       index=_index(params.get("index"), dataset.md.size[axis], "index"),
                       pan=_pan(params.get("pan", [0.0, 0.0])),
                       zoom=_zoom(params.get("zoom", 1.0)))
        else:
            if ndim != 3:
                raise ParamError(f"raycast view needs a 3-D dataset, got {ndim}-D")
            out.update(camera=_camera(params.get("camera", "auto")),
                       fov=_fov(params.get("fov", 45.0)),
                       compositing=params.get("compositing", "dvr"),
                       tf=_tf(params.get("tf", [0.0, 1.0])),
                       es=bool(params.get("es", False)))
            try:  # reuse the renderer's own validation for ranges
                RaycasterConfig(compositing=out["compositing"])
                TransferFunction(*out["tf"])
                if out["camera"] != "auto":
                    cam = out["camera"]
                    CameraState(eye=tuple(cam["eye"]), look_at=tuple(cam["look_at"]),
                                up=tuple(cam.get("up", (0.0, 0.0, 1.0))),
                                fov_deg=out["fov"])
            except (OperatorError, TypeError) as exc:
                raise ParamError(str(exc))
        if kind in ("image", "slice"):
            out["tf"] = _tf(params.get("tf", _default_tf(dataset.md.element_type)))
            if out["tf"][1] <= out["tf"][0]:
                raise ParamError("tf needs hi > lo")
        return out

    # -- http -----------------------------------------------------------------

    def _build_app(self) -> FastAPI:
        app = FastAPI(title="chunkcast tile service")
        service = self

        @app.get("/datasets")
        def datasets():
            return [ds.describe() for ds in service._datasets.values()]

        @app.post("/sessions")
        def create_session(body: dict):
            dataset = service._datasets.get(body.get("dataset"))
            if dataset is None:
                raise HTTPException(404, f"unknown dataset {body.get('dataset')!r}")
            kind = body.get("kind", "")
            try:
                params = service._validate(dataset, kind, body.get("params", {}))
            except ParamError as exc:
                raise HTTPException(400, str(exc))
            with service._lock:
                sid = f"s{next(service._ids)}"
                service._sessions[sid] = _Session(sid, dataset, kind, params)
            return {"session": sid, "generation": 0}

        @app.put("/sessions/{sid}/params")
        def update_params(sid: str, body: dict):
            session = service._session(sid)
            try:
                params = service._validate(session.dataset, session.kind, body)
            except ParamError as exc:
                raise HTTPException(400, str(exc))
            return {"generation": session.bump(params)}

        @app.get("/sessions/{sid}/tile")
        def tile(sid: str, x: int, y: int, gen: int | None = None):
            session = service._session(sid)
            return service._tile_response(session, x, y, gen)

        @app.get("/sessions/{sid}/status")
        def status(sid: str):
            session = service._session(sid)
            cols, rows = session.grid(service.tile_size)
            with session.lock:
                final = sum(1 for (g, _, _), buf in session.tiles.items()
                            if g == session.generation and buf.state == "final")
            occupancy = {str(loc): store.occupancy()
                         for loc, store in service._engine.stores.stores.items()}
            return {
                "generation": session.generation,
                "tiles": {"total": cols * rows, "final": final},
                "bytes_read": service._bytes_read(),
                "occupancy": occupancy,
            }

        return app

    def _session(self, sid: str) -> _Session:
        session = self._sessions.get(sid)
        if session is None:
            raise HTTPException(404, f"unknown session {sid!r}")
        return session

    def _tile_response(self, session: _Session, x: int, y: int, gen: int | None):
        current = session.generation
        if gen is None:
            gen = current
        if gen != current:
            raise HTTPException(409, {"current_generation": current},
                                headers={"X-Generation": str(current)})
        cols, rows = session.grid(self.tile_size)
        if not (0 <= x < cols and 0 <= y < rows):
            raise HTTPException(400, f"tile ({x}, {y}) outside {cols}x{rows} grid")
        key = (gen, x, y)
        with session.lock:
            buffered = session.tiles.get(key)
            if buffered is not None and buffered.state == "final":
                return _png_response(buffered, gen)
            event = session.events.setdefault(key, threading.Event())
            if key not in session.queued:
                session.queued.add(key)
                event.clear()
                self._commands.put((session, gen, key))
            if buffered is not None:
                return _png_response(buffered, gen)  # current best, refinement queued
        event.wait(RENDER_TIMEOUT_S)
        with session.lock:
            buffered = session.tiles.get(key)
            if buffered is not None:
                return _png_response(buffered, gen)
            error = session.errors.pop(key, None)
        if error is not None:
            raise HTTPException(500, f"tile render failed: {error}")
        if session.generation != gen:
            raise HTTPException(409, {"current_generation": session.generation},
                                headers={"X-Generation": str(session.generation)})
        raise HTTPException(503, "tile not ready")

    def _bytes_read(self) -> int:
        total = 0
        for dataset in self._datasets.values():
            for node in dataset.pyramid.nodes:
                total += self._engine.stats.computed(node) * node.md.chunk_payload_bytes()
        return total


# ---------------------------------------------------------------------------
# helpers


def _to_rgba8(arr: np.ndarray, element_type, tf: tuple) -> np.ndarray:
    """Map a resolved view tile to RGBA8 for PNG transport.

    RGBA sources pass through (floats quantized); scalar sources become an
    opaque grey ramp over the session's tf window, so slice and image views
    of raw data are directly displayable.
    """
    if element_type.lanes == 4:
        if element_type.scalar.is_float:
            return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        return np.ascontiguousarray(arr).astype(np.uint8)
    lo, hi = tf
    t = np.clip((arr.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    grey = np.rint(t * 255.0).astype(np.uint8)
    return np.stack([grey, grey, grey, np.full_like(grey, 255)], axis=-1)


def _default_tf(element_type) -> tuple:
    if element_type.scalar.is_float:
        return (0.0, 1.0)
    return (0.0, float(element_type.scalar.bounds()[1]))


def _encode_png(arr: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr), "RGBA").save(buf, format="PNG")
    return buf.getvalue()


def _png_response(buffered: _TileBuffer, gen: int) -> Response:
    return Response(content=buffered.png, media_type="image/png",
                    headers={"X-State": buffered.state, "X-Generation": str(gen)})


def _time_slice(pyramid: LodPyramid, index: int) -> LodPyramid:
    """3-D pyramid at one time step of a 4-D pyramid (dim 0 is time)."""
    base = pyramid.embedding(0).spacing[0]
    levels = []
    for k in range(pyramid.num_levels):
        node = pyramid.node(k)
        factor = node.embedding.spacing[0] / base
        idx = min(int(index / factor), node.md.size[0] - 1)
        sliced = slice_node(node, 0, idx)
        levels.append((sliced, sliced.embedding))
    return LodPyramid(tuple(levels))


def _frame(value) -> tuple:
    try:
        wdt, hgt = (int(v) for v in value)
    except (TypeError, ValueError):
        raise ParamError(f"frame must be [width, height], got {value!r}")
    if not (0 < wdt <= MAX_FRAME_DIM and 0 < hgt <= MAX_FRAME_DIM):
        raise ParamError(f"frame dims must be in 1..{MAX_FRAME_DIM}")
    return (wdt, hgt)


def _pan(value) -> tuple:
    try:
        px, py = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ParamError(f"pan must be [x, y], got {value!r}")
    return (px, py)


def _zoom(value) -> float:
    try:
        zoom = float(value)
    except (TypeError, ValueError):
        raise ParamError(f"zoom must be a number, got {value!r}")
    if not np.isfinite(zoom) or zoom <= 0:
        raise ParamError(f"zoom must be positive, got {value!r}")
    return zoom


def _index(value, size: int, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ParamError(f"{name} must be an integer, got {value!r}")
    if not 0 <= value < size:
        raise ParamError(f"{name} {value} out of range [0, {size})")
    return value


def _fov(value) -> float:
    try:
        fov = float(value)
    except (TypeError, ValueError):
        raise ParamError(f"fov must be a number, got {value!r}")
    if not 0.0 < fov < 180.0:
        raise ParamError("fov must be in (0, 180) degrees")
    return fov


def _tf(value) -> tuple:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ParamError(f"tf must be [lo, hi], got {value!r}")
    return (lo, hi)


def _camera(value):
    if value == "auto":
        return "auto"
    if not isinstance(value, dict) or "eye" not in value or "look_at" not in value:
        raise ParamError("camera must be 'auto' or {eye, look_at[, up]}")
    for field in ("eye", "look_at", "up"):
        if field in value:
            triple = value[field]
            if not (isinstance(triple, (list, tuple)) and len(triple) == 3
                    and all(isinstance(v, (int, float)) for v in triple)):
                raise ParamError(f"camera {field} must be an [x, y, z] triple")
    return value
