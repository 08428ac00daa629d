"""Command line entry points.

Subcommands ingest raw dense arrays into chunked files, materialize LOD
pyramids offline, render single frames to PNG, print file and pyramid
metadata, and launch the HTTP tile service.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command is
deterministic for identical inputs and flags; only --timing output varies.
"""

from __future__ import annotations

import sys
import time

import click
import numpy as np

from .engine import Engine, EngineConfig, EngineError
from .model import ElementType, EmbeddingData, Scalar, TensorMetaData
from .render import CameraState, RaycasterConfig, TransferFunction, camera_for_volume, render_frame
from .store import StoreConfig, StoreError
from .tensorfile import build_lod_offline, import_raw, load_manifest, read_header

DEFAULT_RAM_BUDGET = 1 << 28  # 256 MiB


# ---------------------------------------------------------------------------
# flag parsing


def _dims(ctx, param, value):
    """'64x64x64' -> (64, 64, 64); None passes through for optional flags."""
    if value is None:
        return None
    try:
        dims = tuple(int(p) for p in value.lower().split("x"))
    except ValueError:
        dims = ()
    if not dims or any(d < 1 for d in dims):
        raise click.BadParameter(f"{value!r} is not a WxH... list of positive integers")
    return dims


def _floats(ctx, param, value):
    if value is None:
        return None
    try:
        return tuple(float(p) for p in value.split(","))
    except ValueError:
        raise click.BadParameter(f"{value!r} is not a comma-separated float list")


def _element_type(ctx, param, value):
    label, _, lanes = value.lower().partition("x")
    for scalar in Scalar:
        if scalar.label == label:
            try:
                return ElementType(scalar, int(lanes) if lanes else 1)
            except ValueError as exc:
                raise click.BadParameter(str(exc))
    known = ", ".join(s.label for s in Scalar)
    raise click.BadParameter(f"unknown element type {value!r} (scalars: {known})")


def _camera(ctx, param, value):
    """'auto' or 'ex,ey,ez/lx,ly,lz[/ux,uy,uz]'."""
    if value == "auto":
        return "auto"
    parts = value.split("/")
    if len(parts) not in (2, 3):
        raise click.BadParameter("expected 'auto' or eye/look-at[/up] point triples")
    triples = []
    for part in parts:
        triple = _floats(ctx, param, part)
        if len(triple) != 3:
            raise click.BadParameter(f"{part!r} is not an x,y,z triple")
        triples.append(triple)
    return triples


def _engine(ram_budget: int, device_budget: int = 0) -> Engine:
    caps = (device_budget,) if device_budget else ()
    stores = StoreConfig(ram_capacity=ram_budget, device_capacities=caps)
    return Engine(EngineConfig(stores=stores))


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(package_name="chunkcast")
def cli():
    """Out-of-core chunked tensor engine and progressive tile renderer."""


@cli.command("import")
@click.option("--input", "input_path", required=True, help="dense row-major little-endian array file")
@click.option("--output", "output_path", required=True, help="chunked file to write")
@click.option("--shape", required=True, callback=_dims, help="tensor size, e.g. 256x256x256")
@click.option("--chunk", required=True, callback=_dims, help="chunk size, e.g. 64x64x64")
@click.option("--type", "element_type", default="f32", callback=_element_type,
              show_default=True, help="element type, e.g. f32, u16, u8x4")
@click.option("--spacing", default=None, callback=_floats, help="element spacing per dim, e.g. 1,1,2.5")
def cmd_import(input_path, output_path, shape, chunk, element_type, spacing):
    """Rechunk a raw dense array file into a chunked tensor file."""
    if len(chunk) != len(shape):
        raise click.UsageError(f"--chunk has {len(chunk)} dims, --shape has {len(shape)}")
    if spacing is not None and len(spacing) != len(shape):
        raise click.UsageError(f"--spacing has {len(spacing)} entries, --shape has {len(shape)}")
    md = TensorMetaData(shape, chunk, element_type)
    embedding = EmbeddingData(spacing) if spacing is not None else None
    header = import_raw(input_path, output_path, md, embedding)
    click.echo(f"{output_path}: {md.num_chunks()} chunks of "
               f"{'x'.join(map(str, chunk))} {element_type}")
    return header


@cli.command("build-lod")
@click.option("--input", "input_path", required=True, help="chunked tensor file (level 0)")
@click.option("--output", "manifest_path", required=True, help="pyramid manifest to write")
@click.option("--const-table/--no-const-table", default=False,
              help="also materialize per-level constant-chunk tables")
@click.option("--smooth/--no-smooth", default=True, help="low-pass filter before halving")
@click.option("--ram-budget", type=int, default=DEFAULT_RAM_BUDGET, show_default=True)
def cmd_build_lod(input_path, manifest_path, const_table, smooth, ram_budget):
    """Materialize an LOD pyramid on disk, streaming level by level."""
    with _engine(ram_budget) as eng:
        manifest = build_lod_offline(input_path, manifest_path, eng,
                                     smooth=smooth, const_tables=const_table)
    click.echo(f"{manifest_path}: {manifest.num_levels} levels")


@cli.command("render")
@click.option("--manifest", "manifest_path", required=True, help="pyramid manifest")
@click.option("--output", "output_path", required=True, help="PNG to write")
@click.option("--frame", default="512x512", callback=_dims, show_default=True,
              help="frame size WxH")
@click.option("--tile", default=None, callback=_dims, help="tile size WxH [default: frame]")
@click.option("--fov", type=float, default=45.0, show_default=True,
              help="vertical field of view in degrees")
@click.option("--camera", default="auto", callback=_camera, show_default=True,
              help="'auto' or eye/look-at[/up] as x,y,z triples")
@click.option("--compositing", type=click.Choice(["dvr", "mop"]), default="dvr",
              show_default=True)
@click.option("--tf", default="0,1", callback=_floats, show_default=True,
              help="grey ramp transfer function as min,max")
@click.option("--es", type=click.Choice(["on", "off"]), default="off", show_default=True,
              help="empty-space skipping via constant-chunk tables")
@click.option("--ram-budget", type=int, default=DEFAULT_RAM_BUDGET, show_default=True)
@click.option("--device-budget", type=int, default=0, show_default=True,
              help="device store capacity for staged bricks (0: render from RAM)")
@click.option("--timing", is_flag=True, help="print cold-cache wall time and brick bytes read")
def cmd_render(manifest_path, output_path, frame, tile, fov, camera, compositing,
               tf, es, ram_budget, device_budget, timing):
    """Render one frame of a pyramid to a PNG image."""
    from PIL import Image

    if len(frame) != 2:
        raise click.UsageError("--frame takes WxH")
    if tile is not None and len(tile) != 2:
        raise click.UsageError("--tile takes WxH")
    if len(tf) != 2:
        raise click.UsageError("--tf takes min,max")
    frame_size = (frame[1], frame[0])  # rows x cols
    tile_size = (tile[1], tile[0]) if tile else frame_size

    manifest = load_manifest(manifest_path)
    pyramid = manifest.open_pyramid()
    finest = pyramid.node(0)
    if camera == "auto":
        cam = camera_for_volume(finest.md, pyramid.embedding(0), fov_deg=fov)
    else:
        up = camera[2] if len(camera) == 3 else (0.0, 0.0, 1.0)
        cam = CameraState(eye=camera[0], look_at=camera[1], up=up, fov_deg=fov)
    config = RaycasterConfig(compositing=compositing, use_const_table=(es == "on"))
    tables = None
    if es == "on":
        stored = [manifest.open_const_table(k) for k in range(manifest.num_levels)]
        if all(t is not None for t in stored):
            tables = stored  # otherwise derive them from the levels

    with _engine(ram_budget, device_budget) as eng:
        start = time.perf_counter()
        pixels = render_frame(eng, pyramid, cam, config, TransferFunction(*tf),
                              frame_size, tile_size, const_tables=tables)
        wall = time.perf_counter() - start
        brick_bytes = sum(eng.stats.computed(node) * node.md.chunk_payload_bytes()
                          for node in pyramid.nodes)
    Image.fromarray(np.ascontiguousarray(pixels), "RGBA").save(output_path, format="PNG")
    if timing:
        click.echo(f"frame {frame[0]}x{frame[1]}: {wall:.3f} s, {brick_bytes} brick bytes read")


@cli.command("info")
@click.argument("path")
def cmd_info(path):
    """Print metadata of a chunked file or pyramid manifest."""
    if _looks_like_manifest(path):
        manifest = load_manifest(path)
        click.echo(f"{path}: pyramid, {manifest.num_levels} levels")
        for k, level in enumerate(manifest.levels):
            header = read_header(level.path)
            md = header.md
            click.echo(f"  level {k}: {_fmt_dims(md.size)} {md.element_type}, "
                       f"chunks {_fmt_dims(md.chunk_size)} grid {_fmt_dims(md.chunk_grid_dims())}, "
                       f"spacing {','.join(f'{s:g}' for s in header.embedding.spacing)}"
                       + (", const table" if level.const_table else ""))
        return
    header = read_header(path)
    md = header.md
    stored = sum(1 for off in header.offsets if off)
    click.echo(f"{path}: {_fmt_dims(md.size)} {md.element_type}")
    click.echo(f"  chunks: {_fmt_dims(md.chunk_size)}, grid {_fmt_dims(md.chunk_grid_dims())}, "
               f"{stored}/{md.num_chunks()} stored")
    click.echo(f"  spacing: {','.join(f'{s:g}' for s in header.embedding.spacing)}")


def _looks_like_manifest(path) -> bool:
    try:
        with open(path, "rb") as f:
            return f.read(1) == b"{"
    except OSError:
        return False


def _fmt_dims(dims) -> str:
    return "x".join(str(int(d)) for d in dims)


@cli.command("serve")
@click.option("--manifest", "manifest_paths", multiple=True, required=True,
              help="pyramid manifest to expose (repeatable)")
@click.option("--listen", default="127.0.0.1:8000", show_default=True, help="host:port")
@click.option("--tile-size", type=int, default=512, show_default=True)
@click.option("--ram-budget", type=int, default=DEFAULT_RAM_BUDGET, show_default=True)
@click.option("--device-budget", type=int, default=0, show_default=True)
def cmd_serve(manifest_paths, listen, tile_size, ram_budget, device_budget):
    """Serve datasets over HTTP for interactive viewers."""
    import uvicorn

    from .service import TileService

    host, _, port_text = listen.rpartition(":")
    if not host or not port_text.isdigit():
        raise click.UsageError(f"--listen expects host:port, got {listen!r}")
    service = TileService(dict(_named_manifests(manifest_paths)), tile_size=tile_size,
                          ram_budget=ram_budget, device_budget=device_budget)
    try:
        uvicorn.run(service.app, host=host, port=int(port_text), log_level="warning")
    finally:
        service.close()


def _named_manifests(paths):
    for path in paths:
        manifest = load_manifest(path)  # validate before the server starts
        name = path.rsplit("/", 1)[-1]
        name = name[:-5] if name.endswith(".json") else name
        yield name, manifest


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except (EngineError, StoreError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
