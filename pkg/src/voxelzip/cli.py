"""voxelzip command line.

Results go to stdout (aligned text, or one JSON document with ``--json``);
progress goes to stderr.  Failures exit nonzero and print ``error: <Token>: msg``
where the token is the exception class name.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import _backend
from .errors import AlreadyHasNcb, InputNotFound, InvalidConfig, VoxelZipError

JSON_SCHEMA_VERSION = 1
EXIT_USAGE = 64


class UsageError(VoxelZipError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ---------------------------------------------------------------------------

def _workers_default() -> int:
    from .render import default_workers
    return default_workers()


def _scale(text) -> Fraction:
    try:
        return Fraction(str(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a fraction: {text!r}") from None


def _color(text):
    named = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}
    if str(text).lower() in named:
        return named[str(text).lower()]
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"background must be white, black or r,g,b: {text!r}") from None
    if len(vals) != 3 or not all(0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("background must be three values in [0, 1]")
    return vals


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputNotFound(f"no such file: {p}")
    return p


def _progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Fraction):
        return str(o)
    raise TypeError(repr(o))


def _finite(v):
    # JSON has no inf/nan literals; encode them as strings
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_finite(x) for x in v]
    return v


def _emit(args, doc: dict, text: str):
    if args.json:
        doc = {"schema": JSON_SCHEMA_VERSION, "command": args.command, "ok": True, **doc}
        print(json.dumps(_finite(doc), sort_keys=True, default=_json_default))
    else:
        print(text)


def _march(args):
    from .render import MarchConfig
    return MarchConfig(step=args.step, termination_threshold=args.termination_threshold,
                       early_termination=not args.no_early_termination,
                       step_multiplier=args.step_multiplier)


def load_grid_or_container(path: Path, use_ncb: bool = True, timings: dict | None = None):
    """Return a VoxelGrid from a VXGR file or a restored NCBC container."""
    from .compress import overwrite, restore
    from .container import MAGIC, RAW_MAGIC, decode_container, decode_raw_grid
    from .errors import BadMagic
    from .ncb import ncb_refine_grid

    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    data = path.read_bytes()
    if data[:4] == RAW_MAGIC:
        grid = decode_raw_grid(data)
        timings["decode_ms"] = (time.perf_counter() - t0) * 1e3
        return grid
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: neither an NCBC container nor a VXGR grid")
    model, ncb = decode_container(data)
    timings["decode_ms"] = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    grid = restore(model, use_model_ncb=False, overwrite_important=False)
    timings["upsample_ms"] = (time.perf_counter() - t0) * 1e3
    if ncb is not None and use_ncb:
        t0 = time.perf_counter()
        grid = ncb_refine_grid(ncb, grid)
        timings["ncb_ms"] = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    if len(model.important):
        grid = overwrite(grid, model.important)
    timings["overwrite_ms"] = (time.perf_counter() - t0) * 1e3
    return grid


# -- commands --------------------------------------------------------------------------

def cmd_synth(args):
    from .container import save_raw_grid
    from .synth import SceneSpec, generate_scene

    spec = SceneSpec.make(args.kind, args.size, args.occupancy, args.sh_degree, args.seed)
    grid = generate_scene(spec)
    n = save_raw_grid(args.out, grid, args.precision)
    occ = grid.occupied / grid.dims.size
    _emit(args, {"path": str(args.out), "bytes": n, "occupied": grid.occupied, "occupancy": occ,
                 "scene": spec.to_dict()},
          f"wrote {args.out}: {spec.kind.value} {args.size}^3, {grid.occupied} occupied "
          f"({occ:.3f}), {n} bytes")
    return 0


def cmd_compress(args):
    from .compress import CompressionConfig, compress
    from .container import load_raw_grid, save_container, storage_report

    grid = load_raw_grid(_input(args.input))
    cfg = CompressionConfig(scale_color=args.scale_color, scale_density=args.scale_density,
                            retain_fraction=args.retain, importance_rays=args.rays,
                            precision=args.precision, probe_cameras=args.probes, march=_march(args))
    t0 = time.perf_counter()
    model = compress(grid, config=cfg, workers=args.workers)
    wall = (time.perf_counter() - t0) * 1e3
    save_container(args.output, model)
    report = storage_report(model)
    _emit(args, {"path": str(args.output), "report": report.to_dict(), "retained": len(model.important),
                 "wall_ms": wall},
          report.table() + f"\nretained   {len(model.important)} voxels\ncompress   {wall:.1f} ms")
    return 0


def cmd_train_ncb(args):
    from .compress import restore
    from .container import load_container, load_raw_grid, save_container, storage_report
    from .ncb import TrainConfig, train_ncb

    container = _input(args.container)
    source = load_raw_grid(_input(args.source))
    model, ncb = load_container(container)
    if ncb is not None and not args.overwrite:
        raise AlreadyHasNcb(f"{container} already holds a network; pass --overwrite to replace it")
    cfg = TrainConfig.desk(total_iters=args.iters, batch_voxels=args.batch, lr=args.lr,
                           decay_every=args.decay_every, seed=args.seed, bandwidth=args.bandwidth,
                           l_count=args.frequencies, precision=args.ncb_precision,
                           log_every=args.log_every, lambda_c=args.lambda_c,
                           lambda_sigma=args.lambda_sigma)
    plain = restore(model, use_model_ncb=False, overwrite_important=False)
    if plain.mask != source.mask or plain.dims != source.dims:
        raise InvalidConfig("source grid does not match the container's mask and dims")
    history: list = []
    t0 = time.perf_counter()
    net = train_ncb(source, plain, cfg, history=history,
                    progress=lambda it, loss: _progress(f"iter {it + 1:>6d}  loss {loss:.6f}"))
    wall = (time.perf_counter() - t0) * 1e3
    save_container(container, replace(model, ncb=net), net)
    report = storage_report(model, net)
    start = history[0][1] if history else None
    end = history[-1][1] if history else None
    text = [f"trained {args.iters} iterations in {wall / 1e3:.1f} s"]
    if history:
        text.append(f"loss start {start:.6f}  end {end:.6f}")
    text.append(report.table())
    _emit(args, {"path": str(container), "iters": args.iters, "loss_start": start, "loss_end": end,
                 "history": [[it, loss] for it, loss in history], "wall_ms": wall,
                 "report": report.to_dict()}, "\n".join(text))
    return 0


def cmd_decompress(args):
    from .container import save_raw_grid

    timings: dict = {}
    grid = load_grid_or_container(_input(args.container), not args.no_ncb, timings)
    n = save_raw_grid(args.output, grid, args.precision)
    lines = [f"{k[:-3]:<10} {v:9.1f} ms" for k, v in timings.items()]
    _emit(args, {"path": str(args.output), "bytes": n, "occupied": grid.occupied, "timings_ms": timings},
          "\n".join(lines + [f"wrote {args.output} ({n} bytes)"]))
    return 0


def cmd_render(args):
    from .cameras import heldout_cameras, icosahedral_directions, orbit_camera
    from .imageio import save_float_planar, save_png
    from .render import render_image

    timings: dict = {}
    grid = load_grid_or_container(_input(args.input), not args.no_ncb, timings)
    if args.view is not None:
        if not 0 <= args.view < 12:
            raise InvalidConfig("--view must be in [0, 12)")
        cam = orbit_camera(grid.dims.spatial, icosahedral_directions()[args.view], args.resolution)
    else:
        d = np.asarray(args.direction, dtype=np.float64)
        if not np.linalg.norm(d) > 0:
            raise InvalidConfig("--direction must be nonzero")
        cam = orbit_camera(grid.dims.spatial, d / np.linalg.norm(d), args.resolution)
    job = render_image(grid, cam, _march(args), args.workers, args.background)
    timings["render_ms"] = job.wall_ms
    save_png(args.out, job.image)
    if args.float_out:
        save_float_planar(args.float_out, job.image)
    lines = [f"{k[:-3]:<10} {v:9.1f} ms" for k, v in timings.items()]
    lines.append(f"samples    {job.total_samples}\nterminated {job.terminated_rays}\nwrote {args.out}")
    _emit(args, {"path": str(args.out), "float_path": str(args.float_out) if args.float_out else None,
                 "timings_ms": timings, "total_samples": job.total_samples,
                 "terminated_rays": job.terminated_rays, "backend": job.backend}, "\n".join(lines))
    return 0


def cmd_bench(args):
    from .cameras import heldout_cameras
    from .ladder import BASE, acceleration_ladder, format_ladder
    from .synth import SceneSpec, generate_scene

    if args.input:
        grid = load_grid_or_container(_input(args.input))
    else:
        grid = generate_scene(SceneSpec.make(args.scene, args.size, args.occupancy))
    cams = heldout_cameras(grid.dims.spatial, args.views, args.resolution)
    base = replace(BASE, step=args.step, termination_threshold=args.termination_threshold)
    out = {}
    texts = []
    for name in (args.backend or [_backend.NAME]):
        rows = acceleration_ladder(grid, cams, base, args.fine_step, args.background, args.workers,
                                   name, args.repeats)
        out[name] = [r.to_dict() for r in rows]
        texts.append(f"backend {name} (workers {args.workers})\n" + format_ladder(rows))
    _emit(args, {"ladders": out, "workers": args.workers}, "\n\n".join(texts))
    return 0


def cmd_ablate(args):
    from .ncb import TrainConfig
    from .synth import SceneSpec, downsample_grid, generate_scene, records_to_csv, retention_sweep, run_ablation

    spec = SceneSpec.make(args.scene, args.size, args.occupancy, seed=args.seed)
    grid = generate_scene(spec)
    configs = []
    if args.sweep in ("retention", "both"):
        configs += retention_sweep()
    if args.sweep in ("downsample", "both"):
        configs += downsample_grid(retain_fraction=0.0)
    tcfg = TrainConfig.desk(total_iters=args.ncb_iters) if args.ncb_iters else None
    records = run_ablation(grid, spec, configs, args.out, args.ncb_iters, tcfg, args.views,
                           args.resolution, background=args.background, workers=args.workers,
                           log=_progress)
    csv_text = records_to_csv(records)
    _emit(args, {"out": str(args.out) if args.out else None,
                 "records": [{**r.row()} for r in records]}, csv_text.rstrip("\n"))
    return 0


def cmd_inspect(args):
    from .container import decode_container, read_header, storage_report

    data = _input(args.container).read_bytes()
    header = read_header(data)
    model, ncb = decode_container(data)  # verifies every section
    report = storage_report(model, ncb)
    doc = {"header": header.to_dict(), "file_bytes": len(data), "occupied": model.full_mask.count,
           "ratio": report.ratio, "baseline_bytes": report.baseline_bytes,
           "ncb": None if ncb is None else {"params": ncb.n_params, "precision": ncb.precision.value,
                                            "frequencies": ncb.encoder.l_count}}
    h = header.to_dict()
    lines = [f"version        {h['version']}",
             f"dims           {'x'.join(str(d) for d in h['dims'])}",
             f"scales         color {h['scale_color']}  density {h['scale_density']}",
             f"precision      {h['precision']}",
             f"retained       {h['retain_count']}",
             f"occupied       {model.full_mask.count}",
             f"has_ncb        {h['has_ncb']}",
             f"{'section':<14} {'offset':>10} {'stored':>10} {'raw':>10} crc32"]
    for s in h["sections"]:
        lines.append(f"{s['name']:<14} {s['offset']:>10d} {s['compressed_len']:>10d} "
                     f"{s['raw_len']:>10d} {s['crc32']}")
    lines.append(f"total          {len(data)} bytes, ratio {report.ratio:.2f} vs F32 baseline")
    lines.append("checksums      ok")
    _emit(args, doc, "\n".join(lines))
    return 0


# -- parser ----------------------------------------------------------------------------

def _add_march(p, step=0.5, multiplier=2.0):
    p.add_argument("--step", type=float, default=step, help="base step in voxels")
    p.add_argument("--step-multiplier", type=float, default=multiplier)
    p.add_argument("--termination-threshold", type=float, default=0.01)
    p.add_argument("--no-early-termination", action="store_true")


def _add_common(p):
    p.add_argument("--json", action="store_true", help="print one JSON document on stdout")
    p.add_argument("--workers", type=int, default=_workers_default())
    p.add_argument("--config", type=Path, help="key=value file supplying defaults for this command")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxelzip", description="Compress, refine and render sparse voxel radiance grids.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a procedural scene as a VXGR grid")
    p.add_argument("out", type=Path)
    p.add_argument("--kind", default="checker", choices=["slab", "sphere_shell", "checker", "perlin_cloud"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occupancy", type=float, default=0.1)
    p.add_argument("--sh-degree", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", default="f32", choices=["f32", "f16"])
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress", help="VXGR grid -> NCBC container")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--scale-color", type=_scale, default=Fraction(1, 4))
    p.add_argument("--scale-density", type=_scale, default=Fraction(1, 2))
    p.add_argument("--retain", type=float, default=0.05, help="fraction of voxels kept verbatim")
    p.add_argument("--precision", default="f16", choices=["f32", "f16"])
    p.add_argument("--rays", type=int, default=20 * 64 * 64, help="importance probe rays")
    p.add_argument("--probes", type=int, default=20, help="importance probe cameras")
    _add_march(p)
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train-ncb", help="fit a refinement network and store it in the container")
    p.add_argument("container", type=Path)
    p.add_argument("source", type=Path, help="the original VXGR grid")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8192)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--decay-every", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bandwidth", type=float, default=8.0)
    p.add_argument("--frequencies", type=int, default=16)
    p.add_argument("--ncb-precision", default="f16", choices=["f32", "f16"])
    p.add_argument("--lambda-c", type=float, default=1.0)
    p.add_argument("--lambda-sigma", type=float, default=1.0)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--overwrite", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train_ncb)

    p = sub.add_parser("decompress", help="NCBC container -> VXGR grid")
    p.add_argument("container", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--no-ncb", action="store_true", help="skip network refinement")
    p.add_argument("--precision", default="f32", choices=["f32", "f16"])
    _add_common(p)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("render", help="render a container or grid to PNG")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--float-out", type=Path)
    view = p.add_mutually_exclusive_group()
    view.add_argument("--view", type=int, help="icosahedral view index 0..11")
    view.add_argument("--direction", type=float, nargs=3, default=(1.0, 0.6, 0.4))
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--background", type=_color, default=(1.0, 1.0, 1.0))
    p.add_argument("--no-ncb", action="store_true")
    _add_march(p)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="acceleration ladder vs a fine-step reference")
    p.add_argument("input", type=Path, nargs="?")
    p.add_argument("--scene", default="slab", choices=["slab", "sphere_shell", "checker", "perlin_cloud"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occupancy", type=float, default=0.1)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--fine-step", type=float, default=0.125)
    p.add_argument("--termination-threshold", type=float, default=0.01)
    p.add_argument("--background", type=_color, default=(1.0, 1.0, 1.0))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--backend", action="append", choices=_backend.available(),
                   help="repeatable; default is the active backend")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="retention / downsample sweeps on a procedural scene")
    p.add_argument("--scene", default="checker", choices=["slab", "sphere_shell", "checker", "perlin_cloud"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occupancy", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", default="both", choices=["retention", "downsample", "both"])
    p.add_argument("--ncb-iters", type=int, default=0)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--background", type=_color, default=(1.0, 1.0, 1.0))
    p.add_argument("--out", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump the header and verify every section")
    p.add_argument("container", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def read_config_file(path: Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Keys use flag names."""
    if not Path(path).is_file():
        raise InputNotFound(f"no such config file: {path}")
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser, sub_parser, argv, args):
    """Re-parse with config-file values as defaults; explicit flags still win."""
    values = read_config_file(args.config)
    actions = {a.dest: a for a in sub_parser._actions if a.option_strings}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("config", "help"):
            raise InvalidConfig(f"unknown config key {key!r}")
        act = actions[key]
        if act.const is True and act.nargs == 0:
            defaults[key] = _bool(raw)
        elif act.nargs in (3, "+"):
            defaults[key] = [act.type(v) if act.type else v for v in raw.replace(",", " ").split()]
        else:
            try:
                defaults[key] = act.type(raw) if act.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise InvalidConfig(f"config key {key}: {exc}") from None
            if act.choices is not None and defaults[key] not in act.choices:
                raise InvalidConfig(f"config key {key}: {raw!r} not in {list(act.choices)}")
    sub_parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _validate(args):
    if getattr(args, "workers", 1) < 1:
        raise InvalidConfig("--workers must be >= 1")
    for name in ("size", "views", "resolution", "iters", "batch", "rays", "probes", "repeats"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "iters" else 1):
            raise InvalidConfig(f"--{name} out of range: {v}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            sub_parser = parser._subparsers._group_actions[0].choices[args.command]
            args = _apply_config(parser, sub_parser, argv, args)
        _validate(args)
        return args.func(args)
    except VoxelZipError as exc:
        print(f"error: {exc.token}: {exc}", file=sys.stderr)
        if "--json" in argv:
            print(json.dumps({"schema": JSON_SCHEMA_VERSION, "ok": False, "error": exc.token,
                              "message": str(exc), "exit_code": exc.exit_code}, sort_keys=True))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
