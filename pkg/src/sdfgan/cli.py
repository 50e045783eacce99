"""Command-line entry point: sdfgan <command> [--flags].

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("sdfgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(directory: Path, args: argparse.Namespace, inputs: dict, outputs: list, started: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "version": __version__,
        "config": str(getattr(args, "config", None) or ""),
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
        "started": started,
        "finished": _now(),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


# ------------------------------------------------------------------ datasets


def _load_shapes(args, dataset_attr="dataset", procedural_attr="procedural"):
    from .shapes import load_dataset, procedural_dataset
    dataset = getattr(args, dataset_attr, None)
    procedural = getattr(args, procedural_attr, None)
    if dataset:
        path = Path(dataset)
        if not path.exists():
            raise DataError(f"dataset {path} not found")
        try:
            shapes = load_dataset(path)
        except (ValueError, OSError) as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc
        if not shapes:
            raise DataError(f"dataset {path} is empty")
        return shapes, str(path)
    if procedural:
        rng = np.random.default_rng([args.seed, 17])
        return procedural_dataset(procedural, args.count, rng), f"procedural:{procedural}:{args.count}"
    raise UsageError(f"one of --{dataset_attr.replace('_', '-')} or --{procedural_attr.replace('_', '-')} is required")


def _load_generator(path):
    from .trainer import load_generator
    try:
        return load_generator(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc


def _mesh_from_source(source, resolution):
    from .surfacing import marching_cubes
    return marching_cubes(source, resolution)


# ------------------------------------------------------------------ commands


def cmd_preprocess(args) -> list:
    from .mesh2sdf import CameraRig, preprocess_meshes
    from .shapes import write_sdfd
    src = Path(args.input_dir)
    paths = sorted(p for p in src.glob("*.obj")) if src.is_dir() else []
    if not paths:
        raise DataError(f"no OBJ files in {src}")
    rig = CameraRig(n_views=args.views, resolution=args.resolution)
    sets, report = preprocess_meshes(paths, np.random.default_rng(args.seed), rig,
                                     n_uniform=args.samples, n_surface=args.surface_samples)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    rejects = out.with_suffix(".rejects.txt")
    rejects.write_text("".join(f"{name}\t{reason}\n" for name, reason in report.rejected))
    unreadable = sum(r.startswith("unreadable") for _, r in report.rejected)
    if unreadable == len(paths):
        raise DataError("no mesh could be read")
    write_sdfd(out, sets)
    log.info("accepted %d, rejected %d", len(report.accepted), len(report.rejected))
    return [out, rejects]


def cmd_train(args) -> list:
    from .trainer import TrainConfig, Trainer
    overrides = {"discriminator": args.discriminator, "seed": args.seed, "steps": args.steps,
                 "learning_rate": args.learning_rate, "batch_size": args.batch_size}
    try:
        if args.resume:
            meta = Path(args.resume).with_suffix(".json")
            if not meta.exists():
                raise DataError(f"checkpoint {args.resume} not found")
            cfg = TrainConfig.from_text(json.loads(meta.read_text())["config"])
        elif args.config:
            cfg = TrainConfig.from_file(args.config, **overrides)
        else:
            cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    args.seed = cfg.seed
    shapes, _ = _load_shapes(args)
    out = Path(args.output)
    try:
        trainer = Trainer.load(args.resume, shapes, steps=args.steps) if args.resume else Trainer(cfg, shapes)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(trainer.config.to_text())
    trainer.train(out, log_every=args.log_every)
    return [out / "metrics.csv", out / "last.sgpc", out / "best.sgpc"]


def cmd_sample(args) -> list:
    from .mesh import write_obj, write_ply
    gen, cfg = _load_generator(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        z = rng.standard_normal(cfg.latent_dim)
        mesh = _mesh_from_source(gen.sdf_source(z), args.resolution)
        if mesh.is_empty:
            log.warning("sample %d has no zero crossing; skipped", i)
            continue
        path = out / f"sample_{i:03d}.{args.format}"
        (write_ply if args.format == "ply" else write_obj)(path, mesh)
        written.append(path)
    return written


def _find_shape(shapes, shape_id):
    for s in shapes:
        if s.shape_id == shape_id:
            return s
    raise DataError(f"shape {shape_id!r} not in dataset")


def cmd_interpolate(args) -> list:
    from .generator import fit_latent
    from .surfacing import Camera, interpolate_latents, sphere_trace, write_ppm
    gen, cfg = _load_generator(args.checkpoint)
    shapes, _ = _load_shapes(args)
    rng = np.random.default_rng(args.seed)
    latents = []
    for sid in (args.shape_a, args.shape_b):
        shape = _find_shape(shapes, sid)
        pts, vals = shape.sample_uniform(args.fit_points, rng)
        z, hist = fit_latent(gen, pts, vals, steps=args.fit_steps, restarts=args.fit_restarts, rng=rng)
        if not hist or not np.isfinite(hist[-1]) or not np.all(np.isfinite(z)):
            raise FloatingPointError(f"latent fit for {sid!r} diverged (history {hist[-3:]})")
        log.info("fitted %s: L1 %.4f", sid, hist[-1])
        latents.append(z)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    cam = Camera()
    written = []
    for i, z in enumerate(interpolate_latents(latents[0], latents[1], args.frames)):
        img = sphere_trace(gen.sdf_source(z), cam, args.width, args.height)
        path = out / f"frame_{i:02d}.ppm"
        write_ppm(path, img)
        written.append(path)
    return written


def cmd_render(args) -> list:
    from .surfacing import Camera, sphere_trace, write_ppm
    gen, cfg = _load_generator(args.checkpoint)
    z = np.random.default_rng(args.seed).standard_normal(cfg.latent_dim)
    img = sphere_trace(gen.sdf_source(z), Camera(), args.width, args.height)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, img)
    return [out]


def cmd_upscale_demo(args) -> list:
    from .mesh import write_ply
    from .surfacing import grid_upscale_eval
    gen, cfg = _load_generator(args.checkpoint)
    z = np.random.default_rng(args.seed).standard_normal(cfg.latent_dim)
    result = grid_upscale_eval(gen.sdf_source(z), args.low, args.high)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"low_{args.low}.ply", f"upscaled_{args.low}_to_{args.high}.ply", f"direct_{args.high}.ply"]
    written = []
    for name, mesh in zip(names, result.meshes()):
        write_ply(out / name, mesh)
        written.append(out / name)
    return written


def _clouds_from_meshes(meshes, n, rng):
    from .metrics import sample_surface
    clouds = []
    for m in meshes:
        if m.is_empty:
            log.warning("skipping empty mesh")
            continue
        clouds.append(sample_surface(m, n, rng))
    return clouds


def _read_mesh_dir(path):
    from .mesh import read_obj, read_ply
    d = Path(path)
    files = sorted(list(d.glob("*.ply")) + list(d.glob("*.obj"))) if d.is_dir() else []
    if not files:
        raise DataError(f"no meshes in {d}")
    return [read_ply(f) if f.suffix == ".ply" else read_obj(f) for f in files]


def cmd_evaluate(args) -> list:
    from .metrics import evaluate_clouds
    rng = np.random.default_rng(args.seed)
    if args.mesh_dir:
        generated = _read_mesh_dir(args.mesh_dir)
    elif args.checkpoint:
        gen, cfg = _load_generator(args.checkpoint)
        generated = [_mesh_from_source(gen.sdf_source(rng.standard_normal(cfg.latent_dim)), args.resolution)
                     for _ in range(args.samples)]
    else:
        raise UsageError("one of --checkpoint or --mesh-dir is required")
    if args.reference_mesh_dir:
        reference = _read_mesh_dir(args.reference_mesh_dir)
    else:
        shapes, _ = _load_shapes(args, "reference", "reference_procedural")
        reference = [_mesh_from_source(s.sdf, args.resolution) for s in shapes]
    gen_clouds = _clouds_from_meshes(generated, args.points, np.random.default_rng([args.seed, 1]))
    ref_clouds = _clouds_from_meshes(reference, args.points, np.random.default_rng([args.seed, 1]))
    if not gen_clouds or not ref_clouds:
        raise DataError("nothing to evaluate: no non-empty meshes")
    report = evaluate_clouds(gen_clouds, ref_clouds, exact_emd=not args.approximate_emd)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(args.label))
    text = out.with_suffix(".txt")
    text.write_text(report.to_text(args.label))
    print(report.to_text(args.label), end="")
    return [out, text]


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdfgan", description="Generative adversarial training of signed distance fields.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=0):
        sp.add_argument("--seed", type=int, default=seed)

    def dataset_flags(sp):
        sp.add_argument("--dataset", help="SDFD dataset file")
        sp.add_argument("--procedural", choices=["spheres", "boxes", "mixed"])
        sp.add_argument("--count", type=int, default=64, help="procedural shape count")

    sp = sub.add_parser("preprocess", help="OBJ directory -> SDFD dataset")
    sp.add_argument("--input-dir", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--resolution", type=int, default=1024, help="depth buffer size")
    sp.add_argument("--views", type=int, default=50)
    sp.add_argument("--samples", type=int, default=64 ** 3, help="uniform samples per shape")
    sp.add_argument("--surface-samples", type=int, default=100_000)
    common(sp)

    sp = sub.add_parser("train", help="adversarial training")
    dataset_flags(sp)
    sp.add_argument("--config", help="key=value training config")
    sp.add_argument("--output", required=True)
    sp.add_argument("--discriminator", choices=["voxel", "point", "point-refined"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--resume", help="checkpoint prefix to continue from")
    sp.add_argument("--log-every", type=int, default=50)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("sample", help="meshes from fresh latent draws")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--format", choices=["ply", "obj"], default="ply")
    sp.add_argument("--output", required=True)
    common(sp)

    sp = sub.add_parser("interpolate", help="render a latent interpolation between two shapes")
    sp.add_argument("--checkpoint", required=True)
    dataset_flags(sp)
    sp.add_argument("--shape-a", required=True)
    sp.add_argument("--shape-b", required=True)
    sp.add_argument("--frames", type=int, default=5)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--fit-steps", type=int, default=300)
    sp.add_argument("--fit-points", type=int, default=4096)
    sp.add_argument("--fit-restarts", type=int, default=2)
    sp.add_argument("--output", required=True)
    common(sp)

    sp = sub.add_parser("render", help="sphere-trace one generated shape")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--width", type=int, default=256)
    sp.add_argument("--height", type=int, default=256)
    sp.add_argument("--output", required=True)
    common(sp)

    sp = sub.add_parser("upscale-demo", help="low raster vs trilinear upscale vs direct evaluation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--low", type=int, default=8)
    sp.add_argument("--high", type=int, default=128)
    sp.add_argument("--output", required=True)
    common(sp)

    sp = sub.add_parser("evaluate", help="JSD / MMD / COV report")
    sp.add_argument("--checkpoint")
    sp.add_argument("--mesh-dir")
    sp.add_argument("--samples", type=int, default=16, help="generated shapes when using --checkpoint")
    sp.add_argument("--reference", help="SDFD reference dataset")
    sp.add_argument("--reference-procedural", choices=["spheres", "boxes", "mixed"])
    sp.add_argument("--reference-mesh-dir")
    sp.add_argument("--count", type=int, default=16, help="procedural reference count")
    sp.add_argument("--resolution", type=int, default=32, help="Marching Cubes resolution")
    sp.add_argument("--points", type=int, default=2048)
    sp.add_argument("--approximate-emd", action="store_true")
    sp.add_argument("--label", default="model")
    sp.add_argument("--output", required=True)
    common(sp)
    return p


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "render": cmd_render,
    "upscale-demo": cmd_upscale_demo,
    "evaluate": cmd_evaluate,
}


def _manifest_dir(args) -> Path:
    out = Path(args.output)
    return out if args.command in ("train", "sample", "interpolate", "upscale-demo") else out.parent


def main(argv: list[str] | None = None) -> int:
    from .trainer import NumericalError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sdfgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        outputs = COMMANDS[args.command](args)
        inputs = {k: v for k, v in vars(args).items()
                  if k in ("dataset", "procedural", "checkpoint", "input_dir", "mesh_dir", "reference",
                           "reference_procedural", "reference_mesh_dir", "resume") and v}
        write_manifest(_manifest_dir(args), args, inputs, outputs, started)
    except UsageError as exc:
        print(f"sdfgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"sdfgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"sdfgan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
