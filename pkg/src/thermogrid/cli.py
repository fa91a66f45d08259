"""Command line entry point: ``thermogrid <command> [flags]``.

Commands: gen-synthetic, train, render, extract-mesh, simulate, evaluate.
Every run writes a JSON manifest listing the command, effective config and
its hash, seed, inputs, outputs and wall time. Exit codes: 0 success,
2 usage error, 3 data error, 4 numerical failure. Outputs written before a
failure are removed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from .camera import PoseFileError, read_poses
from .fem import ConvergenceError, MaterialParams, simulate
from .mesh import EmptyReconstructionError, VTKFormatError, extract_mesh, read_vtk, write_vtk
from .metrics import evaluate_views, write_metrics_csv
from .optimization import NonFiniteLossError, TrainConfig, train, write_loss_csv
from .renderer import RGB, THERMAL, render_image
from .scene_io import (SceneError, SyntheticSpec, generate_synthetic, load_scene, read_rgb_png,
                       read_thermal_png, slab_spec, write_rgb_png, write_thermal_png)
from .validation import check_percent
from .voxel_field import load_checkpoint, save_checkpoint

log = logging.getLogger("thermogrid")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Run:
    """Tracks the artifacts of one command so they can be listed or rolled back."""

    def __init__(self, command: str, argv: List[str]):
        self.command = command
        self.argv = argv
        self.inputs: List[str] = []
        self.outputs: List[Path] = []
        self.created_dirs: List[Path] = []
        self.config: dict = {}
        self.seed: Optional[int] = None
        self.start = time.perf_counter()

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing input: {path}")
        self.inputs.append(str(path))
        return path

    def directory(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.created_dirs.extend(reversed(missing))
        return path

    def output(self, path) -> Path:
        path = Path(path)
        self.directory(path.parent)
        self.outputs.append(path)
        return path

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def write_manifest(self, path) -> Path:
        path = self.output(path)
        doc = {
            "tool": "thermogrid",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": [str(p) for p in self.outputs],
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    def rollback(self) -> None:
        for p in self.outputs:
            if p.is_file():
                p.unlink()
        for d in reversed(self.created_dirs):
            if d.is_dir():
                shutil.rmtree(d, ignore_errors=True)


def _read_json(run: Run, path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(run.input(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _override(base: dict, args, mapping: dict) -> dict:
    out = dict(base)
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


# -- commands -----------------------------------------------------------------

def cmd_gen_synthetic(args, run: Run) -> None:
    base = slab_spec().to_dict()
    base.update(_read_json(run, args.config))
    cfg = _override(base, args, {"seed": "seed", "dims": "dims", "n_train": "n_train", "n_test": "n_test",
                                 "width": "width", "height": "height", "noise": "noise"})
    try:
        spec = SyntheticSpec.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    run.config, run.seed = spec.to_dict(), spec.seed
    out = run.directory(args.out)
    result = generate_synthetic(spec, out)
    run.outputs.extend(result.paths)
    run.write_manifest(out / "manifest.json")
    print(f"wrote {len(result.scene.pairs)} views to {out}")


def cmd_train(args, run: Run) -> None:
    base = _read_json(run, args.config)
    cfg = _override(base, args, {"iterations": "iterations", "dims": "dims", "batch_size": "batch_size",
                                 "seed": "seed", "lam": "lam", "tv_rgb": "tv_rgb",
                                 "tv_thermal": "tv_thermal", "lr_density": "lr_density",
                                 "lr_sh": "lr_sh", "lr_temperature": "lr_temperature",
                                 "lr_background": "lr_background", "lr_final_ratio": "lr_final_ratio",
                                 "background_shape": "background_shape"})
    try:
        config = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    run.config, run.seed = config.to_dict(), config.seed
    scene = load_scene(run.input(args.scene))
    out = run.directory(args.out)
    result = train(scene, config, log_every=args.log_every)
    save_checkpoint(run.output(out / "checkpoint.npz"), result.grid, result.background,
                    config=config.to_dict(), scene=str(args.scene))
    write_loss_csv(run.output(out / "loss.csv"), result.history)
    run.output(out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    run.write_manifest(out / "manifest.json")
    final = result.history[-1].total if result.history else float("nan")
    print(f"trained {config.iterations} iterations, final loss {final:.6g}")


def _views(run: Run, args):
    if args.poses is not None:
        intr, frames = read_poses(run.input(args.poses))
        return intr, [(f.name, f.pose) for f in frames]
    scene = load_scene(run.input(args.scene))
    names = {"train": scene.train, "test": scene.test, "all": scene.train + scene.test}[args.split]
    return scene.intrinsics, [(n, scene.pairs[n].pose) for n in names]


def cmd_render(args, run: Run) -> None:
    if (args.scene is None) == (args.poses is None):
        raise UsageError("render needs exactly one of --scene or --poses")
    grid, background, _ = load_checkpoint(run.input(args.checkpoint))
    intr, views = _views(run, args)
    run.config = {"split": args.split, "n_views": len(views)}
    out = run.directory(args.out)
    for name, pose in views:
        rgb = render_image(grid, intr, pose, RGB, background=background).data
        th = render_image(grid, intr, pose, THERMAL, background=background).data
        write_rgb_png(run.output(out / "rgb" / f"{name}.png"), rgb)
        write_thermal_png(run.output(out / "thermal" / f"{name}.png"), th)
    run.write_manifest(out / "manifest.json")
    print(f"rendered {len(views)} views to {out}")


def cmd_extract_mesh(args, run: Run) -> None:
    t = check_percent(args.t_percent)
    run.config = {"t_percent": t, "tets": bool(args.tets)}
    grid, _, _ = load_checkpoint(run.input(args.checkpoint))
    mesh = extract_mesh(grid, t, args.tets)
    out = Path(args.out)
    write_vtk(mesh, run.output(out))
    run.write_manifest(out.with_name(out.name + ".manifest.json"))
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_cells} {mesh.cell_type} cells -> {out}")


def cmd_simulate(args, run: Run) -> None:
    base = {"steps": 10, "dt": None, "conductivity": 1.0, "density": 1.0, "specific_heat": 1.0}
    base.update(_read_json(run, args.config))
    cfg = _override(base, args, {"steps": "steps", "dt": "dt", "conductivity": "conductivity",
                                 "density": "density", "specific_heat": "specific_heat"})
    unknown = set(cfg) - {"steps", "dt", "conductivity", "density", "specific_heat"}
    if unknown:
        raise UsageError(f"unknown simulation config keys: {sorted(unknown)}")
    try:
        material = MaterialParams(float(cfg["conductivity"]), float(cfg["density"]),
                                  float(cfg["specific_heat"]))
        steps = int(cfg["steps"])
        if steps < 0 or (cfg["dt"] is not None and not float(cfg["dt"]) > 0):
            raise ValueError("steps must be >= 0 and dt > 0")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation config: {exc}") from exc
    run.config = cfg
    mesh = read_vtk(run.input(args.mesh))
    out = run.directory(args.out)
    result = simulate(mesh, material, steps, cfg["dt"], out_dir=out)
    run.outputs.extend(result.paths)
    run.write_manifest(out / "manifest.json")
    final = result.final.nodal_temperature
    print(f"simulated {steps} steps (dt {result.dt:.6g}); final range "
          f"[{final.min():.4f}, {final.max():.4f}] C")


def cmd_evaluate(args, run: Run) -> None:
    if (args.renders is None) == (args.checkpoint is None):
        raise UsageError("evaluate needs exactly one of --renders or --checkpoint")
    scene = load_scene(run.input(args.scene))
    run.config = {"split": args.split, "name": args.name}
    renders = {}
    if args.renders is not None:
        root = run.input(args.renders)
        for pair in scene.split(args.split):
            rgb_path, th_path = root / "rgb" / f"{pair.name}.png", root / "thermal" / f"{pair.name}.png"
            if not (rgb_path.is_file() and th_path.is_file()):
                raise FileNotFoundError(f"missing render for view {pair.name} under {root}")
            renders[pair.name] = (read_rgb_png(rgb_path), read_thermal_png(th_path))
    else:
        grid, background, _ = load_checkpoint(run.input(args.checkpoint))
        for pair in scene.split(args.split):
            renders[pair.name] = (
                render_image(grid, scene.intrinsics, pair.pose, RGB, background=background).data,
                render_image(grid, scene.intrinsics, pair.pose, THERMAL, background=background).data,
            )
    rows = evaluate_views(scene, renders, args.split, args.name)
    out = Path(args.out)
    write_metrics_csv(run.output(out), rows)
    run.write_manifest(out.with_name(out.name + ".manifest.json"))
    print(f"{'scene':<10} {'view':<8} {'channel':<8} {'PSNR':>8} {'SSIM':>7} {'MAE':>8}")
    for r in rows:
        print(f"{r.scene:<10} {r.view:<8} {r.channel:<8} {r.psnr:8.3f} {r.ssim:7.4f} {r.mae:8.4f}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thermogrid", description="RGB + thermal voxel reconstruction, meshing and heat simulation.")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--version", action="version", version=f"thermogrid {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="render a primitive scene into a dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON synthetic spec (default: single slab)")
    g.add_argument("--seed", type=int)
    g.add_argument("--dims", type=int, nargs=3)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--noise", type=float)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="fit a voxel grid to a dataset")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON training config; flags override it")
    t.add_argument("--iterations", type=int)
    t.add_argument("--dims", type=int, nargs=3)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--tv-rgb", type=float)
    t.add_argument("--tv-thermal", type=float)
    t.add_argument("--lr-density", type=float)
    t.add_argument("--lr-sh", type=float)
    t.add_argument("--lr-temperature", type=float)
    t.add_argument("--lr-background", type=float)
    t.add_argument("--lr-final-ratio", type=float, help="final / initial learning rate (log-linear decay)")
    t.add_argument("--background-shape", type=int, nargs=2)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render RGB and thermal images from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene")
    r.add_argument("--poses", help="pose record file (alternative to --scene)")
    r.add_argument("--split", default="test", choices=["train", "test", "all"])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("extract-mesh", help="write the volumetric mesh of a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--t-percent", type=float, default=40.0)
    m.add_argument("--tets", action="store_true")
    m.set_defaults(func=cmd_extract_mesh)

    s = sub.add_parser("simulate", help="heat conduction on a VTK mesh")
    s.add_argument("--mesh", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON with steps, dt, conductivity, density, specific_heat")
    s.add_argument("--steps", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--conductivity", type=float)
    s.add_argument("--density", type=float)
    s.add_argument("--specific-heat", type=float)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="PSNR / SSIM / MAE table against a dataset split")
    e.add_argument("--scene", required=True)
    e.add_argument("--renders", help="directory with rgb/ and thermal/ images")
    e.add_argument("--checkpoint", help="render from this checkpoint instead")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--name", default="scene")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def _set_threads(n: Optional[int]) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    run = None
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        _set_threads(args.threads)
        run = Run(args.command, argv)
        args.func(args, run)
        return EXIT_OK
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (NonFiniteLossError, ConvergenceError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERICAL, f"numerical failure: {exc}"
    except (OSError, SceneError, PoseFileError, VTKFormatError, EmptyReconstructionError,
            KeyError, ValueError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    if run is not None:
        run.rollback()
    print(f"thermogrid: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
