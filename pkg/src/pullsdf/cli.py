"""Command-line entry point.

Exit codes: 0 success, 2 input/output failure, 3 invalid configuration,
4 numeric failure (non-finite losses, parameters or field values).

Configuration resolves in three layers: built-in defaults, then a
``key = value`` config file (``--config``), then command-line flags. Keys are
those of :meth:`TrainConfig.to_flat` (``stack.*`` and ``loss.*`` for the
nested sections) plus ``steps`` and the ``mesh.*`` keys below.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import meshing, metrics
from . import pointcloud as pcm
from . import trainer

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4

MESH_DEFAULTS = {"mesh.resolution": 128, "mesh.bound": 1.0, "mesh.level": None}

# flag name -> config key
FLAG_KEYS = {
    "iterations": "iterations",
    "seed": "seed",
    "batch": "batch_queries",
    "lr": "learning_rate",
    "loss": "loss.mode",
    "init": "stack.init",
    "encoder": "stack.encoder",
    "width": "stack.width",
    "hidden": "head_hidden",
    "omega": "stack.omega_bound",
    "features": "features",
    "steps": "steps",
    "resolution": "mesh.resolution",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - source checkout
        return "0.0.0+local"


# -- configuration ------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected 'key = value'", EXIT_CONFIG)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise CliError(f"{source}:{lineno}: empty key", EXIT_CONFIG)
        out[key] = value
    return out


def read_config_file(path: str) -> dict:
    """Config values from a ``key = value`` file or a previous run manifest."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}", EXIT_IO)
    text = p.read_text()
    if p.suffix == ".json":
        try:
            return dict(json.loads(text)["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"{path}: not a run manifest ({exc})", EXIT_CONFIG) from None
    return parse_config_text(text, path)


def _split_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v for v in str(value).replace("(", "").replace(")", "").replace(",", " ").split() if v]


def resolve_config(args) -> tuple[trainer.TrainConfig, dict, dict]:
    """(train config, mesh options, provenance) from defaults, file and flags."""
    base = trainer.TrainConfig()
    values: dict = {**base.to_flat(), **MESH_DEFAULTS}
    provenance = {k: "default" for k in values}
    layers = []
    if getattr(args, "config", None):
        layers.append(("config", read_config_file(args.config)))
    flags = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    layers.append(("flag", flags))
    for origin, layer in layers:
        for key, value in layer.items():
            if key == "steps":
                levels = trainer.levels_for_steps(int(value))
                for k, v in (("step_levels", list(levels)), ("stack.taps", list(levels))):
                    values[k], provenance[k] = v, origin
                continue
            if key not in values:
                raise CliError(f"unknown config key {key!r}", EXIT_CONFIG)
            values[key], provenance[key] = value, origin
            if key == "stack.omega_bound" and "stack.omega_bound_first" not in layer:
                values["stack.omega_bound_first"], provenance["stack.omega_bound_first"] = value, origin

    flat = {k: v for k, v in values.items() if not k.startswith("mesh.")}
    for key in ("lr_milestones", "step_levels", "stack.taps"):
        flat[key] = [float(x) if key == "lr_milestones" else int(x) for x in _split_list(flat[key])]
    try:
        config = trainer.TrainConfig.from_flat(flat)
        config.validate()
        mesh = {
            "resolution": int(values["mesh.resolution"]),
            "bound": float(values["mesh.bound"]),
            "level": None if values["mesh.level"] in (None, "", "None", "none") else int(values["mesh.level"]),
        }
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from None
    if mesh["resolution"] < 2 or mesh["bound"] <= 0:
        raise CliError("mesh.resolution must be >= 2 and mesh.bound positive", EXIT_CONFIG)
    return config, mesh, provenance


def resolved_flat(config: trainer.TrainConfig, mesh: dict) -> dict:
    return {**config.to_flat(), **{f"mesh.{k}": v for k, v in mesh.items()}}


# -- manifest -------------------------------------------------------------------


class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.data = {
            "tool": "pullsdf",
            "version": tool_version(),
            "command": command,
            "argv": list(argv),
            "config": {},
            "provenance": {},
            "seed": None,
            "inputs": {},
            "outputs": {},
            "timings": {},
        }
        self._t0 = time.perf_counter()
        self._last = self._t0

    def __setitem__(self, key, value):
        self.data[key] = value

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.data["timings"][name] = round(now - self._last, 6)
        self._last = now

    def write(self, path) -> None:
        self.data["timings"]["total"] = round(time.perf_counter() - self._t0, 6)
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# -- pipeline pieces -----------------------------------------------------------


def _load_cloud(path: str) -> pcm.PointCloud:
    return pcm.load(path)


def _train(cloud_path: str, config, log_path: Path, manifest: RunManifest):
    raw = _load_cloud(cloud_path)
    cloud, transform = pcm.normalize(raw)
    manifest.lap("load")
    with open(log_path, "w") as log_stream:
        evaluator, _ = trainer.train(cloud, config, log_stream=log_stream, dump_path=str(log_path) + ".batch")
    manifest.lap("train")
    return raw, evaluator, transform


def _mesh(evaluator, transform, mesh_opts: dict) -> meshing.TriangleMesh:
    b = mesh_opts["bound"]
    m = meshing.extract_mesh(evaluator, mesh_opts["resolution"], (-b, b), level=mesh_opts["level"])
    return meshing.denormalize(m, transform)


def _configured_manifest(command, argv, config, mesh_opts, provenance):
    manifest = RunManifest(command, argv)
    manifest["config"] = resolved_flat(config, mesh_opts)
    manifest["provenance"] = provenance
    manifest["seed"] = config.seed
    return manifest


# -- commands ---------------------------------------------------------------------


def cmd_reconstruct(args, argv) -> int:
    config, mesh_opts, prov = resolve_config(args)
    out = Path(args.output)
    ckpt = Path(args.checkpoint) if args.checkpoint else _sidecar(out, ".ckpt")
    log_path = Path(args.log) if args.log else _sidecar(out, ".log.ndjson")
    man_path = Path(args.manifest) if args.manifest else _sidecar(out, ".manifest.json")
    manifest = _configured_manifest("reconstruct", argv, config, mesh_opts, prov)
    manifest["inputs"] = {"cloud": args.input}
    _, evaluator, transform = _train(args.input, config, log_path, manifest)
    trainer.save_checkpoint(evaluator, config, ckpt, transform)
    mesh = _mesh(evaluator, transform, mesh_opts)
    manifest.lap("mesh")
    meshing.export(mesh, out)
    manifest["outputs"] = {"mesh": str(out), "checkpoint": str(ckpt), "log": str(log_path)}
    manifest.write(man_path)
    print(f"wrote {out} ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    config, mesh_opts, prov = resolve_config(args)
    out = Path(args.output)
    log_path = Path(args.log) if args.log else _sidecar(out, ".log.ndjson")
    manifest = _configured_manifest("train", argv, config, mesh_opts, prov)
    manifest["inputs"] = {"cloud": args.input}
    _, evaluator, transform = _train(args.input, config, log_path, manifest)
    trainer.save_checkpoint(evaluator, config, out, transform)
    manifest["outputs"] = {"checkpoint": str(out), "log": str(log_path)}
    manifest.write(Path(args.manifest) if args.manifest else _sidecar(out, ".manifest.json"))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_mesh(args, argv) -> int:
    ck = trainer.load_checkpoint(args.checkpoint)
    level = args.level
    if level is not None and level not in ck.evaluator.stack.taps and ck.evaluator.stack.config.encoder == "fft":
        raise CliError(f"level {level} is not a tap of this checkpoint (taps {list(ck.evaluator.stack.taps)})", EXIT_CONFIG)
    if args.resolution < 2:
        raise CliError("resolution must be >= 2", EXIT_CONFIG)
    opts = {"resolution": args.resolution, "bound": args.bound, "level": level}
    manifest = RunManifest("mesh", argv)
    manifest["config"] = {f"mesh.{k}": v for k, v in opts.items()}
    manifest["seed"] = ck.seed
    manifest["inputs"] = {"checkpoint": args.checkpoint}
    mesh = _mesh(ck.evaluator, ck.transform, opts)
    manifest.lap("mesh")
    out = Path(args.output)
    meshing.export(mesh, out)
    manifest["outputs"] = {"mesh": str(out)}
    manifest.write(_sidecar(out, ".manifest.json"))
    print(f"wrote {out} ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return EXIT_OK


def _load_reference(path: str):
    """A mesh when the file has faces, otherwise a point cloud."""
    p = Path(path)
    if not p.is_file():
        raise pcm.MissingFileError(f"no such file: {path}")
    if p.suffix.lower() in (".obj", ".ply"):
        mesh = meshing.load_mesh(p)
        if mesh.n_faces:
            return mesh
    return _load_cloud(path)


def _thresholds(text: str) -> list[float]:
    try:
        ts = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"bad thresholds {text!r}", EXIT_CONFIG) from None
    if not ts or any(t <= 0 for t in ts):
        raise CliError("thresholds must be positive", EXIT_CONFIG)
    return ts


def cmd_eval(args, argv) -> int:
    recon = meshing.load_mesh(args.recon)
    gt = _load_reference(args.gt)
    thresholds = _thresholds(args.thresholds)
    report = metrics.evaluate_reconstruction(
        recon, gt, n=args.samples, thresholds=thresholds, seed=args.seed,
        cd_convention=args.cd_convention, pca_k=args.pca_k,
    )
    text = report.to_json()
    print(text)
    if args.output:
        out = Path(args.output)
        out.write_text(text + "\n")
        manifest = RunManifest("eval", argv)
        manifest["config"] = {
            "thresholds": thresholds, "samples": args.samples,
            "cd_convention": args.cd_convention, "pca_k": args.pca_k,
        }
        manifest["seed"] = args.seed
        manifest["inputs"] = {"recon": args.recon, "gt": args.gt}
        manifest["outputs"] = {"report": str(out)}
        manifest.write(_sidecar(out, ".manifest.json"))
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    config, mesh_opts, prov = resolve_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = trainer.ablation_matrix(config, args.axis)
    manifest = _configured_manifest("ablate", argv, config, mesh_opts, prov)
    manifest["inputs"] = {"cloud": args.input, "axis": args.axis}
    raw = _load_cloud(args.input)
    cloud, transform = pcm.normalize(raw)
    summary = []
    for label, cfg in rows:
        tag = label.replace("=", "").replace("+", "_")
        evaluator, _ = trainer.train(cloud, cfg)
        mesh = _mesh(evaluator, transform, mesh_opts)
        meshing.export(mesh, out_dir / f"{tag}.obj")
        if mesh.n_faces == 0:
            row = {"row": label, "cd_l2_x100": None, "nc": None, "empty_mesh": True}
        else:
            report = metrics.evaluate_reconstruction(mesh, raw, n=args.samples, thresholds=_thresholds(args.thresholds), seed=config.seed)
            (out_dir / f"{tag}.json").write_text(report.to_json() + "\n")
            row = {"row": label, "cd_l2_x100": report.cd_l2_x100, "nc": report.nc, **{f"F@{k}": v for k, v in report.fscore.items()}}
        summary.append(row)
        manifest.lap(label)
        print(json.dumps(row), flush=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    manifest["outputs"] = {"dir": str(out_dir)}
    manifest.write(out_dir / "manifest.json")
    print(f"{'row':<14}{'CD_L2x100':>12}{'NC':>10}")
    for row in summary:
        cd = "empty" if row["cd_l2_x100"] is None else f"{row['cd_l2_x100']:.5f}"
        nc = "-" if row["nc"] is None else f"{row['nc']:.4f}"
        print(f"{row['row']:<14}{cd:>12}{nc:>10}")
    return EXIT_OK


def cmd_noise(args, argv) -> int:
    if args.sigma < 0:
        raise CliError("sigma must be non-negative", EXIT_CONFIG)
    cloud = _load_cloud(args.input)
    noisy = pcm.add_noise(cloud, args.sigma, args.seed)
    pcm.save_xyz(noisy, args.output)
    manifest = RunManifest("noise", argv)
    manifest["config"] = {"sigma": args.sigma}
    manifest["seed"] = args.seed
    manifest["inputs"] = {"cloud": args.input}
    manifest["outputs"] = {"cloud": args.output}
    manifest.write(_sidecar(Path(args.output), ".manifest.json"))
    return EXIT_OK


def cmd_info(args, argv) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise pcm.MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == trainer.CHECKPOINT_MAGIC:
        ck = trainer.load_checkpoint(str(path))
        n_params = sum(v.size for v in ck.evaluator.params.values())
        info = {
            "kind": "checkpoint",
            "iteration": ck.iteration,
            "seed": ck.seed,
            "parameters": int(n_params),
            "taps": list(ck.evaluator.stack.taps),
            "step_levels": list(ck.evaluator.step_levels),
            "features": ck.evaluator.features,
            "encoder": ck.evaluator.stack.config.encoder,
        }
    else:
        ref = None
        if path.suffix.lower() in (".obj", ".ply"):
            mesh = meshing.load_mesh(path)
            # an empty mesh is still a mesh; vertices without faces are a cloud
            if mesh.n_faces or not mesh.n_vertices:
                ref = mesh
        ref = ref if ref is not None else _load_cloud(str(path))
        if isinstance(ref, meshing.TriangleMesh):
            info = {"kind": "mesh", "vertices": ref.n_vertices, "faces": ref.n_faces,
                    "euler_characteristic": ref.euler_characteristic(), "watertight": ref.is_watertight()}
        else:
            lo, hi = ref.points.min(axis=0), ref.points.max(axis=0)
            info = {"kind": "cloud", "points": len(ref), "normals": ref.normals is not None,
                    "bbox_min": lo.tolist(), "bbox_max": hi.tolist()}
    print(json.dumps(info, indent=2))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file or a previous run manifest (.json)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int, help="queries per iteration")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--steps", type=int, help="pulling steps (tap levels spread over 4..8)")
    p.add_argument("--loss", choices=["full", "pull-only", "recon-only", "recon+grad"])
    p.add_argument("--init", choices=["multipull", "random-uniform", "bacon-style"])
    p.add_argument("--encoder", choices=["fft", "linear"])
    p.add_argument("--width", type=int, help="frequency features per layer (M)")
    p.add_argument("--hidden", type=int, help="head hidden width")
    p.add_argument("--omega", type=float, help="frequency init bound for every layer")
    p.add_argument("--features", choices=["moving", "frozen-q0"])
    p.add_argument("--resolution", type=int, help="marching-cubes grid resolution")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pullsdf", description="Multi-step pulling surface reconstruction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="train on a cloud and extract a mesh")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="mesh path (.obj or .ply)")
    p.add_argument("--checkpoint")
    p.add_argument("--log")
    p.add_argument("--manifest")
    _train_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--log")
    p.add_argument("--manifest")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--bound", type=float, default=1.0, help="half-width of the normalized grid box")
    p.add_argument("--level", type=int, help="field level (default: final step)")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="compare a mesh with a reference mesh or cloud")
    p.add_argument("recon")
    p.add_argument("gt")
    p.add_argument("--thresholds", default="0.002,0.004,0.01")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--cd-convention", choices=list(metrics.CD_CONVENTIONS), default="avg")
    p.add_argument("--pca-k", type=int, default=18)
    p.add_argument("-o", "--output", help="report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis and report each row")
    p.add_argument("input")
    p.add_argument("--axis", required=True, choices=list(trainer.ABLATION_AXES))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--thresholds", default="0.002,0.004,0.01")
    p.add_argument("--samples", type=int, default=10000)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise", help="add Gaussian noise to a cloud")
    p.add_argument("input")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("info", help="describe a checkpoint, mesh or cloud")
    p.add_argument("path")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (trainer.CheckpointError, pcm.PointCloudError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    except trainer.ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (trainer.TrainingAborted, dc.NonFiniteError, meshing.MeshingError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    print(f"pullsdf: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
