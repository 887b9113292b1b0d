"""Command-line surface: every pipeline stage as a reproducible subcommand.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every command that draws random numbers requires an explicit --seed, so a
re-run with identical flags overwrites outputs with identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .correct import HomogeneityCriterion, correct_scene
from .errors import DataError, NumericalError, StdregError
from .evaluate import accuracy_report, consistency_report
from .phantom import PhantomSpec, generate_phantom_pair
from .pipeline import load_results, plan_from_config, run_plan
from .register import RegistrationConfig, register
from .scene import load_scene, save_scene
from .standardize import (
    default_levels,
    level_by_id,
    load_model,
    sample_slopes,
    save_model,
    standardize_scene,
    apply_inverse_mapping,
    train_model,
)
from .transform import AffineParams, cell_by_id, deformation_grid, resample

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_PARAM_NAMES = (
    "tx", "ty", "tz", "rx", "ry", "rz", "cx", "cy", "cz", "hxy", "hxz", "hyz",
)


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"dims must be N or NX,NY,NZ with positive entries: {text}")
    return tuple(parts)  # type: ignore[return-value]


def _print_params(params: AffineParams) -> None:
    for name, value in zip(_PARAM_NAMES, params.to_vector()):
        print(f"{name} = {value:.10g}")


def _load_init_params(spec: str) -> AffineParams:
    if spec == "identity":
        return AffineParams.identity()
    path = Path(spec)
    if not path.is_file():
        raise DataError(f"initial parameters file not found: {path}")
    payload = json.loads(path.read_text())
    if isinstance(payload, dict):
        payload = payload.get("params", payload)
    return AffineParams.from_vector(payload)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stdreg",
        description="Intensity standardization versus affine registration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("phantom", help="generate a synthetic T2/PD scene pair", formatter_class=fmt)
    p.add_argument("--dims", type=_dims, default=(64, 64, 64), help="grid size N or NX,NY,NZ")
    p.add_argument("--voxel-size", type=float, default=1.0, help="isotropic voxel size in mm")
    p.add_argument("--noise", type=float, default=6.0, help="Gaussian noise sigma")
    p.add_argument("--bias", type=float, default=0.0, help="peak-to-peak shading fraction")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--name", default="subject00", help="output base name")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("correct", help="remove smooth intensity shading", formatter_class=fmt)
    p.add_argument("scene", help="input scene (.scnh)")
    p.add_argument("--theta", type=float, default=None,
                   help="homogeneity tolerance (default: 5%% of foreground median)")
    p.add_argument("--max-iters", type=int, default=10, help="maximum correction passes")
    p.add_argument("--growth-tol", type=float, default=0.05,
                   help="stop when the largest region grows less than this fraction")
    p.add_argument("--out", required=True, help="output scene base path")

    p = sub.add_parser("train", help="train a standardization model", formatter_class=fmt)
    p.add_argument("scenes", nargs="+", help="training scenes (.scnh), one protocol")
    p.add_argument("--pc1", type=float, default=0.0, help="low percentile landmark")
    p.add_argument("--pc2", type=float, default=99.8, help="high percentile landmark")
    p.add_argument("--s1", type=int, default=1, help="standard scale minimum")
    p.add_argument("--s2", type=int, default=4095, help="standard scale maximum")
    p.add_argument("--out", required=True, help="output model file (JSON)")

    p = sub.add_parser("standardize", help="map a scene onto the standard scale", formatter_class=fmt)
    p.add_argument("scene", help="input scene (.scnh)")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--out", required=True, help="output scene base path")

    p = sub.add_parser("inject", help="add a known level of non-standardness", formatter_class=fmt)
    p.add_argument("scene", help="standardized input scene (.scnh)")
    p.add_argument("--level", required=True,
                   choices=[lv.id for lv in default_levels()], help="non-standardness level")
    p.add_argument("--seed", type=int, required=True, help="slope sampling seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("deform", help="apply a known deformation grid cell", formatter_class=fmt)
    p.add_argument("scene", nargs="?", help="input scene (.scnh)")
    p.add_argument("--cell", help="deformation cell id, e.g. r1t2s0h1")
    p.add_argument("--list", action="store_true", help="list all 81 grid cells and exit")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("register", help="recover the affine map between two scenes", formatter_class=fmt)
    p.add_argument("source", help="source scene (.scnh)")
    p.add_argument("target", help="target scene (.scnh)")
    p.add_argument("--init", default="identity",
                   help="'identity' or a JSON file with 12 initial parameters")
    p.add_argument("--pyramid-levels", type=int, default=3, help="resolution levels")
    p.add_argument("--max-iters", type=int, default=50, help="iterations per level")
    p.add_argument("--tol", type=float, default=1e-6, help="relative improvement threshold")
    p.add_argument("--damping", type=float, default=1e-3, help="initial step damping")
    p.add_argument("--out", help="optional JSON result path")

    p = sub.add_parser("run", help="execute a full experiment plan", formatter_class=fmt)
    p.add_argument("--config", required=True, help="plan configuration file (JSON)")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: config value or 1)")

    p = sub.add_parser("report-accuracy", help="accuracy goodness table from results", formatter_class=fmt)
    p.add_argument("results", help="plan output directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--json", dest="json_out", default=None, help="optional JSON detail path")
    p.add_argument("--alpha", type=float, default=0.05, help="significance threshold")

    p = sub.add_parser("report-consistency", help="consistency goodness table from results", formatter_class=fmt)
    p.add_argument("results", help="plan output directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--json", dest="json_out", default=None, help="optional JSON detail path")
    p.add_argument("--alpha", type=float, default=0.05, help="significance threshold")

    return parser


def _cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=args.dims,
        voxel_size=(args.voxel_size,) * 3,
        noise_sigma=args.noise,
        bias_amplitude=args.bias,
        seed=args.seed,
    )
    t2, pd = generate_phantom_pair(spec)
    out = Path(args.out)
    save_scene(t2, out / f"{args.name}_T2.scnh")
    save_scene(pd, out / f"{args.name}_PD.scnh")
    print(f"wrote {out / (args.name + '_T2.scnh')} and {out / (args.name + '_PD.scnh')}")
    return EXIT_OK


def _cmd_correct(args) -> int:
    scene = load_scene(args.scene)
    crit = HomogeneityCriterion(args.theta) if args.theta is not None else None
    corrected = correct_scene(scene, crit, args.max_iters, args.growth_tol)
    save_scene(corrected, args.out)
    changed = int((corrected.values != scene.values).sum())
    print(f"wrote {args.out} ({changed} voxel(s) changed)")
    return EXIT_OK


def _cmd_train(args) -> int:
    scenes = [load_scene(p) for p in args.scenes]
    model = train_model(scenes, pc1=args.pc1, pc2=args.pc2, s1=args.s1, s2=args.s2)
    save_model(model, args.out)
    print(
        f"wrote {args.out} (protocol={model.protocol}, mu_s={model.mu_s}, "
        f"slopes {model.training_slope_range[0]:.4f}..{model.training_slope_range[1]:.4f})"
    )
    return EXIT_OK


def _cmd_standardize(args) -> int:
    scene = load_scene(args.scene)
    model = load_model(args.model)
    save_scene(standardize_scene(scene, model), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_inject(args) -> int:
    scene = load_scene(args.scene)
    level = level_by_id(args.level)
    m1, m2 = sample_slopes(level, args.seed)
    out_base = Path(args.out) / f"{Path(args.scene).stem}_{level.id}"
    if level.is_clean:
        save_scene(scene, out_base)
    else:
        save_scene(apply_inverse_mapping(scene, m1, m2), out_base)
    print(f"wrote {out_base}{'.scnh'} (m1={m1:.6f}, m2={m2:.6f})")
    return EXIT_OK


def _cmd_deform(args) -> int:
    if args.list:
        for cell in deformation_grid():
            print(f"{cell.cell_id}  group={cell.group}  levels={cell.levels}")
        return EXIT_OK
    if not args.scene or not args.cell or not args.out:
        raise DataError("deform requires a scene, --cell, and --out (or --list)")
    scene = load_scene(args.scene)
    cell = cell_by_id(args.cell)
    out_base = Path(args.out) / f"{Path(args.scene).stem}_{cell.cell_id}"
    save_scene(resample(scene, cell.params), out_base)
    print(f"wrote {out_base}.scnh (group={cell.group})")
    return EXIT_OK


def _cmd_register(args) -> int:
    source = load_scene(args.source)
    target = load_scene(args.target)
    config = RegistrationConfig(
        pyramid_levels=args.pyramid_levels,
        max_iters=args.max_iters,
        convergence_tol=args.tol,
        damping=args.damping,
        initial_params=_load_init_params(args.init),
    )
    result = register(source, target, config)
    _print_params(result.params)
    print(f"final_ssd = {result.final_ssd:.10g}")
    print(f"iterations = {result.iterations_used}  converged = {result.converged}")
    if args.out:
        payload = {
            "params": [float(v) for v in result.params.to_vector()],
            "final_ssd": result.final_ssd,
            "iterations": result.iterations_used,
            "converged": result.converged,
        }
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def _cmd_run(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        raise DataError(f"missing plan config {config_path}")
    try:
        config = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed plan config {config_path}: {exc}") from exc
    plan = plan_from_config(config, master_seed=args.seed, out_dir=args.out, workers=args.workers)
    summary = run_plan(plan, verbose=True)
    print(
        f"done: {summary['units_total']} units "
        f"({summary['units_executed']} executed, {summary['units_reused']} reused, "
        f"{summary['units_failed']} failed)"
    )
    return EXIT_OK


def _cmd_report(args, kind: str) -> int:
    cells, geometries = load_results(args.results)
    if kind == "accuracy":
        report = accuracy_report(cells, alpha=args.alpha)
    else:
        report = consistency_report(cells, geometries, alpha=args.alpha)
    report.to_csv(args.out)
    if args.json_out:
        report.to_json(args.json_out)
    print(f"wrote {args.out}" + (f" and {args.json_out}" if args.json_out else ""))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "phantom": _cmd_phantom,
        "correct": _cmd_correct,
        "train": _cmd_train,
        "standardize": _cmd_standardize,
        "inject": _cmd_inject,
        "deform": _cmd_deform,
        "register": _cmd_register,
        "run": _cmd_run,
        "report-accuracy": lambda a: _cmd_report(a, "accuracy"),
        "report-consistency": lambda a: _cmd_report(a, "consistency"),
    }
    try:
        return handlers[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StdregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
