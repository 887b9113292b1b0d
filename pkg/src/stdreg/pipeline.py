"""End-to-end experiment orchestration.

A plan expands into independent work units addressed by (subject, protocol,
level, deformation cell).  For every subject pair the raw volumes are
shading-corrected and standardized into the clean cohort; each deformation
cell is applied once to the clean scene (the standardized arm) and once per
non-standardness level to the de-standardized scene (the non-standard arm).
The standardized-arm registration is computed once per (subject, protocol,
cell) and shared by every level, matching the study's experiment count.

Every work unit persists one JSON record under the output directory keyed
by its address, so interrupted runs resume without redoing registrations
and re-runs with the same master seed reproduce byte-identical records
regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .correct import HomogeneityCriterion, correct_scene
from .errors import DataError, NumericalError, StdregError
from .phantom import PhantomSpec, generate_phantom_pair, subject_variant
from .register import RegistrationConfig, RegistrationResult, register
from .scene import (
    BoundingBox,
    Scene,
    foreground_bounding_box,
    load_scene,
    save_scene,
)
from .standardize import (
    NonStandardnessLevel,
    apply_inverse_mapping,
    default_levels,
    level_by_id,
    sample_slopes,
    save_model,
    standardize_scene,
    train_model,
)
from .transform import (
    AffineParams,
    DeformationCell,
    cell_by_id,
    deformation_grid,
    grid_subset_27,
    matrix,
    resample,
    rmse_corners,
    trilinear_sample,
)

PROTOCOLS = ("T2", "PD")


@dataclass(frozen=True)
class CorrectionSettings:
    theta: float | None = None  # None: 5% of the foreground median per scene
    max_iters: int = 10
    growth_tol: float = 0.05


@dataclass(frozen=True)
class StandardizationSettings:
    pc1: float = 0.0
    pc2: float = 99.8
    s1: int = 1
    s2: int = 4095


@dataclass(frozen=True)
class ExperimentPlan:
    subjects: int
    phantom: PhantomSpec
    levels: tuple[NonStandardnessLevel, ...]
    grid: tuple[DeformationCell, ...]
    registration: RegistrationConfig
    master_seed: int
    out_dir: Path
    workers: int = 1
    scene_dir: Path | None = None
    correction: CorrectionSettings = field(default_factory=CorrectionSettings)
    standardization: StandardizationSettings = field(default_factory=StandardizationSettings)

    def __post_init__(self):
        if self.subjects < 1:
            raise DataError(f"plan needs at least 1 subject, got {self.subjects}")
        if not self.levels or not self.grid:
            raise DataError("plan needs at least one level and one deformation cell")
        if self.workers < 1:
            raise DataError(f"workers must be >= 1, got {self.workers}")


@dataclass
class ExperimentCell:
    """One fully assembled experiment unit (both arms joined)."""

    subject: int
    protocol: str
    level_id: str
    cell_id: str
    group: str
    truth: AffineParams
    slopes: tuple[float, float] | None
    params_s: AffineParams | None
    params_ns: AffineParams | None
    rmse_s: float | None
    rmse_ns: float | None
    status: str
    message: str = ""


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and an address tuple."""
    text = f"{master_seed}|" + "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def _clean_scene_path(out_dir: Path, subject: int, protocol: str) -> Path:
    return out_dir / "clean" / f"subject{subject:02d}_{protocol}.scnh"


def _geometry_path(out_dir: Path, subject: int) -> Path:
    return out_dir / "subjects" / f"subject{subject:02d}.json"


def _s_record_path(out_dir: Path, subject: int, protocol: str, cell_id: str) -> Path:
    return out_dir / "cells" / f"s_S{subject:02d}_{protocol}_{cell_id}.json"


def _ns_record_path(
    out_dir: Path, subject: int, protocol: str, level_id: str, cell_id: str
) -> Path:
    return out_dir / "cells" / f"ns_S{subject:02d}_{protocol}_{level_id}_{cell_id}.json"


def build_clean_set(
    raw_by_protocol: dict[str, list[Scene]],
    correction: CorrectionSettings = CorrectionSettings(),
    standardization: StandardizationSettings = StandardizationSettings(),
) -> tuple[dict[str, list[Scene]], dict[str, object]]:
    """Correct then standardize a cohort; one model per protocol.

    Correction always precedes standardization because correction itself
    perturbs the intensity scale.  The model is trained on the corrected
    cohort that is then standardized.
    """
    clean: dict[str, list[Scene]] = {}
    models: dict[str, object] = {}
    for protocol, scenes in sorted(raw_by_protocol.items()):
        if not scenes:
            raise DataError(f"no scenes for protocol {protocol}")
        crit = (
            HomogeneityCriterion(correction.theta)
            if correction.theta is not None
            else None
        )
        corrected = [
            correct_scene(s, crit, correction.max_iters, correction.growth_tol)
            for s in scenes
        ]
        model = train_model(
            corrected,
            pc1=standardization.pc1,
            pc2=standardization.pc2,
            s1=standardization.s1,
            s2=standardization.s2,
        )
        clean[protocol] = [standardize_scene(s, model) for s in corrected]
        models[protocol] = model
    return clean, models


def make_target(scene: Scene, truth: AffineParams, support_source: np.ndarray) -> Scene:
    """Deform a scene while pinning the target geometry to a shared support.

    Both arms of a cell must expose the identical foreground mask, but
    independent rounding of the two arms' interpolated boundary voxels can
    disagree.  The support is therefore resampled once from the shared
    source mask; target voxels outside it are zeroed and voxels inside are
    kept positive.
    """
    target = resample(scene, truth)
    m = matrix(truth, scene.center())
    minv = np.linalg.inv(m)
    nx, ny, nz = scene.dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = np.vstack(
        [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")]
    ).astype(np.float64)
    src_pts = minv[:3, :3] @ pts + minv[:3, 3:4]
    support_flat = trilinear_sample(support_source.astype(np.float64), src_pts) >= 0.5
    support = support_flat.reshape(scene.dims, order="F")
    values = target.values.copy()
    values[~support] = 0
    values[support] = np.maximum(values[support], 1)
    return target.with_values(values)


def _params_list(params: AffineParams) -> list[float]:
    return [float(v) for v in params.to_vector()]


def _trace_summary(result: RegistrationResult) -> list[list[float]]:
    summary: dict[int, tuple[int, float]] = {}
    for level, iteration, value in result.per_level_trace:
        summary[level] = (iteration, value)
    return [[lvl, it, val] for lvl, (it, val) in sorted(summary.items())]


def _config_to_dict(config: RegistrationConfig) -> dict:
    return {
        "pyramid_levels": config.pyramid_levels,
        "max_iters": config.max_iters,
        "convergence_tol": config.convergence_tol,
        "damping": config.damping,
        "initial_params": _params_list(config.initial_params),
    }


def _config_from_dict(payload: dict) -> RegistrationConfig:
    return RegistrationConfig(
        pyramid_levels=int(payload["pyramid_levels"]),
        max_iters=int(payload["max_iters"]),
        convergence_tol=float(payload["convergence_tol"]),
        damping=float(payload["damping"]),
        initial_params=AffineParams.from_vector(payload["initial_params"]),
    )


def _load_geometry(out_dir: Path, subject: int):
    payload = json.loads(_geometry_path(out_dir, subject).read_text())
    box = BoundingBox(
        tuple(int(v) for v in payload["box_min"]),
        tuple(int(v) for v in payload["box_max"]),
    )
    voxel_size = tuple(float(v) for v in payload["voxel_size"])
    center = tuple(float(v) for v in payload["center"])
    return box, voxel_size, center


def run_task(out_dir: str | Path, task: dict) -> str:
    """Execute one persisted work unit; returns the record path written.

    Module-level so worker processes can import it.  Registration failures
    are recorded in the unit's JSON, never raised past this boundary.
    """
    out_dir = Path(out_dir)
    subject = task["subject"]
    protocol = task["protocol"]
    cell_id = task["cell_id"]
    cell = cell_by_id(cell_id)
    config = _config_from_dict(task["registration"])

    clean = load_scene(_clean_scene_path(out_dir, subject, protocol))
    box, voxel_size, center = _load_geometry(out_dir, subject)
    support = clean.values > 0

    record: dict = {
        "subject": subject,
        "protocol": protocol,
        "cell_id": cell_id,
        "group": cell.group,
        "truth": _params_list(cell.params),
        "status": "ok",
        "message": "",
        "result": None,
        "rmse": None,
    }
    if task["kind"] == "ns":
        level = level_by_id(task["level_id"])
        seed = task["seed"]
        m1, m2 = sample_slopes(level, seed)
        record.update({"level_id": level.id, "seed": seed, "m1": m1, "m2": m2})

    try:
        if task["kind"] == "ns":
            source_for_target = apply_inverse_mapping(clean, m1, m2)
        else:
            source_for_target = clean
        target = make_target(source_for_target, cell.params, support)
        result = register(clean, target, config)
        record["result"] = {
            "params": _params_list(result.params),
            "final_ssd": result.final_ssd,
            "iterations": result.iterations_used,
            "converged": result.converged,
            "trace_summary": _trace_summary(result),
        }
        record["rmse"] = rmse_corners(cell.params, result.params, box, voxel_size, center)
    except NumericalError as exc:
        record["status"] = "registration_failed"
        record["message"] = str(exc)
    except DataError as exc:
        record["status"] = "skipped"
        record["message"] = str(exc)

    if task["kind"] == "ns":
        path = _ns_record_path(out_dir, subject, protocol, task["level_id"], cell_id)
    else:
        path = _s_record_path(out_dir, subject, protocol, cell_id)
    _write_json(path, record)
    return str(path)


def _pool_entry(args) -> str:
    out_dir, task = args
    return run_task(out_dir, task)


def _prepare_cohort(plan: ExperimentPlan, verbose: bool) -> None:
    """Generate (or load), correct, and standardize the cohort; persist it."""
    out_dir = plan.out_dir
    expected = [
        _clean_scene_path(out_dir, s, p)
        for s in range(plan.subjects)
        for p in PROTOCOLS
    ] + [_geometry_path(out_dir, s) for s in range(plan.subjects)]
    if all(p.exists() for p in expected):
        if verbose:
            print(f"[stdreg] clean cohort present under {out_dir / 'clean'}, reusing")
        return

    raw_by_protocol: dict[str, list[Scene]] = {p: [] for p in PROTOCOLS}
    for subject in range(plan.subjects):
        if plan.scene_dir is not None:
            t2 = load_scene(Path(plan.scene_dir) / f"subject{subject:02d}_T2.scnh")
            pd = load_scene(Path(plan.scene_dir) / f"subject{subject:02d}_PD.scnh")
        else:
            spec = subject_variant(plan.phantom, subject, plan.master_seed)
            t2, pd = generate_phantom_pair(spec)
        raw_by_protocol["T2"].append(t2)
        raw_by_protocol["PD"].append(pd)

    if verbose:
        print(f"[stdreg] correcting and standardizing {plan.subjects} subject pair(s)")
    clean, models = build_clean_set(raw_by_protocol, plan.correction, plan.standardization)

    for protocol, model in models.items():
        save_model(model, out_dir / "clean" / f"model_{protocol}.json")  # type: ignore[arg-type]
    for subject in range(plan.subjects):
        scene_t2 = clean["T2"][subject]
        scene_pd = clean["PD"][subject]
        if not np.array_equal(scene_t2.values > 0, scene_pd.values > 0):
            raise DataError(
                f"subject {subject}: protocol foreground masks differ; "
                "paired scenes must share geometry"
            )
        save_scene(scene_t2, _clean_scene_path(out_dir, subject, "T2"))
        save_scene(scene_pd, _clean_scene_path(out_dir, subject, "PD"))
        box = foreground_bounding_box(scene_t2)
        _write_json(
            _geometry_path(out_dir, subject),
            {
                "box_min": list(box.min_corner),
                "box_max": list(box.max_corner),
                "voxel_size": list(scene_t2.voxel_size),
                "center": list(scene_t2.center()),
                "dims": list(scene_t2.dims),
            },
        )


def _plan_tasks(plan: ExperimentPlan) -> list[dict]:
    tasks = []
    reg = _config_to_dict(plan.registration)
    for subject in range(plan.subjects):
        for protocol in PROTOCOLS:
            for cell in plan.grid:
                tasks.append(
                    {
                        "kind": "s",
                        "subject": subject,
                        "protocol": protocol,
                        "cell_id": cell.cell_id,
                        "registration": reg,
                    }
                )
                for level in plan.levels:
                    if level.is_clean:
                        continue  # the standardized arm doubles as the clean level
                    tasks.append(
                        {
                            "kind": "ns",
                            "subject": subject,
                            "protocol": protocol,
                            "cell_id": cell.cell_id,
                            "level_id": level.id,
                            "seed": derive_seed(
                                plan.master_seed, "inject", subject, level.id, cell.cell_id
                            ),
                            "registration": reg,
                        }
                    )
    return tasks


def _task_path(plan: ExperimentPlan, task: dict) -> Path:
    if task["kind"] == "s":
        return _s_record_path(plan.out_dir, task["subject"], task["protocol"], task["cell_id"])
    return _ns_record_path(
        plan.out_dir, task["subject"], task["protocol"], task["level_id"], task["cell_id"]
    )


def plan_echo(plan: ExperimentPlan) -> dict:
    return {
        "subjects": plan.subjects,
        "master_seed": plan.master_seed,
        "levels": [lv.id for lv in plan.levels],
        "grid": [cell.cell_id for cell in plan.grid],
        "registration": _config_to_dict(plan.registration),
        "phantom": {
            "dims": list(plan.phantom.dims),
            "voxel_size": list(plan.phantom.voxel_size),
            "noise_sigma": plan.phantom.noise_sigma,
            "bias_amplitude": plan.phantom.bias_amplitude,
            "seed": plan.phantom.seed,
        },
        "scene_dir": str(plan.scene_dir) if plan.scene_dir else None,
        "correction": {
            "theta": plan.correction.theta,
            "max_iters": plan.correction.max_iters,
            "growth_tol": plan.correction.growth_tol,
        },
        "standardization": {
            "pc1": plan.standardization.pc1,
            "pc2": plan.standardization.pc2,
            "s1": plan.standardization.s1,
            "s2": plan.standardization.s2,
        },
    }


def run_plan(plan: ExperimentPlan, verbose: bool = False) -> dict:
    """Execute a plan to completion; idempotent and crash-resumable.

    Returns counters: total work units, units executed now, units already
    present, and units that recorded failures.
    """
    plan.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(plan.out_dir / "plan.json", plan_echo(plan))
    _prepare_cohort(plan, verbose)

    tasks = _plan_tasks(plan)
    pending = [t for t in tasks if not _task_path(plan, t).exists()]
    if verbose:
        print(
            f"[stdreg] {len(tasks)} work units, {len(tasks) - len(pending)} already done, "
            f"{len(pending)} to run on {plan.workers} worker(s)"
        )

    if pending:
        if plan.workers > 1:
            # fork: workers inherit the loaded package; results are keyed by
            # file address, so scheduling order cannot affect the outputs.
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=plan.workers) as pool:
                done = 0
                for _ in pool.imap_unordered(
                    _pool_entry, [(str(plan.out_dir), t) for t in pending]
                ):
                    done += 1
                    if verbose and done % 50 == 0:
                        print(f"[stdreg] {done}/{len(pending)} units finished")
        else:
            for i, task in enumerate(pending, 1):
                run_task(plan.out_dir, task)
                if verbose and i % 50 == 0:
                    print(f"[stdreg] {i}/{len(pending)} units finished")

    failures = 0
    for task in tasks:
        payload = json.loads(_task_path(plan, task).read_text())
        if payload["status"] != "ok":
            failures += 1
    return {
        "units_total": len(tasks),
        "units_executed": len(pending),
        "units_reused": len(tasks) - len(pending),
        "units_failed": failures,
    }


def _params_or_none(result: dict | None) -> AffineParams | None:
    if not result:
        return None
    return AffineParams.from_vector(result["params"])


def load_results(out_dir: str | Path) -> tuple[list[ExperimentCell], dict]:
    """Join persisted records into experiment cells plus subject geometries.

    The standardized-arm record of each (subject, protocol, cell) also
    synthesizes the explicit ``clean`` level row, whose two arms coincide.
    """
    out_dir = Path(out_dir)
    cell_dir = out_dir / "cells"
    if not cell_dir.is_dir():
        raise DataError(f"no cell records under {out_dir}")

    s_records: dict[tuple[int, str, str], dict] = {}
    ns_records: list[dict] = []
    for path in sorted(cell_dir.glob("*.json")):
        payload = json.loads(path.read_text())
        if path.name.startswith("s_"):
            s_records[(payload["subject"], payload["protocol"], payload["cell_id"])] = payload
        else:
            ns_records.append(payload)

    cells: list[ExperimentCell] = []

    def _status(*payloads: dict) -> tuple[str, str]:
        for p in payloads:
            if p["status"] != "ok":
                return p["status"], p.get("message", "")
        return "ok", ""

    for key in sorted(s_records):
        s_rec = s_records[key]
        status, message = _status(s_rec)
        params = _params_or_none(s_rec.get("result"))
        cells.append(
            ExperimentCell(
                subject=s_rec["subject"],
                protocol=s_rec["protocol"],
                level_id="clean",
                cell_id=s_rec["cell_id"],
                group=s_rec["group"],
                truth=AffineParams.from_vector(s_rec["truth"]),
                slopes=None,
                params_s=params,
                params_ns=params,
                rmse_s=s_rec["rmse"],
                rmse_ns=s_rec["rmse"],
                status=status,
                message=message,
            )
        )

    for ns_rec in sorted(
        ns_records, key=lambda r: (r["subject"], r["protocol"], r["level_id"], r["cell_id"])
    ):
        key = (ns_rec["subject"], ns_rec["protocol"], ns_rec["cell_id"])
        s_rec = s_records.get(key)
        if s_rec is None:
            cells.append(
                ExperimentCell(
                    subject=ns_rec["subject"],
                    protocol=ns_rec["protocol"],
                    level_id=ns_rec["level_id"],
                    cell_id=ns_rec["cell_id"],
                    group=ns_rec["group"],
                    truth=AffineParams.from_vector(ns_rec["truth"]),
                    slopes=(ns_rec["m1"], ns_rec["m2"]),
                    params_s=None,
                    params_ns=_params_or_none(ns_rec.get("result")),
                    rmse_s=None,
                    rmse_ns=ns_rec["rmse"],
                    status="skipped",
                    message="missing standardized-arm record",
                )
            )
            continue
        status, message = _status(s_rec, ns_rec)
        cells.append(
            ExperimentCell(
                subject=ns_rec["subject"],
                protocol=ns_rec["protocol"],
                level_id=ns_rec["level_id"],
                cell_id=ns_rec["cell_id"],
                group=ns_rec["group"],
                truth=AffineParams.from_vector(ns_rec["truth"]),
                slopes=(ns_rec["m1"], ns_rec["m2"]),
                params_s=_params_or_none(s_rec.get("result")),
                params_ns=_params_or_none(ns_rec.get("result")),
                rmse_s=s_rec["rmse"],
                rmse_ns=ns_rec["rmse"],
                status=status,
                message=message,
            )
        )

    geometries = {}
    subj_dir = out_dir / "subjects"
    if subj_dir.is_dir():
        for path in sorted(subj_dir.glob("subject*.json")):
            subject = int(path.stem.replace("subject", ""))
            geometries[subject] = _load_geometry(out_dir, subject)
    return cells, geometries


def plan_from_config(
    config: dict,
    master_seed: int,
    out_dir: str | Path,
    workers: int | None = None,
) -> ExperimentPlan:
    """Build a plan from a JSON-compatible configuration dictionary."""
    from .phantom import Ellipsoid, TissueClass  # local: config parsing only

    phantom_cfg = config.get("phantom", {})
    tissues = ()
    if "tissues" in phantom_cfg:
        tissues = tuple(
            TissueClass(
                label=str(t["label"]),
                mean_t2=int(t["mean_t2"]),
                mean_pd=int(t["mean_pd"]),
                shape=Ellipsoid(
                    center=tuple(float(v) for v in t["center"]),
                    semi_axes=tuple(float(v) for v in t["semi_axes"]),
                ),
            )
            for t in phantom_cfg["tissues"]
        )
    phantom = PhantomSpec(
        dims=tuple(int(v) for v in phantom_cfg.get("dims", (64, 64, 64))),
        voxel_size=tuple(float(v) for v in phantom_cfg.get("voxel_size", (1.0, 1.0, 1.0))),
        tissues=tissues,
        noise_sigma=float(phantom_cfg.get("noise_sigma", 6.0)),
        bias_amplitude=float(phantom_cfg.get("bias_amplitude", 0.15)),
        seed=int(phantom_cfg.get("seed", 0)),
    )

    level_ids = config.get("levels", [lv.id for lv in default_levels()])
    levels = tuple(level_by_id(lid) for lid in level_ids)

    grid_cfg = config.get("grid", "subset27")
    if grid_cfg == "full":
        grid = tuple(deformation_grid())
    elif grid_cfg == "subset27":
        grid = tuple(grid_subset_27())
    elif isinstance(grid_cfg, list):
        grid = tuple(cell_by_id(cid) for cid in grid_cfg)
    else:
        raise DataError(f"grid must be 'full', 'subset27', or a list of cell ids, got {grid_cfg!r}")

    reg_cfg = config.get("registration", {})
    registration = RegistrationConfig(
        pyramid_levels=int(reg_cfg.get("pyramid_levels", 3)),
        max_iters=int(reg_cfg.get("max_iters", 50)),
        convergence_tol=float(reg_cfg.get("convergence_tol", 1e-6)),
        damping=float(reg_cfg.get("damping", 1e-3)),
        initial_params=AffineParams.from_vector(
            reg_cfg.get("initial_params", AffineParams().to_vector())
        ),
    )

    corr_cfg = config.get("correction", {})
    correction = CorrectionSettings(
        theta=None if corr_cfg.get("theta") is None else float(corr_cfg["theta"]),
        max_iters=int(corr_cfg.get("max_iters", 10)),
        growth_tol=float(corr_cfg.get("growth_tol", 0.05)),
    )
    std_cfg = config.get("standardization", {})
    standardization = StandardizationSettings(
        pc1=float(std_cfg.get("pc1", 0.0)),
        pc2=float(std_cfg.get("pc2", 99.8)),
        s1=int(std_cfg.get("s1", 1)),
        s2=int(std_cfg.get("s2", 4095)),
    )

    return ExperimentPlan(
        subjects=int(config.get("subjects", 5)),
        phantom=phantom,
        levels=levels,
        grid=grid,
        registration=registration,
        master_seed=master_seed,
        out_dir=Path(out_dir),
        workers=int(workers if workers is not None else config.get("workers", 1)),
        scene_dir=Path(config["scene_dir"]) if config.get("scene_dir") else None,
        correction=correction,
        standardization=standardization,
    )
