"""End-to-end refinement: ingest, preprocess, staged optimisation, outputs."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .colmap_io import (
    init_landmarks_from_points,
    read_colmap_model,
    read_depth_map,
    read_visibility_json,
    write_outputs,
)
from .evaluate import EvalReport, evaluate_against_truth
from .imaging import GrayImage, PyramidAtlas, build_pyramid, load_image, to_grayscale
from .photocost import CostConfig, PhotometricModel
from .preprocess import PreprocessConfig, preprocess
from .scene import ProblemState, world_points
from .solver import JacobianMemory, SolverConfig, optimize, write_log_csv

logger = logging.getLogger(__name__)

STAGE_LEVELS = {"quarter": 2, "half": 1, "full": 0}
FREEZABLE = ("poses", "intrinsics", "structure")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    model_dir: Path
    image_dir: Path
    output_dir: Path | None = None
    visibility: Path | None = None
    depth_dir: Path | None = None
    stages: tuple = ("half", "full")
    iterations: int = 10
    structure_iterations: int = 10
    structure_stage: bool = True
    tau: float = 0.5
    eps_sigma: float = 1e-6
    visibility_threshold: float = 0.01
    cull_sigma: float = 8.0
    mode: str = "ncc"
    solver: str = "varpro"
    weighting: str = "rho_prime"
    fixed_scale: bool = False
    freeze: frozenset = frozenset()
    shared_intrinsics: bool = False
    threads: int = 1
    seed: int = 0
    cull_percent: float = 0.0
    chunk_landmarks: int = 256
    truth_dir: Path | None = None
    plots: bool = True

    def __post_init__(self):
        self.model_dir = Path(self.model_dir)
        self.image_dir = Path(self.image_dir)
        self.freeze = frozenset(self.freeze)
        self.stages = tuple(self.stages)
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("stage list must not be empty")
        bad = [s for s in self.stages if s not in STAGE_LEVELS]
        if bad:
            raise ValueError(f"unknown stages {bad}; choose from {sorted(STAGE_LEVELS)}")
        if set(self.freeze) - set(FREEZABLE):
            raise ValueError(f"freeze accepts {FREEZABLE}")
        if self.mode not in ("ncc", "ssd"):
            raise ValueError("mode must be ncc or ssd")
        if self.solver not in ("varpro", "alternate"):
            raise ValueError("solver must be varpro or alternate")
        for name in ("tau", "eps_sigma", "visibility_threshold", "cull_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or not 0 <= self.cull_percent < 100:
            raise ValueError("iterations must be >= 0 and cull percent in [0, 100)")

    def cost_config(self) -> CostConfig:
        return CostConfig(mode=self.mode, tau=self.tau, eps_sigma=self.eps_sigma,
                          fixed_scale=self.fixed_scale, center_shift=0.5,
                          chunk_landmarks=self.chunk_landmarks, threads=self.threads)

    def as_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
            elif isinstance(v, (frozenset, set, tuple)):
                d[k] = sorted(v) if isinstance(v, (frozenset, set)) else list(v)
        return d


@dataclass
class StageResult:
    name: str
    level: int
    initial_cost: float
    final_cost: float
    log: list
    seconds: float

    def summary(self) -> dict:
        acc = [r for r in self.log if r.accepted and r.iteration > 0]
        return {"name": self.name, "level": self.level, "initial_cost": self.initial_cost,
                "final_cost": self.final_cost, "accepted": len(acc),
                "rejected": sum(1 for r in self.log if not r.accepted), "seconds": self.seconds}


@dataclass
class PipelineResult:
    state: ProblemState
    initial_state: ProblemState
    point_ids: np.ndarray
    image_ids: list
    camera_ids: list
    names: list
    stages: list = field(default_factory=list)
    preprocess: dict = field(default_factory=dict)
    landmark_cost: np.ndarray | None = None
    initial_eval: EvalReport | None = None
    final_eval: EvalReport | None = None
    jacobian_peak_bytes: int = 0
    output_dir: Path | None = None

    @property
    def log(self) -> list:
        return [r for s in self.stages for r in s.log]

    def summary(self) -> dict:
        out = {
            "n_images": self.state.n_images,
            "n_cameras": self.state.n_cameras,
            "n_landmarks": self.state.n_landmarks,
            "preprocess": self.preprocess,
            "stages": [s.summary() for s in self.stages],
            "jacobian_peak_bytes": self.jacobian_peak_bytes,
        }
        if self.final_eval is not None:
            out["initial_eval"] = self.initial_eval.as_dict()
            out["final_eval"] = self.final_eval.as_dict()
        return out


# -- ingest -------------------------------------------------------------------------------


def load_atlas(image_dir, names, sizes=None) -> PyramidAtlas:
    pyramids = []
    for k, name in enumerate(names):
        path = Path(image_dir) / name
        if not path.is_file():
            raise FileNotFoundError(f"image {path} not found")
        img = to_grayscale(load_image(path))
        if sizes is not None and (img.width, img.height) != tuple(sizes[k]):
            raise ValueError(f"{path}: size {img.width}x{img.height} does not match its camera "
                             f"{sizes[k][0]}x{sizes[k][1]}")
        pyramids.append(build_pyramid(GrayImage(img.data)))
    return PyramidAtlas(pyramids)


def _visibility_lists(config, recon, point_ids, image_index):
    if config.visibility is not None:
        table = read_visibility_json(config.visibility)
        return [[image_index[i] for i in table.get(int(pid), []) if i in image_index]
                for pid in point_ids], None
    if config.depth_dir is not None:
        maps = []
        for iid in recon.image_ids:
            stem = Path(recon.images[iid].name).stem
            maps.append(read_depth_map(Path(config.depth_dir) / f"{stem}.depth"))
        return None, maps
    raise PipelineError("preprocess", "either --visibility or --depth-dir is required")


# -- run ----------------------------------------------------------------------------------------


def run_stage(name, state, model, level, solver_config, memory=None):
    t0 = time.perf_counter()
    model.prepare(state, level)
    res = optimize(state, model, solver_config, stage=name, memory=memory)
    return res.state, StageResult(name, level, res.initial_cost, res.final_cost, res.log,
                                  time.perf_counter() - t0)


def stage_plan(config: RunConfig) -> list:
    """``(name, level, freeze, iterations)`` for every stage in order."""
    plan = []
    first = STAGE_LEVELS[config.stages[0]]
    if config.structure_stage and "structure" not in config.freeze:
        plan.append((f"structure@{config.stages[0]}", first,
                     frozenset({"poses", "intrinsics"}), config.structure_iterations))
    for s in config.stages:
        plan.append((s, STAGE_LEVELS[s], config.freeze, config.iterations))
    return plan


def run_pipeline(config: RunConfig) -> PipelineResult:
    """Ingest, preprocess, optimise stage by stage and write outputs.

    Any failure is re-raised as :class:`PipelineError` tagged with its stage;
    logs of completed stages are written first.
    """
    np.random.seed(config.seed)
    stage = "ingest"
    try:
        recon = read_colmap_model(config.model_dir)
        state0 = recon.to_state(config.shared_intrinsics)
        image_ids = recon.image_ids
        names = [recon.images[i].name for i in image_ids]
        atlas = load_atlas(config.image_dir, names, state0.image_size)
        init = init_landmarks_from_points(recon, state0)
        stage = "preprocess"
        index = {iid: k for k, iid in enumerate(image_ids)}
        vis, depth = _visibility_lists(config, recon, init.point_ids, index)
        pre_cfg = PreprocessConfig(config.visibility_threshold, config.cull_sigma, config.tau)
        state, keep, report = preprocess(init.state, atlas, vis, depth, pre_cfg)
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-tagged with the failing stage
        raise PipelineError(stage, str(exc)) from exc
    if state.n_landmarks == 0:
        raise PipelineError("preprocess", "no landmarks survived preprocessing")
    point_ids = init.point_ids[keep]
    camera_ids = recon.camera_ids if not config.shared_intrinsics else recon.camera_ids[:1]
    result = PipelineResult(state, state.copy(), point_ids, image_ids, camera_ids, names,
                            preprocess={**report.as_dict(), "dropped_behind": init.dropped})
    model = PhotometricModel(atlas, config.cost_config())
    memory = JacobianMemory()
    try:
        for name, level, freeze, iters in stage_plan(config):
            stage = name
            sc = SolverConfig(iterations=iters, solver=config.solver, weighting=config.weighting,
                              freeze=freeze)
            state, sr = run_stage(name, state, model, level, sc, memory)
            result.stages.append(sr)
            logger.info("stage %s: cost %.6g -> %.6g in %.1fs", name, sr.initial_cost,
                        sr.final_cost, sr.seconds)
        stage = "output"
        model.prepare(state, 0)
        lc, cnt = model.landmark_costs(state)
        mean_cost = lc / np.maximum(cnt, 1)
        if config.cull_percent > 0:
            # drop the worst landmarks by mean photometric cost
            cut = np.percentile(mean_cost, 100.0 - config.cull_percent)
            keep2 = mean_cost <= cut
            state = state.subset_landmarks(keep2)
            result.initial_state = result.initial_state.subset_landmarks(keep2)
            result.point_ids = result.point_ids[keep2]
            mean_cost = mean_cost[keep2]
        result.state = state
        result.landmark_cost = mean_cost
        result.jacobian_peak_bytes = memory.peak
        if config.truth_dir is not None:
            stage = "evaluate"
            result.initial_eval, result.final_eval = evaluate_run(result, config.truth_dir)
    except Exception as exc:  # noqa: BLE001
        if config.output_dir is not None:
            write_logs(config.output_dir, result)
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError(stage, str(exc)) from exc
    if config.output_dir is not None:
        write_run(config, result)
    return result


def evaluate_run(result: PipelineResult, truth_dir):
    """Initial and final accuracy against a synthetic ground-truth directory."""
    from .synthetic import load_surfaces, truth_landmark_points

    truth_dir = Path(truth_dir)
    recon = read_colmap_model(truth_dir / "truth")
    truth = recon.to_state()
    surfaces = load_surfaces(truth_dir / "scene.json")
    st = result.state
    T = truth_landmark_points(surfaces, truth, st.anchors, st.sources)
    curve = [r.cost for r in result.log if r.accepted]
    init = evaluate_against_truth(result.initial_state, truth, world_points(result.initial_state), T)
    final = evaluate_against_truth(st, truth, world_points(st), T, cost_curve=curve)
    return init, final


# -- writing ----------------------------------------------------------------------------------


def write_logs(directory, result: PipelineResult) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_log_csv(result.log, d / "iterations.csv")


def write_run(config: RunConfig, result: PipelineResult) -> Path:
    d = Path(config.output_dir)
    summary = {"config": config.as_dict(), **result.summary()}
    write_outputs(d, result.state, result.point_ids, result.image_ids, result.camera_ids,
                  result.names, result.landmark_cost, summary)
    write_logs(d, result)
    if config.plots:
        from . import plotting

        plotting.plot_cost_curve(result.log, d / "cost_curve.png")
        plotting.plot_landmark_costs(result.landmark_cost, d / "landmark_costs.png")
    return d


def load_summary(directory) -> dict:
    with open(Path(directory) / "summary.json") as fh:
        return json.load(fh)


# -- ablation ----------------------------------------------------------------------------------

ABLATIONS = {
    "structure_only": {"freeze": frozenset({"poses", "intrinsics"})},
    "structure_poses": {"freeze": frozenset({"intrinsics"})},
    "fixed_scale": {"fixed_scale": True},
    "alternate": {"solver": "alternate"},
    "one_resolution": {"stages": ("full",)},
    "ssd": {"mode": "ssd"},
    "full": {},
}


def run_ablation(base: RunConfig, variants=None, on_result=None) -> list:
    """Run each variant on the same inputs; rows hold initial/final accuracy.

    ``base`` must carry a ``truth_dir``. Outputs of a variant go to
    ``<base.output_dir>/<variant>`` when an output directory is set.
    """
    if base.truth_dir is None:
        raise ValueError("ablation needs a ground-truth directory")
    rows = []
    for name in variants or ABLATIONS:
        if name not in ABLATIONS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(ABLATIONS)}")
        kw = {**base.as_dict(), **ABLATIONS[name]}
        kw["freeze"] = frozenset(kw["freeze"])
        kw["plots"] = False
        if base.output_dir is not None:
            kw["output_dir"] = Path(base.output_dir) / name
        t0 = time.perf_counter()
        res = run_pipeline(RunConfig(**kw))
        ie, fe = res.initial_eval, res.final_eval
        row = {
            "variant": name,
            "initial_rmse": ie.landmark_rmse,
            "landmark_rmse": fe.landmark_rmse,
            "initial_rotation_deg": ie.mean_rotation_error,
            "rotation_deg": fe.mean_rotation_error,
            "translation": fe.mean_translation_error,
            "focal_pct": fe.max_focal_error,
            "final_cost": res.stages[-1].final_cost if res.stages else float("nan"),
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        logger.info("ablation %s: %s", name, row)
        if on_result is not None:
            on_result(row)
    return rows


def write_ablation(rows, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(d / "ablation.json", "w") as fh:
        json.dump(rows, fh, indent=2)
    from . import plotting

    plotting.plot_ablation(rows, d / "ablation_rmse.png")
    return d


def evaluate_output_dir(refined_dir, truth_dir) -> EvalReport:
    """Accuracy of a written refinement (``model/`` + ``landmarks.json``) against a synthetic truth."""
    from .colmap_io import read_landmarks_json
    from .synthetic import load_surfaces, truth_landmark_points

    refined_dir, truth_dir = Path(refined_dir), Path(truth_dir)
    est_recon = read_colmap_model(refined_dir / "model")
    est = est_recon.to_state()
    truth_recon = read_colmap_model(truth_dir / "truth")
    truth = truth_recon.to_state()
    if est_recon.image_ids != truth_recon.image_ids:
        raise ValueError("refined and truth models have different image ids")
    index = {iid: k for k, iid in enumerate(truth_recon.image_ids)}
    recs = read_landmarks_json(refined_dir / "landmarks.json")
    anchors = np.array([r["anchor"] for r in recs], dtype=float).reshape(-1, 2)
    sources = np.array([index[r["source_image_id"]] for r in recs], dtype=int)
    X = np.array([r["xyz"] for r in recs], dtype=float).reshape(-1, 3)
    T = truth_landmark_points(load_surfaces(truth_dir / "scene.json"), truth, anchors, sources)
    curve = []
    log = refined_dir / "iterations.csv"
    if log.is_file():
        with open(log) as fh:
            curve = [float(r["cost"]) for r in csv.DictReader(fh) if r["accepted"] == "1"]
    return evaluate_against_truth(est, truth, X, T, cost_curve=curve)
