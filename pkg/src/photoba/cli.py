"""Command-line entry point: ``refine``, ``synth``, ``eval``, ``ablate``, ``check-jacobians``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import (
    ABLATIONS,
    FREEZABLE,
    STAGE_LEVELS,
    PipelineError,
    RunConfig,
    evaluate_output_dir,
    run_ablation,
    run_pipeline,
    write_ablation,
)

logger = logging.getLogger("photoba")


def _csv_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _freeze_arg(text: str) -> list:
    items = _csv_list(text)
    bad = [i for i in items if i not in FREEZABLE]
    if bad:
        raise argparse.ArgumentTypeError(f"cannot freeze {bad}; choose from {', '.join(FREEZABLE)}")
    return items


def _stages_arg(text: str) -> tuple:
    items = _csv_list(text)
    bad = [i for i in items if i not in STAGE_LEVELS]
    if not items or bad:
        raise argparse.ArgumentTypeError(f"stages must be a comma list of {', '.join(STAGE_LEVELS)}")
    return tuple(items)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("optimisation")
    g.add_argument("--mode", choices=("ncc", "ssd"), default="ncc")
    g.add_argument("--solver", choices=("varpro", "alternate"), default="varpro")
    g.add_argument("--stages", type=_stages_arg, default=("half", "full"),
                   help="comma list of pyramid stages (default: half,full)")
    g.add_argument("--one-resolution", action="store_true", help="run the full-size stage only")
    g.add_argument("--fixed-scale", action="store_true",
                   help="sample targets at the source level instead of dynamic level selection")
    g.add_argument("--freeze", type=_freeze_arg, action="append", default=[],
                   help="poses, intrinsics and/or structure (repeatable or comma separated)")
    g.add_argument("--freeze-poses", action="store_true")
    g.add_argument("--freeze-intrinsics", action="store_true")
    g.add_argument("--shared-intrinsics", action="store_true", help="one camera for all images")
    g.add_argument("--iters", type=int, default=10, help="outer iterations per stage")
    g.add_argument("--structure-iters", type=int, default=10)
    g.add_argument("--no-structure-stage", action="store_true")
    g.add_argument("--tau", type=float, default=0.5)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cull-percent", type=float, default=0.0,
                   help="drop this percentage of landmarks with the highest mean cost")
    g.add_argument("--visibility-threshold", type=float, default=0.01)
    g.add_argument("--cull-sigma", type=float, default=8.0)


def _run_config(args, **paths) -> RunConfig:
    freeze = {f for group in args.freeze for f in group}
    if args.freeze_poses:
        freeze.add("poses")
    if args.freeze_intrinsics:
        freeze.add("intrinsics")
    return RunConfig(
        stages=("full",) if args.one_resolution else args.stages,
        iterations=args.iters,
        structure_iterations=args.structure_iters,
        structure_stage=not args.no_structure_stage,
        tau=args.tau,
        visibility_threshold=args.visibility_threshold,
        cull_sigma=args.cull_sigma,
        mode=args.mode,
        solver=args.solver,
        fixed_scale=args.fixed_scale,
        freeze=frozenset(freeze),
        shared_intrinsics=args.shared_intrinsics,
        threads=args.threads,
        seed=args.seed,
        cull_percent=args.cull_percent,
        **paths,
    )


def cmd_refine(args) -> int:
    if args.visibility is None and args.depth_dir is None:
        raise SystemExit("refine: --visibility or --depth-dir is required")
    cfg = _run_config(args, model_dir=args.model, image_dir=args.images, output_dir=args.output,
                      visibility=args.visibility, depth_dir=args.depth_dir, truth_dir=args.truth,
                      plots=not args.no_plots)
    res = run_pipeline(cfg)
    for s in res.stages:
        print(f"{s.name:>16}: cost {s.initial_cost:.6g} -> {s.final_cost:.6g} ({s.seconds:.1f}s)")
    if res.final_eval is not None:
        ie, fe = res.initial_eval, res.final_eval
        print(f"landmark RMSE {ie.landmark_rmse:.4g} -> {fe.landmark_rmse:.4g}; "
              f"rotation {ie.mean_rotation_error:.4g} -> {fe.mean_rotation_error:.4g} deg; "
              f"focal error {fe.max_focal_error:.3g}%")
    print(f"outputs written to {args.output}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import SceneSpec, generate_synthetic_scene, write_synthetic_scene

    spec = SceneSpec(n_images=args.n_images, width=args.width, height=args.height,
                     n_landmarks=args.landmarks, rotation_deg=args.rotation_deg,
                     translation_frac=args.translation_frac, focal_frac=args.focal_frac,
                     depth_frac=args.depth_frac, relight=not args.no_relight)
    if args.no_perturbation:
        spec.rotation_deg = spec.translation_frac = spec.focal_frac = spec.depth_frac = 0.0
    scene = generate_synthetic_scene(args.seed, spec)
    d = write_synthetic_scene(scene, args.output)
    print(f"wrote {scene.truth.n_images} images and {scene.truth.n_landmarks} landmarks to {d}")
    return 0


def cmd_eval(args) -> int:
    rep = evaluate_output_dir(args.refined, args.truth)
    out = rep.as_dict()
    text = json.dumps(out, indent=2)
    if args.json:
        Path(args.json).write_text(text)
    print(f"landmark RMSE {rep.landmark_rmse:.6g}  mean rotation error {rep.mean_rotation_error:.4g} deg  "
          f"mean translation error {rep.mean_translation_error:.4g}  max focal error "
          f"{rep.max_focal_error:.4g}%  alignment residual {rep.alignment_residual:.3g}")
    return 0


def cmd_ablate(args) -> int:
    d = Path(args.synth)
    base = _run_config(args, model_dir=d / "initial", image_dir=d / "images",
                       visibility=d / "visibility.json", truth_dir=d, output_dir=None)
    rows = run_ablation(base, args.variants,
                        on_result=lambda r: print(f"{r['variant']:>16}: RMSE {r['initial_rmse']:.4g}"
                                                  f" -> {r['landmark_rmse']:.4g} ({r['seconds']:.0f}s)"))
    write_ablation(rows, args.output)
    print(f"ablation table written to {args.output}")
    return 0


def cmd_check_jacobians(args) -> int:
    from .validate import check_jacobians

    rep = check_jacobians(args.configs, seed=args.seed, step=args.step, engine=args.engine)
    print(json.dumps(rep.as_dict(), indent=2))
    ok = rep.passed(args.tol)
    print("PASS" if ok else "FAIL", f"max relative error {rep.max_rel_error:.3e} (tol {args.tol:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="photoba", description="Photometric bundle adjustment")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="refine a text-format reconstruction")
    p.add_argument("--model", type=Path, required=True, help="text model directory")
    p.add_argument("--images", type=Path, required=True, help="image directory")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--visibility", type=Path, help="JSON list of {landmark_id, visible_image_ids}")
    p.add_argument("--depth-dir", type=Path, help="<image stem>.depth rasters")
    p.add_argument("--truth", type=Path, help="synthetic scene directory for accuracy metrics")
    p.add_argument("--no-plots", action="store_true")
    _add_run_options(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("synth", help="render a synthetic ground-truth scene")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=10)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--landmarks", type=int, default=2000)
    p.add_argument("--rotation-deg", type=float, default=0.5)
    p.add_argument("--translation-frac", type=float, default=0.01)
    p.add_argument("--focal-frac", type=float, default=0.02)
    p.add_argument("--depth-frac", type=float, default=0.02)
    p.add_argument("--no-perturbation", action="store_true")
    p.add_argument("--no-relight", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="accuracy of a refinement against synthetic truth")
    p.add_argument("--refined", type=Path, required=True, help="output directory of refine")
    p.add_argument("--truth", type=Path, required=True, help="synthetic scene directory")
    p.add_argument("--json", type=Path, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation variants on a synthetic scene")
    p.add_argument("--synth", type=Path, required=True, help="synthetic scene directory")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--variants", type=_csv_list, default=None,
                   help=f"comma list from {', '.join(ABLATIONS)} (default: all)")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check-jacobians", help="finite-difference check of residual derivatives")
    p.add_argument("--configs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--engine", choices=("dual", "staged"), default="dual")
    p.set_defaults(func=cmd_check_jacobians)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
