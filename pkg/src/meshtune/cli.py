"""Command-line interface.

Subcommands: tune, prealign, attach-filter, metrics, gen-scene, export-inp.
Exit codes: 0 success, 2 invalid inputs, 3 optimization abort.

The MESHTUNE_THREADS environment variable caps the BLAS/OpenMP worker count;
it is applied before numpy is imported, so heavy imports stay inside the
command handlers.
"""

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_OPT_ABORT = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("MESHTUNE_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ[var] = cap


def _load_config(args) -> "TuneConfig":
    from .errors import InputError
    from .pipeline import TuneConfig

    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="ascii") as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") \
                from exc
    overrides = {
        "lambda_user": getattr(args, "lambda_user", None),
        "lambda2_d2": getattr(args, "lambda2", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "iterations": getattr(args, "iterations", None),
        "control_spacing": getattr(args, "control_spacing", None),
        "regularizer": getattr(args, "regularizer", None),
        "tau_cos": getattr(args, "tau_cos", None),
        "tau_dist": getattr(args, "tau_dist", None),
        "seed": getattr(args, "seed", None),
    }
    for key, val in overrides.items():
        if val is not None:
            data[key] = val
    return TuneConfig.from_dict(data)


def _load_attachment(args):
    from . import io

    if getattr(args, "mask", None):
        return io.load_mask(args.mask)
    if getattr(args, "attach_surface", None):
        return io.load_surface(args.attach_surface)
    return None


def _cmd_tune(args) -> int:
    from . import io
    from .pipeline import flexfit_pseudolabels, tune

    timings = {}
    t0 = time.perf_counter()
    template = io.load_mesh(args.template, template=True)
    snap = io.load_mesh(args.snap_mesh, template=True)
    config = _load_config(args)
    attachment = _load_attachment(args)
    timings["load"] = time.perf_counter() - t0

    if args.pseudolabels:
        pseudo = io.load_points(args.pseudolabels)
    else:
        labels = io.load_points(args.labels)
        t0 = time.perf_counter()
        pseudo = flexfit_pseudolabels(snap, labels, config)
        timings["flexfit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    final, report = tune(snap, template, pseudo, attachment=attachment,
                         config=config)
    timings["tune"] = time.perf_counter() - t0
    report.timings_sec.update(timings)

    os.makedirs(args.out_dir, exist_ok=True)
    io.save_mesh(final, os.path.join(args.out_dir, "mesh_tuned.mesh"))
    io.write_report(report, os.path.join(args.out_dir, "report.json"))
    io.write_loss_trace_csv(report.loss_trace,
                            os.path.join(args.out_dir, "loss_trace.csv"))
    io.write_timings(report, os.path.join(args.out_dir, "timings.json"))
    print(f"tune finished: {len(report.loss_trace)} iterations, "
          f"final total {report.final_losses['total']:.6g}, "
          f"mean displacement {report.displacement_mean_mm:.4g} mm")
    return EXIT_OK


def _cmd_prealign(args) -> int:
    from . import io
    from .field import deform_mesh
    from .loss import classwise_chamfer
    from .mesh import base_surface_points
    from .pipeline import coarse_init, prealign_affine

    timings = {}
    t0 = time.perf_counter()
    template = io.load_mesh(args.template, template=True)
    targets = io.load_points(args.labels)
    config = _load_config(args)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    affine, aligned = prealign_affine(template, targets)
    timings["affine"] = time.perf_counter() - t0
    chamfer_affine, _ = classwise_chamfer(base_surface_points(aligned), targets)

    t0 = time.perf_counter()
    grid = coarse_init(aligned, targets, config, rest_mesh=template)
    coarse, _ = deform_mesh(aligned, grid, steps=config.squaring_steps)
    timings["coarse_init"] = time.perf_counter() - t0
    chamfer_coarse, _ = classwise_chamfer(base_surface_points(coarse), targets)

    os.makedirs(args.out_dir, exist_ok=True)
    io.save_mesh(coarse, os.path.join(args.out_dir, "mesh_prealigned.mesh"))
    report = {
        "affine": [[float(x) for x in row] for row in affine],
        "chamfer_after_affine_mm2": chamfer_affine,
        "chamfer_after_coarse_mm2": chamfer_coarse,
        "config": config.to_dict(),
    }
    with open(os.path.join(args.out_dir, "report.json"), "w",
              encoding="ascii") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out_dir, "timings.json"), "w",
              encoding="ascii") as fh:
        json.dump({"timings_sec": timings}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"prealign finished: chamfer {chamfer_affine:.6g} -> "
          f"{chamfer_coarse:.6g} mm^2")
    return EXIT_OK


def _cmd_attach_filter(args) -> int:
    from . import io
    from .attach import VoxelMask, group_and_filter, isosurface
    from .errors import InputError

    mesh = io.load_mesh(args.mesh, template=True)
    attachment = _load_attachment(args)
    if attachment is None:
        raise InputError("one of --mask/--attach-surface is required")
    S = isosurface(attachment) if isinstance(attachment, VoxelMask) \
        else attachment
    pairing = group_and_filter(mesh, S, args.tau_cos, args.tau_dist)
    os.makedirs(args.out_dir, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairing.pairs):
        name = f"attachment_{i}.surf"
        io.save_surface(pair.surface, os.path.join(args.out_dir, name))
        entries.append({
            "component": int(pair.component),
            "component_name": mesh.component_names[pair.component],
            "surface_file": name,
            "n_points": int(pair.surface.n_vertices),
            "n_faces": int(pair.surface.n_faces),
            "empty": bool(pair.empty),
            "nearest_vertex": [int(v) for v in pair.nearest_vertex],
        })
    with open(os.path.join(args.out_dir, "pairing.json"), "w",
              encoding="ascii") as fh:
        json.dump({"tau_cos": args.tau_cos, "tau_dist": args.tau_dist,
                   "pairs": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"attach-filter finished: {len(pairing)} pairs, "
          f"{sum(not p.empty for p in pairing.pairs)} nonempty")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from . import io
    from .metrics import MeshReport, mesh_report

    mesh = io.load_mesh(args.mesh)
    reference_points = io.load_points(args.reference_points) \
        if args.reference_points else None
    reference_mesh = io.load_mesh(args.reference_mesh) \
        if args.reference_mesh else None
    report = mesh_report(mesh, reference_points=reference_points,
                         reference_mesh=reference_mesh)
    print(MeshReport.table_header())
    print(report.table_row(os.path.basename(args.mesh)))
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _cmd_gen_scene(args) -> int:
    from . import io

    kwargs = {}
    if args.kind == "calcified-tube" and args.blob_gap is not None:
        kwargs["blob_gap"] = args.blob_gap
    paths = io.gen_synthetic_scene(args.kind, args.seed, args.out_dir,
                                   **kwargs)
    print(f"gen-scene finished: wrote {len(paths)} files to {args.out_dir}")
    return EXIT_OK


def _cmd_export_inp(args) -> int:
    from . import io

    mesh = io.load_mesh(args.mesh)
    io.export_inp(mesh, args.out)
    print(f"export-inp finished: {args.out}")
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key-value JSON config file")
    p.add_argument("--lambda-user", type=float, dest="lambda_user",
                   help="regularizer weight (default 1)")
    p.add_argument("--lambda2", type=float, help="attachment pull weight")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--iterations", type=int)
    p.add_argument("--control-spacing", type=float, dest="control_spacing",
                   help="control point spacing, mm")
    p.add_argument("--regularizer", choices=("volumetric", "field-bending"))
    p.add_argument("--tau-cos", type=float, dest="tau_cos")
    p.add_argument("--tau-dist", type=float, dest="tau_dist")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshtune",
        description="Test-time tuning of volumetric template meshes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="refine a snap mesh against pseudo-labels")
    p.add_argument("--snap-mesh", required=True, dest="snap_mesh")
    p.add_argument("--template", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--labels", help="target points; pseudo-labels are "
                       "generated with the flex-fit stand-in")
    group.add_argument("--pseudolabels", help="pseudo-label points used as-is")
    p.add_argument("--mask", help="attachment voxel mask (.raw + .json)")
    p.add_argument("--attach-surface", dest="attach_surface",
                   help="pre-extracted attachment surface file")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("prealign", help="affine + coarse-grid initialization")
    p.add_argument("--template", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_prealign)

    p = sub.add_parser("attach-filter",
                       help="group and filter attachment surfaces")
    p.add_argument("--mesh", required=True)
    p.add_argument("--mask")
    p.add_argument("--attach-surface", dest="attach_surface")
    p.add_argument("--tau-cos", type=float, default=0.5, dest="tau_cos")
    p.add_argument("--tau-dist", type=float, default=2.5, dest="tau_dist")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=_cmd_attach_filter)

    p = sub.add_parser("metrics", help="evaluate a mesh against references")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference-points", dest="reference_points")
    p.add_argument("--reference-mesh", dest="reference_mesh")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("gen-scene", help="generate a synthetic benchmark scene")
    p.add_argument("--kind", required=True,
                   choices=("tube-bulge", "slab", "calcified-tube"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blob-gap", type=float, dest="blob_gap",
                   help="gap between blobs and wall, mm (calcified-tube)")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("export-inp", help="export a mesh to Abaqus INP")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_inp)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import InputError, OptimizationError

    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OptimizationError as exc:
        print(f"optimization aborted: {exc}", file=sys.stderr)
        return EXIT_OPT_ABORT


if __name__ == "__main__":
    sys.exit(main())
