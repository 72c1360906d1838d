"""Command-line pipeline driver.

Subcommands run one stage each over a capture-bundle directory, reading
the artifacts of upstream stages and writing their own into
<bundle>/out/. Exit codes: 0 success, 2 input or contract error,
3 numerical divergence.
"""

import argparse
import json
import os
import sys

import numpy as np

from .bundle import downsample_bundle, load_bundle
from .config import (
    PipelineConfig,
    load_config,
    save_config,
)
from .errors import (
    DependencyError,
    DivergenceError,
    HaircapError,
    SpecParseError,
)
from .field import load_field, save_field
from .fieldopt import ViewData, optimize_field
from .mesh import distance_to_mesh
from .orient2d import (
    build_filter_bank,
    estimate_orientation_map,
    load_orientation_map,
    orientation_debug_image,
    save_orientation_map,
)
from .pngio import to_grayscale, write_image
from .refine import optimize, render_strands
from .strands import read_hair, write_hair, write_obj_polylines
from .strandlatent import fit
from .synthgen import (
    GroomSpec,
    RenderStyle,
    make_synthetic_bundle,
    metric_strand_distance,
    save_synthetic_bundle,
)
from .tracer import (
    apply_parting_line,
    connect_to_scalp,
    trace_all,
    trace_report,
)

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_DIVERGENCE = 3

# groom-spec keys consumed by the capture layer rather than GroomSpec
_CAPTURE_KEYS = {"n_views", "resolution", "mask_sources", "mask_noise",
                 "camera_radius"}
_REQUIRED_SPEC_KEYS = ("style", "n_strands")


# ---------------------------------------------------------------------------
# shared plumbing


def _load_pipeline_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.refine.seed = args.seed
    return cfg


def _out_dir(args, cfg: PipelineConfig, create: bool = False) -> str:
    path = os.path.join(args.bundle, cfg.paths.out_dir)
    if create:
        os.makedirs(path, exist_ok=True)
    return path


def _load_working_bundle(args, cfg: PipelineConfig):
    bundle = load_bundle(args.bundle)
    w = bundle.cameras[0].width
    if w > cfg.working_resolution and w % cfg.working_resolution == 0:
        bundle = downsample_bundle(bundle, w // cfg.working_resolution)
    return bundle


def _require(path, stage: str):
    if not os.path.exists(path):
        raise DependencyError(
            f"missing artifact {path!r}: run the {stage!r} stage first")
    return path


def _write_stats(out_dir, name, payload: dict) -> None:
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    with open(args.spec) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise SpecParseError(f"{args.spec}:{e.lineno}:{e.colno}: {e.msg}")
    for key in _REQUIRED_SPEC_KEYS:
        if key not in data:
            raise SpecParseError(
                f"{args.spec}: missing required field {key!r}")
    capture = {k: data.pop(k) for k in list(data) if k in _CAPTURE_KEYS}
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        spec = GroomSpec(**data)
    except TypeError as e:
        raise SpecParseError(f"{args.spec}: {e}")
    sb = make_synthetic_bundle(spec, **capture)
    save_synthetic_bundle(args.bundle, sb)
    print(f"wrote bundle with {sb.bundle.n_views} views and "
          f"{len(sb.strands)} ground-truth strands to {args.bundle}")
    return EXIT_OK


def cmd_orient2d(args) -> int:
    cfg = _load_pipeline_config(args)
    bundle = _load_working_bundle(args, cfg)
    out = _out_dir(args, cfg, create=True)
    odir = os.path.join(out, cfg.paths.orient_dir)
    os.makedirs(odir, exist_ok=True)
    oc = cfg.orient2d
    bank = build_filter_bank(radius=oc.radius, wavelength=oc.wavelength,
                             aspect=oc.aspect, sigma=oc.sigma,
                             n_filters=oc.bins)
    hair_fracs = []
    for i in range(bundle.n_views):
        view = bundle.view(i)
        mask = view.label == 1
        omap = estimate_orientation_map(to_grayscale(view.image), bank, mask)
        save_orientation_map(os.path.join(odir, f"view_{i:03d}"), omap)
        if args.debug_images:
            write_image(os.path.join(odir, f"view_{i:03d}_debug.png"),
                        orientation_debug_image(omap))
        hair_fracs.append(float(mask.mean()))
    _write_stats(out, "orient2d_stats.json", {
        "views": bundle.n_views,
        "bins": oc.bins,
        "hair_pixel_fraction": hair_fracs,
    })
    print(f"orientation maps for {bundle.n_views} views -> {odir}")
    return EXIT_OK


def _load_views_with_orientations(bundle, odir) -> list:
    views = []
    for i in range(bundle.n_views):
        prefix = os.path.join(odir, f"view_{i:03d}")
        _require(prefix + "_hist.npy", "orient2d")
        omap = load_orientation_map(prefix)
        view = bundle.view(i)
        if omap.histograms.shape[:2] != view.label.shape:
            raise SpecParseError(
                "orientation maps were computed at a different working "
                "resolution; rerun the orient2d stage")
        views.append(ViewData(view.camera, view.image, view.masks,
                              orient_hist=omap.histograms))
    return views


def cmd_volume(args) -> int:
    cfg = _load_pipeline_config(args)
    bundle = _load_working_bundle(args, cfg)
    out = _out_dir(args, cfg, create=True)
    odir = os.path.join(out, cfg.paths.orient_dir)
    _require(odir, "orient2d")
    views = _load_views_with_orientations(bundle, odir)
    vc = cfg.volume
    if args.debug_images:
        vc.debug_dir = os.path.join(out, "volume_debug")
    rng = np.random.default_rng(cfg.seed)
    field, stats = optimize_field(views, bundle.bbox, vc, rng)
    save_field(os.path.join(out, cfg.paths.field_file), field)
    _write_stats(out, "volume_stats.json", {
        "resolution": list(field.shape),
        "phase1_final_loss": stats["phase1_loss"][-1]
        if stats["phase1_loss"] else None,
        "phase2_final_loss": stats["phase2_loss"][-1]
        if stats["phase2_loss"] else None,
        "steps": [len(stats["phase1_loss"]), len(stats["phase2_loss"])],
    })
    print(f"volumetric field {field.shape} -> "
          f"{os.path.join(out, cfg.paths.field_file)}")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _load_pipeline_config(args)
    bundle = _load_working_bundle(args, cfg)
    out = _out_dir(args, cfg, create=True)
    field = load_field(_require(os.path.join(out, cfg.paths.field_file),
                                "volume"))
    rng = np.random.default_rng(cfg.seed)
    volume, scalp = trace_all(field, bundle.inner, bundle.outer, cfg.trace,
                              rng)
    connected, stats = connect_to_scalp(volume, scalp, bundle.inner,
                                        cfg.trace, rng)
    removed = 0
    if bundle.parting is not None:
        vid, pts = bundle.parting
        connected, removed = apply_parting_line(
            connected, pts, bundle.cameras[vid], bundle.inner, cfg.trace)
    write_hair(os.path.join(out, cfg.paths.traced_file), connected)
    report = trace_report(volume, scalp, connected, stats)
    report["parting_removed"] = removed
    _write_stats(out, "trace_stats.json", report)
    print(f"{len(connected)} connected strands -> "
          f"{os.path.join(out, cfg.paths.traced_file)}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _load_pipeline_config(args)
    bundle = _load_working_bundle(args, cfg)
    out = _out_dir(args, cfg, create=True)
    traced = read_hair(_require(os.path.join(out, cfg.paths.traced_file),
                                "trace"))
    field = load_field(_require(os.path.join(out, cfg.paths.field_file),
                                "volume"))
    if len(traced) == 0:
        raise SpecParseError("traced strand set is empty; nothing to refine")
    model = fit(traced)
    rc = cfg.refine
    if args.debug_images and rc.render_every == 0:
        rc.render_every = max(1, rc.steps // 10)
    result = optimize(traced, bundle, field, model, rc, out_dir=out)
    refined = result.geometry(model)
    write_hair(os.path.join(out, cfg.paths.refined_file), refined)
    last = result.history[-1] if result.history else {}
    _write_stats(out, "refine_stats.json", {
        "strands": len(refined),
        "steps": len(result.history),
        "final_losses": {k: float(v) for k, v in last.items()},
    })
    if args.debug_images and bundle.n_views:
        shot = render_strands(result.strands, model, result.body,
                              bundle.cameras[0], rc.background)
        write_image(os.path.join(out, "refined_view_000.png"), shot)
    print(f"{len(refined)} refined strands -> "
          f"{os.path.join(out, cfg.paths.refined_file)}")
    return EXIT_OK


def _reconstruction_path(args, cfg: PipelineConfig) -> str:
    out = _out_dir(args, cfg)
    refined = os.path.join(out, cfg.paths.refined_file)
    if os.path.exists(refined):
        return refined
    return _require(os.path.join(out, cfg.paths.traced_file), "trace")


def cmd_export(args) -> int:
    cfg = _load_pipeline_config(args)
    strands = read_hair(_reconstruction_path(args, cfg))
    if args.format == "hair":
        write_hair(args.out, strands)
    else:
        write_obj_polylines(args.out, strands)
    print(f"exported {len(strands)} strands ({args.format}) -> {args.out}")
    return EXIT_OK


def _penetration_stats(strands, inner) -> dict:
    if not strands:
        return {"inside_fraction": 0.0, "max_depth_m": 0.0}
    verts = np.concatenate([s.vertices for s in strands])
    d, _, _ = distance_to_mesh(verts, inner)
    inside = d < 0.0
    return {
        "inside_fraction": float(inside.mean()),
        "max_depth_m": float(-d.min()) if inside.any() else 0.0,
    }


def cmd_eval(args) -> int:
    cfg = _load_pipeline_config(args)
    recon_path = _reconstruction_path(args, cfg)
    recon = read_hair(recon_path)
    gt_path = _require(os.path.join(args.bundle, "gt.hair"), "synth")
    gt = read_hair(gt_path)
    bundle = load_bundle(args.bundle)
    mean_dist, coverage, orient_deg = metric_strand_distance(recon, gt)
    roots = np.array([s.vertices[0] for s in recon])
    rd, _, _ = distance_to_mesh(roots, bundle.inner)
    report = {
        "reconstruction": os.path.basename(recon_path),
        "strands": len(recon),
        "gt_strands": len(gt),
        "mean_distance_m": float(mean_dist),
        "coverage": float(coverage),
        "orientation_error_deg": float(orient_deg),
        "root_on_scalp_rate": float(np.mean(np.abs(rd) < 1e-3)),
        "vertices_per_strand": int(np.median(
            [s.n_vertices for s in recon])),
        "penetration": _penetration_stats(recon, bundle.inner),
    }
    out = _out_dir(args, cfg, create=True)
    _write_stats(out, cfg.paths.eval_file, report)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"reconstruction: {report['reconstruction']} "
              f"({report['strands']} strands vs {report['gt_strands']} gt)")
        print(f"mean distance: {mean_dist * 1000:.3f} mm")
        print(f"coverage: {coverage:.3f}")
        print(f"orientation error: {orient_deg:.2f} deg")
        print(f"root-on-scalp rate: {report['root_on_scalp_rate']:.3f}")
        print(f"penetration inside fraction: "
              f"{report['penetration']['inside_fraction']:.4f}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _load_pipeline_config(args)
    if args.out:
        save_config(args.out, cfg)
        print(f"wrote config -> {args.out}")
    else:
        from .config import serialize_config
        sys.stdout.write(serialize_config(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--bundle", required=True,
                        help="capture bundle directory")
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the RNG seed")
    common.add_argument("--serial", action="store_true",
                        help="force deterministic single-threaded execution")
    common.add_argument("--debug-images", action="store_true",
                        help="write per-stage debug renders")

    p = argparse.ArgumentParser(prog="haircap",
                                description="strand-level hair capture "
                                            "pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", parents=[common],
                        help="generate a synthetic capture bundle")
    ps.add_argument("--spec", required=True, help="groom spec JSON")
    ps.set_defaults(func=cmd_synth)

    for name, func, text in (
            ("orient2d", cmd_orient2d, "per-view 2D orientation maps"),
            ("volume", cmd_volume, "volumetric field optimization"),
            ("trace", cmd_trace, "strand tracing and scalp connection"),
            ("refine", cmd_refine, "splat-based strand refinement")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.set_defaults(func=func)

    pe = sub.add_parser("export", parents=[common],
                        help="export the reconstruction")
    pe.add_argument("--format", choices=("obj", "hair"), default="hair")
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_export)

    pv = sub.add_parser("eval", parents=[common],
                        help="compare the reconstruction against gt.hair")
    pv.add_argument("--json", action="store_true",
                    help="machine-readable report on stdout")
    pv.set_defaults(func=cmd_eval)

    pc = sub.add_parser("config", parents=[common],
                        help="print or write the effective config")
    pc.add_argument("--out", help="write instead of printing")
    pc.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (HaircapError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
