"""Command-line entry point: ``frustumbox <subcommand> ...``.

Exit status is 0 on success, 1 on a domain error (one JSON line on stderr)
and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .boxsearch import InsufficientEvidence, LossWeights, SearchConfig
from .evaluation import EvalConfig, evaluate, format_report, map_report
from .geometry import CS, SS, as_points, filter_background, lift_masks, mean_size_prior
from .lidarsim import cast_rays, render_masks
from .pipeline import default_jobs, detections_from, fit_instances, JOBS_ENV
from .proto import TrainConfig, nearest_prototype, train_prototypes

log = logging.getLogger("frustumbox")


class DomainError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(formats.sig9(obj), indent=2)


def _emit(obj, path=None):
    if path:
        formats.write_json(path, obj)
    else:
        sys.stdout.write(_dumps(obj) + "\n")


# argument groups shared between subcommands

def _add_search_flags(p):
    g = p.add_argument_group("box search")
    g.add_argument("--lambda1", type=float, default=0.2, help="weight of the front-view term (default 0.2)")
    g.add_argument("--lambda2", type=float, default=0.2, help="weight of the BEV-center term (default 0.2)")
    g.add_argument("--starts", type=int, default=8, help="number of evenly spaced start headings (default 8)")
    g.add_argument("--tol", type=float, default=1e-6, help="gradient-norm tolerance (default 1e-6)")
    g.add_argument("--max-iters", type=int, default=100, help="BFGS iteration cap per start (default 100)")
    g.add_argument("--normalize", action="store_true", help="divide each loss term by the point count")
    g.add_argument("--jobs", type=int, default=None,
                   help=f"worker processes across instances (default ${JOBS_ENV} or 1)")


def _search_setup(args):
    if args.starts < 1 or args.max_iters < 1 or args.tol <= 0:
        raise DomainError("--starts and --max-iters must be >= 1 and --tol > 0")
    weights = LossWeights(args.lambda1, args.lambda2)
    config = SearchConfig.with_starts(args.starts, gtol=args.tol, max_iters=args.max_iters,
                                      normalize=args.normalize)
    jobs = default_jobs() if args.jobs is None else args.jobs
    if jobs < 1:
        raise DomainError("--jobs must be >= 1")
    return weights, config, jobs


def _add_mask_inputs(p):
    p.add_argument("--cloud", required=True, help="point cloud (.bin float32 x,y,z,i or ASCII)")
    p.add_argument("--masks", required=True, help="IMSK instance mask file")
    p.add_argument("--meta", required=True, help="mask metadata JSON {id: {class, score}}")
    p.add_argument("--calib", required=True, help="calibration JSON")


def _write_sim(out: Path, sim, masks, calib, cloud_ext):
    out.mkdir(parents=True, exist_ok=True)
    formats.write_cloud(out / f"cloud{cloud_ext}", sim.cloud)
    formats.write_masks(out / "masks.imsk", out / "masks.json", masks)
    formats.write_calibration(out / "calib.json", calib)
    formats.write_json(out / "gt.json", [
        {"instance": inst, "class": cls, "structure": st, "box": box.as_array().tolist()}
        for inst, box, cls, st in sim.gt_boxes])


def _simulate(args):
    from .geometry import CameraCalibration

    scene, lidar = formats.read_scene(args.scene, args.seed)
    calib = formats.read_calibration(args.calib) if args.calib else CameraCalibration.looking_forward()
    sim = cast_rays(scene, lidar)
    masks = render_masks(sim, calib, args.dilation)
    _write_sim(Path(args.out), sim, masks, calib, args.cloud_ext)
    return scene, sim, masks, calib


def cmd_simulate(args):
    _, sim, masks, _ = _simulate(args)
    _emit({"points": len(sim.cloud), "instances": masks.instance_ids(), "out": str(args.out)})


def _fit_records(args, cloud_xyz, masks, calib, priors):
    weights, config, jobs = _search_setup(args)
    if len(cloud_xyz) == 0:
        raise InsufficientEvidence("insufficient evidence: empty point cloud")
    records = fit_instances(cloud_xyz, masks, calib, priors, weights, config, jobs)
    if records and all(r.result is None for r in records):
        raise InsufficientEvidence("insufficient evidence: no instance has enough points")
    for r in records:
        if r.result is None:
            log.warning("instance %d skipped: %s", r.instance, r.error)
    return records


def cmd_fit(args):
    cloud = formats.read_cloud(args.cloud)
    masks = formats.read_masks(args.masks, args.meta)
    calib = formats.read_calibration(args.calib)
    priors = formats.read_priors(args.priors)
    records = _fit_records(args, cloud.xyz, masks, calib, priors)
    _emit([r.as_dict() for r in records], args.out)


def cmd_lift(args):
    cloud = formats.read_cloud(args.cloud)
    masks = formats.read_masks(args.masks, args.meta)
    calib = formats.read_calibration(args.calib)
    lifted = lift_masks(cloud.xyz, masks, calib)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for inst in masks.instance_ids():
        pts = lifted.get(inst, np.zeros((0, 3)))
        if args.filter:
            pts = filter_background(pts)
        path = out / f"instance_{inst}{args.cloud_ext}"
        formats.write_cloud(path, formats.PointCloud(as_points(pts)))
        summary.append({"instance": inst, "class": masks.instance_class[inst],
                        "points": len(pts), "file": path.name})
    _emit(summary)


def cmd_proto(args):
    anchors = formats.read_matrix(args.anchors)
    if anchors.shape[0] < 2:
        raise DomainError("need at least two anchor rows")
    rng = np.random.default_rng(args.seed)
    bank = rng.standard_normal(anchors.shape)
    if args.maml:
        from .maml import meta_train_prototypes

        bank, trace = meta_train_prototypes(bank, anchors, rng, args.steps, args.lr, args.lr,
                                            args.tau, args.lam)
    else:
        config = TrainConfig(lr=args.lr, steps=args.steps, tau=args.tau, lam=args.lam, seed=args.seed)
        bank, trace = train_prototypes(bank, anchors, config)
    formats.write_matrix(args.bank, bank)
    with open(args.trace, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v:.9g}\n")
    acc = float(np.mean(nearest_prototype(anchors, bank) == np.arange(len(anchors))))
    _emit({"final_loss": float(trace[-1]), "accuracy": acc, "steps": args.steps})


def _eval_config(path) -> tuple[EvalConfig, dict]:
    if not path:
        return EvalConfig(), {}
    d = formats.read_json(path)
    try:
        names = {int(k): v for k, v in d.get("names", {}).items()}
        return EvalConfig(d.get("iou_thresholds", {}), d.get("default_iou", 0.5),
                          d.get("score_threshold", 0.0), tuple(d.get("common", ())),
                          tuple(d.get("novel", ())), int(d.get("recall_points", 40))), names
    except (AttributeError, TypeError, ValueError) as err:
        raise formats.MalformedFile(path, 0, f"bad eval config: {err}") from None


def _report_dict(report) -> dict:
    return {"per_class": {str(k): v for k, v in sorted(report.per_class.items())},
            "common": report.common, "novel": report.novel, "overall": report.overall}


def cmd_eval(args):
    dets = formats.read_detections(args.detections)
    gts = formats.read_gt(args.gt)
    config, names = _eval_config(args.config)
    report = map_report(evaluate(dets, gts, config), config.common, config.novel)
    _emit(_report_dict(report), args.out)
    table = format_report(report, names)
    if args.table:
        Path(args.table).write_text(table + "\n")
    else:
        sys.stderr.write(table + "\n") if args.out is None else sys.stdout.write(table + "\n")


def cmd_pipeline(args):
    out = Path(args.out)
    scene, sim, masks, calib = _simulate(args)
    structures = {o.class_id: o.structure for o in scene.objects}
    if args.priors:
        priors = formats.read_priors(args.priors)
    else:
        # the few-shot stand-in: mean size of the labeled boxes per class
        priors = {p.class_id: p for p in mean_size_prior(
            [(cls, box) for _, box, cls, _ in sim.gt_boxes], structures)}
    formats.write_priors(out / "priors.json", [priors[c] for c in sorted(priors)])
    records = _fit_records(args, sim.cloud.xyz, masks, calib, priors)
    formats.write_json(out / "detections.json", [r.as_dict() for r in records])
    config, names = _eval_config(args.config)
    per_class = evaluate(detections_from(records), [(b, c) for _, b, c, _ in sim.gt_boxes], config)
    common = config.common or tuple(c for c in sorted(per_class) if structures.get(c) == SS)
    novel = config.novel or tuple(c for c in sorted(per_class) if structures.get(c) == CS)
    report = map_report(per_class, common, novel)
    formats.write_json(out / "report.json", _report_dict(report))
    table = format_report(report, names)
    (out / "report.txt").write_text(table + "\n")
    sys.stdout.write(table + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frustumbox",
                                     description="Mask-guided 3D box fitting on LiDAR points.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def sim_flags(p):
        p.add_argument("--scene", required=True, help="scene JSON (objects, ground, optional lidar)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="noise / part-layout seed (default 0)")
        p.add_argument("--calib", default=None, help="calibration JSON (default: forward camera)")
        p.add_argument("--dilation", type=int, default=2, help="mask dilation radius in pixels (default 2)")
        p.add_argument("--cloud-ext", choices=[".bin", ".txt"], default=".bin",
                       help="point cloud file format (default .bin)")

    p = sub.add_parser("simulate", help="ray-cast a scene and render instance masks")
    sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one box per mask instance")
    _add_mask_inputs(p)
    p.add_argument("--priors", required=True, help="priors JSON list of {class, h, w, l, structure}")
    p.add_argument("--out", default=None, help="output JSON (default stdout)")
    _add_search_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("lift", help="write the frustum points of every mask instance")
    _add_mask_inputs(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--filter", action="store_true", help="apply the mean +- 2 std background filter")
    p.add_argument("--cloud-ext", choices=[".bin", ".txt"], default=".bin",
                   help="point cloud file format (default .bin)")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("proto", help="train a prototype bank against anchor features")
    p.add_argument("--anchors", required=True, help="anchor feature matrix (u32 rows, u32 cols, float32)")
    p.add_argument("--bank", required=True, help="output prototype matrix")
    p.add_argument("--trace", required=True, help="output loss trace CSV")
    p.add_argument("--tau", type=float, default=0.07, help="InfoNCE temperature (default 0.07)")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="contrastive weight (default 1.0)")
    p.add_argument("--lr", type=float, default=0.1, help="step size (default 0.1)")
    p.add_argument("--steps", type=int, default=500, help="descent or meta steps (default 500)")
    p.add_argument("--seed", type=int, default=0, help="bank initialization seed (default 0)")
    p.add_argument("--maml", action="store_true", help="meta-train with noisy support anchors")
    p.set_defaults(func=cmd_proto)

    p = sub.add_parser("eval", help="per-class AP and group mAP")
    p.add_argument("--detections", required=True, help="detections JSON list of {class, score, box}")
    p.add_argument("--gt", required=True, help="ground-truth JSON list of {class, box}")
    p.add_argument("--config", default=None, help="eval config JSON (thresholds, groups, names)")
    p.add_argument("--out", default=None, help="report JSON (default stdout)")
    p.add_argument("--table", default=None, help="text table path (default: printed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="simulate, lift, fit and evaluate in one run")
    sim_flags(p)
    p.add_argument("--priors", default=None, help="priors JSON (default: mean GT size per class)")
    p.add_argument("--config", default=None, help="eval config JSON")
    _add_search_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _error_record(kind, err) -> str:
    rec = {"error": kind, "message": str(err)}
    if isinstance(err, formats.MalformedFile):
        rec.update(file=err.path, offset=err.offset)
    return json.dumps(rec)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except InsufficientEvidence as err:
        sys.stderr.write(_error_record("insufficient evidence", err) + "\n")
        return 1
    except formats.MalformedFile as err:
        sys.stderr.write(_error_record("malformed file", err) + "\n")
        return 1
    except (DomainError, ValueError, KeyError, FloatingPointError, OSError) as err:
        sys.stderr.write(_error_record(type(err).__name__, err) + "\n")
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
