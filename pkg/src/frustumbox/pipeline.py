"""Simulate, lift, fit and score in one pass; shared by the CLI and the demos."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .boxsearch import InsufficientEvidence, LossWeights, SearchConfig, search_box
from .evaluation import Detection, EvalConfig, evaluate, map_report
from .geometry import CS, SS, AnchorPrior, CameraCalibration, InstanceMaskSet, lift_masks
from .lidarsim import LidarSpec, SceneSpec, SimOutput, cast_rays, render_masks

JOBS_ENV = "FRUSTUMBOX_JOBS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class FitRecord:
    instance: int
    class_id: int
    score: float
    result: object  # SearchResult, or None when the instance had too few points
    error: str | None = None

    def as_dict(self) -> dict:
        if self.result is None:
            return {"instance": self.instance, "class": self.class_id, "score": self.score,
                    "error": self.error}
        r = self.result
        return {"instance": self.instance, "class": self.class_id, "score": self.score,
                "box": r.box.as_array().tolist(), "loss": r.breakdown.as_dict(),
                "converged": bool(r.converged)}


def simulate(scene: SceneSpec, lidar: LidarSpec | None = None,
             calib: CameraCalibration | None = None, dilation: int = 2):
    calib = calib or CameraCalibration.looking_forward()
    sim = cast_rays(scene, lidar)
    return sim, render_masks(sim, calib, dilation), calib


def _fit_one(args):
    inst, cls, score, pts, prior, weights, config = args
    try:
        return FitRecord(inst, cls, score, search_box(pts, prior, weights, config))
    except InsufficientEvidence as err:
        return FitRecord(inst, cls, score, None, str(err))


def fit_instances(points, masks: InstanceMaskSet, calib: CameraCalibration,
                  priors: dict[int, AnchorPrior], weights: LossWeights = LossWeights(),
                  config: SearchConfig = SearchConfig(), jobs: int = 1) -> list[FitRecord]:
    """Lift every mask instance and fit its class prior; ordered by instance id."""
    lifted = lift_masks(points, masks, calib)
    work = []
    for inst in masks.instance_ids():
        cls = masks.instance_class[inst]
        if cls not in priors:
            raise KeyError(f"no prior for class {cls} (instance {inst})")
        pts = lifted.get(inst, np.zeros((0, 3)))
        work.append((inst, cls, masks.instance_score[inst], pts, priors[cls], weights, config))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_fit_one, work))
    else:
        records = [_fit_one(w) for w in work]
    return sorted(records, key=lambda r: r.instance)


def detections_from(records) -> list[Detection]:
    return [Detection(r.result.box, r.class_id, r.score) for r in records if r.result is not None]


def gt_pairs(sim: SimOutput):
    return [(box, cls) for _, box, cls, _ in sim.gt_boxes]


def run_pipeline(scene: SceneSpec, priors: dict[int, AnchorPrior], lidar: LidarSpec | None = None,
                 weights: LossWeights = LossWeights(), config: SearchConfig = SearchConfig(),
                 eval_config: EvalConfig | None = None, jobs: int = 1, dilation: int = 2) -> dict:
    """Returns sim, masks, calib, fit records, per-class AP and the grouped report."""
    sim, masks, calib = simulate(scene, lidar, dilation=dilation)
    records = fit_instances(sim.cloud.xyz, masks, calib, priors, weights, config, jobs)
    eval_config = eval_config or EvalConfig()
    per_class = evaluate(detections_from(records), gt_pairs(sim), eval_config)
    ss = sorted(c for c, p in priors.items() if p.structure == SS and c in per_class)
    cs = sorted(c for c, p in priors.items() if p.structure == CS and c in per_class)
    common = eval_config.common or tuple(ss)
    novel = eval_config.novel or tuple(cs)
    report = map_report(per_class, common, novel)
    return {"sim": sim, "masks": masks, "calib": calib, "records": records,
            "per_class": per_class, "report": report}
