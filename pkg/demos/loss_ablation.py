"""Switch individual loss terms off and watch the fit quality move.

Front-view distance on cars: heading error with and without it.
BEV-center term on pedestrians/cyclists: center error with and without it.
"""
import numpy as np

from frustumbox.boxsearch import LossWeights, search_box
from frustumbox.fixtures import cs_fixture_set, prior_for, ss_fixture_set
from frustumbox.lidarsim import cast_rays


def fit(scene, weights):
    obj = scene.objects[0]
    res = search_box(cast_rays(scene).instance_points(1), prior_for(obj.class_id), weights)
    return res.box, obj.box


def heading_err(a, b):
    return np.rad2deg(abs(np.angle(np.exp(2j * (a - b)))) / 2)


n = 20
for lam1 in (0.0, 0.2):
    errs = [heading_err(*(b.heading for b in fit(s, LossWeights(lam1, 0.2)))) for s in ss_fixture_set(n)]
    print(f"cars, lambda1={lam1}: median heading error {np.median(errs):6.2f} deg")

for lam2 in (0.0, 0.2):
    errs = []
    for s in cs_fixture_set(n):
        fitted, truth = fit(s, LossWeights(0.2, lam2))
        errs.append(np.linalg.norm(fitted.center[:2] - truth.center[:2]))
    print(f"pedestrians/cyclists, lambda2={lam2}: median center error {np.median(errs):.3f} m")
