"""Seeded simulated scenes used by the tests, demos and the CLI pipeline."""
from __future__ import annotations

import numpy as np

from .geometry import CS, SS, AnchorPrior, BoxParams
from .lidarsim import SceneObject, SceneSpec

# KITTI-like mean sizes (h, w, l)
CAR_SIZE = (1.56, 1.6, 3.9)
PEDESTRIAN_SIZE = (1.76, 0.66, 0.84)
CYCLIST_SIZE = (1.74, 0.6, 1.76)

CAR, PEDESTRIAN, CYCLIST = 0, 1, 2
CLASS_NAMES = {CAR: "Car", PEDESTRIAN: "Pedestrian", CYCLIST: "Cyclist"}
SIZES = {CAR: CAR_SIZE, PEDESTRIAN: PEDESTRIAN_SIZE, CYCLIST: CYCLIST_SIZE}
STRUCTURES = {CAR: SS, PEDESTRIAN: CS, CYCLIST: CS}


def prior_for(class_id: int) -> AnchorPrior:
    return AnchorPrior(class_id, SIZES[class_id], STRUCTURES[class_id])


def grounded_box(x, y, size, heading) -> BoxParams:
    """Box resting on the ground plane z = 0."""
    return BoxParams([x, y, size[0] / 2.0], size, heading)


def single_object_scene(class_id: int, seed: int, min_range=5.0, max_range=40.0,
                        half_fov=np.deg2rad(35.0)) -> SceneSpec:
    """One object at a random range/bearing in front of the sensor."""
    rng = np.random.default_rng([7, class_id, seed])
    r = rng.uniform(min_range, max_range)
    bearing = rng.uniform(-half_fov, half_fov)
    heading = rng.uniform(0.0, 2 * np.pi)
    size = SIZES[class_id]
    box = grounded_box(r * np.cos(bearing), r * np.sin(bearing), size, heading)
    return SceneSpec([SceneObject(box, class_id, STRUCTURES[class_id])], ground=False, seed=seed)


def ss_fixture_set(n=50, **kw) -> list[SceneSpec]:
    return [single_object_scene(CAR, s, **kw) for s in range(n)]


def cs_fixture_set(n=50, **kw) -> list[SceneSpec]:
    return [single_object_scene(PEDESTRIAN if s % 2 == 0 else CYCLIST, s, **kw) for s in range(n)]


def mixed_scene(seed: int = 0, ground: bool = False) -> SceneSpec:
    """Three cars and two irregular objects inside the camera view.

    Bearings are spread out so that no object shadows another.
    """
    placements = [
        (CAR, 13.0, -6.0, 0.3),
        (CAR, 22.0, 7.0, 1.9),
        (CAR, 30.0, -6.0, 2.8),
        (PEDESTRIAN, 10.0, 6.0, 0.8),
        (CYCLIST, 15.0, 0.0, 1.2),
    ]
    objects = [SceneObject(grounded_box(x, y, SIZES[c], th), c, STRUCTURES[c])
               for c, x, y, th in placements]
    return SceneSpec(objects, ground=ground, seed=seed)
