"""Coordinate frames, pinhole projection and mask-to-point lifting.

Points are plain ``(N, 3)`` float arrays in the sensor frame (meters, origin on
the ground below the LiDAR). Box-local frames use x = length, y = width,
z = height.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

SS = "SS"
CS = "CS"

# Structural taxonomy used when priors are built from class names.
SS_CLASSES = ("Car", "Truck", "Van", "Tram", "Bus", "Construction_barrel",
              "Large_vehicle", "Sign")
CS_CLASSES = ("Pedestrian", "Person_sitting", "Cyclist", "Bicycle",
              "Utility_vehicle", "Traffic_cone", "Motorcycle")


def structure_of(class_name: str) -> str:
    """Return ``"SS"`` or ``"CS"`` for a known class name."""
    if class_name in SS_CLASSES:
        return SS
    if class_name in CS_CLASSES:
        return CS
    raise KeyError(f"no structure tag configured for class {class_name!r}")


def normalize_angle(theta):
    """Wrap angle(s) to [0, 2pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod returns exactly 2pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if out.ndim == 0 else out


def as_points(points) -> np.ndarray:
    """Coerce to a float64 ``(N, 3)`` array (accepts PointCloud)."""
    if isinstance(points, PointCloud):
        return points.xyz
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


@dataclass
class PointCloud:
    xyz: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = as_points(self.xyz)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.xyz.shape[0]:
                raise ValueError("intensity length does not match point count")

    def __len__(self):
        return self.xyz.shape[0]


@dataclass
class BoxParams:
    """Oriented box ``[x, y, z, h, w, l, theta]``; z is the box center."""

    center: np.ndarray
    size: np.ndarray  # (h, w, l)
    heading: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.size))):
            raise ValueError("box parameters must be finite")
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.heading = float(normalize_angle(float(self.heading)))

    @property
    def h(self) -> float:
        return float(self.size[0])

    @property
    def w(self) -> float:
        return float(self.size[1])

    @property
    def l(self) -> float:  # noqa: E743
        return float(self.size[2])

    @property
    def half_extent(self) -> np.ndarray:
        """Local-frame half sizes ordered (l/2, w/2, h/2) to pair with (x, y, z)."""
        return np.array([self.l, self.w, self.h]) / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, [self.heading]])

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "BoxParams":
        arr = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(arr[:3], arr[3:6], arr[6])

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise BEV corners, shape (4, 2)."""
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = np.cos(self.heading), np.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All 8 corners in the sensor frame, shape (8, 3)."""
        signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
        return box_local_to_world(signs * self.half_extent, self)


@dataclass
class CameraCalibration:
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 3x4, sensor -> camera
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(3, 4)
        self.width, self.height = int(self.width), int(self.height)
        k = self.intrinsics
        if np.any(np.abs(np.tril(k, -1)) > 0) or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        rot = self.extrinsics[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def looking_forward(cls, width=1242, height=375, focal=721.5,
                        position=(0.0, 0.0, 1.65)) -> "CameraCalibration":
        """Camera at ``position`` looking along sensor +x (KITTI-like defaults)."""
        # camera axes: x right = -y_sensor, y down = -z_sensor, z forward = +x_sensor
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        t = -rot @ np.asarray(position, dtype=np.float64)
        k = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(k, np.hstack([rot, t[:, None]]), width, height)


@dataclass
class InstanceMaskSet:
    labels: np.ndarray  # (H, W) ints, 0 = background
    instance_class: dict = field(default_factory=dict)
    instance_score: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("mask labels must be a 2D image")
        self.instance_class = {int(k): int(v) for k, v in self.instance_class.items()}
        self.instance_score = {int(k): float(v) for k, v in self.instance_score.items()}
        for inst in np.unique(self.labels):
            if inst == 0:
                continue
            if int(inst) not in self.instance_class or int(inst) not in self.instance_score:
                raise ValueError(f"instance {int(inst)} has no class/score entry")

    @property
    def shape(self):
        return self.labels.shape

    def instance_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]


@dataclass(frozen=True)
class AnchorPrior:
    class_id: int
    size: tuple  # (h, w, l)
    structure: str = SS

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError(f"prior size must be three positive numbers, got {self.size}")
        if self.structure not in (SS, CS):
            raise ValueError(f"structure must be SS or CS, got {self.structure!r}")

    @property
    def half_extent(self) -> np.ndarray:
        h, w, l = self.size
        return np.array([l, w, h], dtype=np.float64) / 2.0


def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def world_to_box_local(points, box: BoxParams) -> np.ndarray:
    """Express points in the box frame: ``R(-theta) (p - center)``.

    Inside points end up within ``[+-l/2, +-w/2, +-h/2]``.
    """
    pts = as_points(points)
    return (pts - box.center) @ _rotation_z(box.heading)


def box_local_to_world(points, box: BoxParams) -> np.ndarray:
    pts = as_points(points)
    return pts @ _rotation_z(box.heading).T + box.center


def points_in_box(points, box: BoxParams, slack: float = 0.0) -> np.ndarray:
    local = world_to_box_local(points, box)
    return np.all(np.abs(local) <= box.half_extent + slack, axis=1)


def project_points(points, calib: CameraCalibration):
    """Pinhole projection.

    Returns ``(uv, depth, in_image)`` with ``uv`` of shape (N, 2) in pixels.
    ``in_image`` requires positive depth and ``0 <= u < W, 0 <= v < H``.
    """
    pts = as_points(points)
    cam = pts @ calib.extrinsics[:, :3].T + calib.extrinsics[:, 3]
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = cam @ calib.intrinsics.T
        uv = pix[:, :2] / depth[:, None]
    in_image = (
        (depth > 0)
        & (uv[:, 0] >= 0) & (uv[:, 0] < calib.width)
        & (uv[:, 1] >= 0) & (uv[:, 1] < calib.height)
    )
    return uv, depth, in_image


def pixel_indices(uv: np.ndarray, in_image: np.ndarray):
    """Nearest pixel (pixel i spans [i, i+1)) for in-image projections."""
    cols = np.zeros(len(uv), dtype=np.int64)
    rows = np.zeros(len(uv), dtype=np.int64)
    cols[in_image] = np.floor(uv[in_image, 0]).astype(np.int64)
    rows[in_image] = np.floor(uv[in_image, 1]).astype(np.int64)
    return rows, cols


def _check_mask_dims(masks: InstanceMaskSet, calib: CameraCalibration):
    if masks.shape != (calib.height, calib.width):
        raise ValueError(
            f"mask shape {masks.shape} does not match calibration image "
            f"({calib.height}, {calib.width})")


def point_instance_labels(points, masks: InstanceMaskSet, calib: CameraCalibration) -> np.ndarray:
    """Instance id under each point's projection (0 when background or off-image)."""
    _check_mask_dims(masks, calib)
    uv, _, inside = project_points(points, calib)
    rows, cols = pixel_indices(uv, inside)
    labels = np.zeros(len(uv), dtype=np.int64)
    labels[inside] = masks.labels[rows[inside], cols[inside]]
    return labels


def lift_masks(points, masks: InstanceMaskSet, calib: CameraCalibration) -> dict[int, np.ndarray]:
    """Frustum points per instance: those whose projection lands in its mask."""
    pts = as_points(points)
    labels = point_instance_labels(pts, masks, calib)
    return {inst: pts[labels == inst] for inst in np.unique(labels).tolist() if inst != 0}


def voxel_object_mask(voxel_centers, masks: InstanceMaskSet, calib: CameraCalibration,
                      num_classes: int) -> np.ndarray:
    """Binary (N_voxel, num_classes) matrix of class masks hit by each voxel center."""
    classes = list(masks.instance_class.values())
    if classes and num_classes < max(classes) + 1:
        raise ValueError(f"num_classes={num_classes} too small for class id {max(classes)}")
    labels = point_instance_labels(voxel_centers, masks, calib)
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    for inst, cls in masks.instance_class.items():
        out[labels == inst, cls] = 1.0
    return out


def background_keep_mask(points) -> np.ndarray:
    pts = as_points(points)
    if len(pts) < 2:
        return np.ones(len(pts), dtype=bool)
    mean = pts.mean(axis=0)
    band = 2.0 * pts.std(axis=0)
    return np.all(np.abs(pts - mean) <= band, axis=1)


def filter_background(points) -> np.ndarray:
    """Keep points within mean +- 2 std on every axis (fewer than 2 points: unchanged)."""
    pts = as_points(points)
    return pts[background_keep_mask(pts)]


def mean_size_prior(boxes: Iterable[tuple[int, BoxParams]], structures: Mapping[int, str],
                    classes: Iterable[int] | None = None) -> list[AnchorPrior]:
    """Per-class mean (h, w, l) of the given boxes.

    Classes listed in ``classes`` with no boxes are skipped with a warning.
    """
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for cls, box in boxes:
        cls = int(cls)
        sums[cls] = sums.get(cls, np.zeros(3)) + box.size
        counts[cls] = counts.get(cls, 0) + 1
    wanted = sorted(set(sums) | set(int(c) for c in (classes or ())))
    priors = []
    for cls in wanted:
        if cls not in counts:
            warnings.warn(f"class {cls} has no boxes; prior omitted", stacklevel=2)
            continue
        if cls not in structures:
            raise KeyError(f"no structure tag configured for class {cls}")
        mean = sums[cls] / counts[cls]
        priors.append(AnchorPrior(cls, tuple(float(v) for v in mean), structures[cls]))
    return priors
