"""Readers and writers for the on-disk formats.

* point clouds: ``.bin`` little-endian float32 (x, y, z, intensity) records,
  or ASCII ``x y z [i]`` per line (any other extension)
* masks: ``IMSK`` + u32 W + u32 H + row-major u16 labels, with a JSON sidecar
  ``{"<id>": {"class": c, "score": s}}``
* calibration: JSON with ``intrinsics`` (9), ``extrinsics`` (12), ``width``, ``height``
* feature matrices: u32 rows, u32 cols, row-major float32
* priors / boxes / detections / scenes: JSON
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import (AnchorPrior, BoxParams, CameraCalibration,
                       InstanceMaskSet, PointCloud)
from .lidarsim import LidarSpec, SceneObject, SceneSpec

MASK_MAGIC = b"IMSK"


class MalformedFile(ValueError):
    def __init__(self, path, offset: int, reason: str):
        self.path, self.offset, self.reason = str(path), int(offset), reason
        super().__init__(f"{path}: malformed at byte {offset}: {reason}")


def sig9(x):
    """Round floats (recursively) to 9 significant digits for stable JSON."""
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.9g}")
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [sig9(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: sig9(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [sig9(v) for v in x]
    return x


def write_json(path, obj):
    Path(path).write_text(json.dumps(sig9(obj), indent=2) + "\n")


def read_json(path):
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw)
    except json.JSONDecodeError as err:
        raise MalformedFile(path, len(raw[:err.pos].decode("utf-8", "replace").encode()) if err.pos else 0,
                            err.msg) from None
    except UnicodeDecodeError as err:
        raise MalformedFile(path, err.start, "not UTF-8") from None


# point clouds

def read_cloud(path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".bin":
        usable = len(raw) - len(raw) % 16
        if usable != len(raw):
            raise MalformedFile(path, usable, "trailing bytes after last (x, y, z, i) record")
        data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
        bad = np.nonzero(~np.all(np.isfinite(data), axis=1))[0]
        if len(bad):
            raise MalformedFile(path, int(bad[0]) * 16, "non-finite value")
        return PointCloud(data[:, :3], data[:, 3])
    xyz, inten = [], []
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text and not text.startswith(b"#"):
            try:
                vals = [float(v) for v in text.split()]
            except ValueError:
                raise MalformedFile(path, offset, "non-numeric field") from None
            if len(vals) not in (3, 4) or not np.all(np.isfinite(vals)):
                raise MalformedFile(path, offset, "expected 3 or 4 finite numbers")
            xyz.append(vals[:3])
            inten.append(vals[3] if len(vals) == 4 else 0.0)
        offset += len(line)
    return PointCloud(np.array(xyz).reshape(-1, 3), np.array(inten))


def write_cloud(path, cloud: PointCloud):
    path = Path(path)
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    if path.suffix == ".bin":
        data = np.hstack([cloud.xyz, inten[:, None]]).astype("<f4")
        path.write_bytes(data.tobytes())
    else:
        with path.open("w") as fh:
            for p, i in zip(cloud.xyz, inten):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {i:.9g}\n")


# masks

def write_masks(path, meta_path, masks: InstanceMaskSet):
    h, w = masks.shape
    if masks.labels.max(initial=0) > 0xFFFF or masks.labels.min(initial=0) < 0:
        raise ValueError("instance ids must fit in u16")
    header = MASK_MAGIC + struct.pack("<II", w, h)
    Path(path).write_bytes(header + masks.labels.astype("<u2").tobytes())
    meta = {str(k): {"class": masks.instance_class[k], "score": masks.instance_score[k]}
            for k in sorted(masks.instance_class)}
    write_json(meta_path, meta)


def read_masks(path, meta_path) -> InstanceMaskSet:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise MalformedFile(path, 0, "missing IMSK magic")
    if len(raw) < 12:
        raise MalformedFile(path, 4, "truncated header")
    w, h = struct.unpack("<II", raw[4:12])
    expected = 12 + 2 * w * h
    if len(raw) != expected:
        raise MalformedFile(path, min(len(raw), expected), f"expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw[12:], dtype="<u2").reshape(h, w).astype(np.int64)
    meta = read_json(meta_path)
    try:
        classes = {int(k): int(v["class"]) for k, v in meta.items()}
        scores = {int(k): float(v["score"]) for k, v in meta.items()}
    except (KeyError, TypeError, ValueError, AttributeError):
        raise MalformedFile(meta_path, 0, "expected {id: {class, score}} entries") from None
    try:
        return InstanceMaskSet(labels, classes, scores)
    except ValueError as err:
        raise MalformedFile(meta_path, 0, str(err)) from None


# calibration

def calibration_to_dict(calib: CameraCalibration) -> dict:
    return {"intrinsics": calib.intrinsics.ravel().tolist(),
            "extrinsics": calib.extrinsics.ravel().tolist(),
            "width": calib.width, "height": calib.height}


def write_calibration(path, calib: CameraCalibration):
    write_json(path, calibration_to_dict(calib))


def read_calibration(path) -> CameraCalibration:
    d = read_json(path)
    try:
        return CameraCalibration(np.array(d["intrinsics"], float).reshape(3, 3),
                                 np.array(d["extrinsics"], float).reshape(3, 4),
                                 d["width"], d["height"])
    except (KeyError, TypeError, ValueError) as err:
        raise MalformedFile(path, 0, f"bad calibration: {err}") from None


# priors

def read_priors(path) -> dict[int, AnchorPrior]:
    d = read_json(path)
    try:
        priors = [AnchorPrior(int(p["class"]), (float(p["h"]), float(p["w"]), float(p["l"])),
                              p.get("structure", "SS")) for p in d]
    except (KeyError, TypeError, ValueError) as err:
        raise MalformedFile(path, 0, f"bad prior entry: {err}") from None
    return {p.class_id: p for p in priors}


def write_priors(path, priors):
    write_json(path, [{"class": p.class_id, "h": p.size[0], "w": p.size[1], "l": p.size[2],
                       "structure": p.structure} for p in priors])


# feature matrices

def write_matrix(path, mat):
    mat = np.asarray(mat, dtype="<f4")
    Path(path).write_bytes(struct.pack("<II", *mat.shape) + mat.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MalformedFile(path, len(raw), "truncated header")
    rows, cols = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * rows * cols
    if len(raw) != expected:
        raise MalformedFile(path, min(len(raw), expected), f"expected {expected} bytes, found {len(raw)}")
    mat = np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols).astype(np.float64)
    bad = np.nonzero(~np.isfinite(mat.ravel()))[0]
    if len(bad):
        raise MalformedFile(path, 8 + 4 * int(bad[0]), "non-finite value")
    return mat


# boxes, detections and scenes

def box_list(box: BoxParams) -> list:
    return box.as_array().tolist()


def read_gt(path) -> list[tuple[BoxParams, int]]:
    d = read_json(path)
    try:
        return [(BoxParams.from_array(g["box"]), int(g["class"])) for g in d]
    except (KeyError, TypeError, ValueError) as err:
        raise MalformedFile(path, 0, f"bad ground-truth entry: {err}") from None


def read_detections(path):
    from .evaluation import Detection

    d = read_json(path)
    try:
        return [Detection(BoxParams.from_array(x["box"]), int(x["class"]), float(x.get("score", 1.0)))
                for x in d]
    except (KeyError, TypeError, ValueError) as err:
        raise MalformedFile(path, 0, f"bad detection entry: {err}") from None


def scene_from_dict(d: dict, seed: int | None = None) -> tuple[SceneSpec, LidarSpec]:
    objects = []
    for o in d["objects"]:
        objects.append(SceneObject(BoxParams.from_array(o["box"]), int(o["class"]),
                                   o.get("structure", "SS"), int(o.get("parts", 12)),
                                   float(o.get("part_fraction", 0.15))))
    scene = SceneSpec(objects, bool(d.get("ground", False)),
                      int(d.get("seed", 0) if seed is None else seed))
    lid = d.get("lidar", {})
    lidar = LidarSpec()
    if lid:
        kw = {}
        if "beams" in lid:
            lidar = LidarSpec.uniform(int(lid["beams"]), float(lid.get("min_elevation_deg", -24.8)),
                                      float(lid.get("max_elevation_deg", 2.0)))
        for key in ("noise_sigma", "max_range", "sensor_height"):
            if key in lid:
                kw[key] = float(lid[key])
        if "azimuth_res_deg" in lid:
            kw["azimuth_res"] = np.deg2rad(float(lid["azimuth_res_deg"]))
        for k, v in kw.items():
            setattr(lidar, k, v)
        lidar.__post_init__()
    return scene, lidar


def scene_to_dict(scene: SceneSpec) -> dict:
    return {"objects": [{"box": box_list(o.box), "class": o.class_id, "structure": o.structure,
                         "parts": o.parts, "part_fraction": o.part_fraction} for o in scene.objects],
            "ground": scene.ground, "seed": scene.seed}


def read_scene(path, seed=None):
    d = read_json(path)
    try:
        return scene_from_dict(d, seed)
    except (KeyError, TypeError, ValueError) as err:
        raise MalformedFile(path, 0, f"bad scene: {err}") from None
