"""Scene ingestion and serialization.

KITTI-layout readers and writers (Velodyne clouds, camera-frame labels,
calibration files, PNG images), ASCII PLY mesh round-trips, and a
deterministic synthetic scene generator that produces desk-scale
cloud+image+label samples with exact ground truth.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import raster
from .geom import Box3D, Calibration, iou_bev, normalize_angle, project_to_image_safe
from .lidar import LidarConfig, desk_config, render_points
from .meshes import AdvMesh


class TruncatedFile(ValueError):
    """Binary cloud file length is not a whole number of records."""


class MalformedLine(ValueError):
    """A label line does not follow the 15-field format."""


class MissingKey(KeyError):
    """A required calibration key is absent."""


class MalformedPly(ValueError):
    """PLY content violates the expected ASCII header or body."""


# ---------------------------------------------------------------------------
# Velodyne binary clouds

def read_velodyne(path) -> np.ndarray:
    """Read little-endian float32 (x, y, z, reflectance) records, (N, 4)."""
    size = os.path.getsize(path)
    if size % 16 != 0:
        raise TruncatedFile(f"{path}: {size} bytes is not a multiple of 16")
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(-1, 4).astype(np.float64)


def write_velodyne(path, cloud: np.ndarray) -> None:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    cloud.astype("<f4").tofile(path)


# ---------------------------------------------------------------------------
# Calibration files

_CALIB_KEYS = ("P2", "R0_rect", "Tr_velo_to_cam")


def read_calib(path) -> Calibration:
    """Parse a KITTI calibration file; requires P2, R0_rect, Tr_velo_to_cam."""
    entries = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            entries[key.strip()] = np.array([float(x) for x in rest.split()])
    for key in _CALIB_KEYS:
        if key not in entries:
            raise MissingKey(f"{path}: calibration key {key} missing")
    p2 = entries["P2"].reshape(3, 4)
    r0 = entries["R0_rect"].reshape(3, 3)
    tr = np.vstack([entries["Tr_velo_to_cam"].reshape(3, 4), [0.0, 0.0, 0.0, 1.0]])
    return Calibration(cam_projection=p2, lidar_to_cam=tr, rectification=r0)


def write_calib(path, calib: Calibration) -> None:
    def row(values):
        return " ".join(repr(float(v)) for v in np.asarray(values).ravel())

    with open(path, "w") as fh:
        fh.write(f"P2: {row(calib.cam_projection)}\n")
        fh.write(f"R0_rect: {row(calib.rectification)}\n")
        fh.write(f"Tr_velo_to_cam: {row(calib.lidar_to_cam[:3])}\n")


# ---------------------------------------------------------------------------
# Labels: KITTI camera-frame <-> internal lidar-frame boxes

def kitti_to_internal(location, dims_hwl, rotation_y: float, calib: Calibration) -> Box3D:
    """KITTI (bottom-center in rect camera frame, h/w/l, ry) -> lidar Box3D.

    The internal box is centered at the centroid with dims (l, w, h) and yaw
    about lidar +z, recovered by transforming the heading direction.
    """
    h, w, l = (float(d) for d in dims_hwl)
    loc = np.asarray(location, dtype=np.float64)
    centroid_cam = loc + np.array([0.0, -h / 2.0, 0.0])  # camera y points down
    centroid = calib.rect_to_lidar(centroid_cam)[0]
    heading_cam = np.array([math.cos(rotation_y), 0.0, -math.sin(rotation_y)])
    tip = calib.rect_to_lidar(centroid_cam + heading_cam)[0]
    yaw = math.atan2(tip[1] - centroid[1], tip[0] - centroid[0])
    return Box3D(center=tuple(centroid), dims=(l, w, h), yaw=yaw)


def internal_to_kitti(box: Box3D, calib: Calibration):
    """Inverse of kitti_to_internal: returns (location, (h, w, l), ry)."""
    l, w, h = box.dims
    centroid_cam = calib.lidar_to_rect(np.asarray(box.center))
    location = centroid_cam + np.array([0.0, h / 2.0, 0.0])
    heading = np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
    tip_cam = calib.lidar_to_rect(np.asarray(box.center) + heading)
    d = tip_cam - centroid_cam
    ry = math.atan2(-d[2], d[0])
    return location, (h, w, l), ry


@dataclass(frozen=True)
class ObjectLabel:
    """One labeled object; KITTI 2D fields plus the internal 3D box."""

    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom (px)
    box: Box3D | None  # None for ignore regions
    ignore: bool = False
    # raw KITTI (h, w, l, x, y, z, ry) as read from disk; kept so a
    # read/write cycle is byte-exact despite the frame conversion
    raw_kitti: tuple | None = None

    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]


# KITTI difficulty thresholds: min 2D height (px), max occlusion, max truncation
_DIFFICULTY = ((40.0, 0, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50))
DIFFICULTY_NAMES = ("Easy", "Moderate", "Hard")


def assign_difficulty(label: ObjectLabel) -> int:
    """0/1/2 for Easy/Moderate/Hard, -1 when below every bucket."""
    h = label.bbox_height()
    for level, (min_h, max_occ, max_trunc) in enumerate(_DIFFICULTY):
        if h >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
            return level
    return -1


def read_label(path, calib: Calibration) -> list[ObjectLabel]:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 15:
                raise MalformedLine(
                    f"{path}:{lineno}: expected 15 fields, got {len(fields)}")
            try:
                cls = fields[0]
                nums = [float(x) for x in fields[1:]]
            except ValueError as exc:
                raise MalformedLine(f"{path}:{lineno}: {exc}") from exc
            truncation, occluded, alpha = nums[0], int(nums[1]), nums[2]
            bbox = tuple(nums[3:7])
            h, w, l = nums[7:10]
            location, ry = nums[10:13], nums[13]
            ignore = cls == "DontCare"
            box = None
            if not ignore:
                box = kitti_to_internal(location, (h, w, l), ry, calib)
            labels.append(
                ObjectLabel(cls, truncation, occluded, alpha, bbox, box, ignore,
                            raw_kitti=(h, w, l, *location, ry)))
    return labels


def write_label(path, labels, calib: Calibration) -> None:
    with open(path, "w") as fh:
        for lab in labels:
            if lab.raw_kitti is not None:
                hwl, loc, ry = lab.raw_kitti[:3], lab.raw_kitti[3:6], lab.raw_kitti[6]
            elif lab.box is None:
                loc, hwl, ry = (-1000.0, -1000.0, -1000.0), (-1.0, -1.0, -1.0), -10.0
            else:
                loc, hwl, ry = internal_to_kitti(lab.box, calib)
            vals = [lab.truncation, lab.occlusion, lab.alpha, *lab.bbox, *hwl, *loc, ry]
            # repr keeps float fields bit-exact across a write/read cycle
            fh.write(lab.cls + " " + " ".join(repr(float(v)) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# ASCII PLY meshes with per-vertex 8-bit color

def write_ply(path, mesh: AdvMesh) -> None:
    """Write deformed local vertices with quantized per-vertex RGB."""
    verts = mesh.local_vertices()
    colors = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, c in zip(verts, colors):
        lines.append(
            f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r} {c[0]} {c[1]} {c[2]}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> AdvMesh:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "ply":
        raise MalformedPly(f"{path}: missing ply magic")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise MalformedPly(f"{path}: no end_header") from None
    header = lines[1:end]
    if "format ascii 1.0" not in header:
        raise MalformedPly(f"{path}: only ascii 1.0 is supported")
    n_vert = n_face = None
    for ln in header:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    if n_vert is None or n_face is None:
        raise MalformedPly(f"{path}: vertex/face element counts missing")
    body = lines[end + 1:]
    if len(body) < n_vert + n_face:
        raise MalformedPly(f"{path}: body shorter than declared element counts")
    verts = np.zeros((n_vert, 3))
    colors = np.zeros((n_vert, 3))
    for i in range(n_vert):
        parts = body[i].split()
        if len(parts) != 6:
            raise MalformedPly(f"{path}: vertex line {i} has {len(parts)} fields")
        verts[i] = [float(x) for x in parts[:3]]
        colors[i] = [int(x) / 255.0 for x in parts[3:]]
    faces = np.zeros((n_face, 3), dtype=np.intp)
    for i in range(n_face):
        parts = body[n_vert + i].split()
        if len(parts) != 4 or parts[0] != "3":
            raise MalformedPly(f"{path}: face line {i} is not a triangle")
        faces[i] = [int(x) for x in parts[1:]]
    return AdvMesh(
        base_vertices=verts,
        displacements=np.zeros_like(verts),
        colors=colors,
        faces=faces,
    )


# ---------------------------------------------------------------------------
# Scenes

@dataclass
class Scene:
    """One sample: lidar cloud, camera image, calibration, labels."""

    cloud: np.ndarray  # (N, 4) x, y, z, reflectance
    image: np.ndarray  # (H, W, 3) uint8
    calib: Calibration
    labels: list[ObjectLabel]
    id: str

    def car_labels(self) -> list[ObjectLabel]:
        return [l for l in self.labels if not l.ignore and l.cls == "Car"]


GROUND_Z = -1.73  # sensor height above the road plane

_SKY = np.array([0.70, 0.75, 0.82])
_GROUND_COLOR = np.array([0.35, 0.35, 0.36])


@dataclass(frozen=True)
class SynthParams:
    """Synthetic scene distribution parameters."""

    n_cars_range: tuple[int, int] = (1, 3)
    # decoys share the car geometry but not the car appearance, so detectors
    # must consult the image to tell them apart; they carry no labels
    n_decoys_range: tuple[int, int] = (1, 2)
    mean_dims: tuple[float, float, float] = (3.9, 1.7, 1.6)  # l, w, h
    dims_jitter: float = 0.08  # relative sigma
    x_range: tuple[float, float] = (7.0, 15.0)
    y_spread: float = 0.50  # |y| <= y_spread * x keeps cars in both frustums
    azimuth_margin: float = 0.10  # min azimuth gap between placed objects
    image_size: tuple[int, int] = (336, 112)
    focal: float = 260.0
    lidar: LidarConfig = field(default_factory=desk_config)
    min_points: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_cars_range[0] < 0 or self.n_cars_range[1] < self.n_cars_range[0]:
            raise ValueError("invalid car count range")
        if min(self.mean_dims) <= 0:
            raise ValueError("car dimensions must be positive")


def default_calibration(params: SynthParams | None = None) -> Calibration:
    """Forward-facing camera: x_cam=-y, y_cam=-z, z_cam=x (lidar frame)."""
    params = params or SynthParams()
    w, h = params.image_size
    f = params.focal
    k = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    p2 = np.hstack([k, np.zeros((3, 1))])
    tr = np.array(
        [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return Calibration(cam_projection=p2, lidar_to_cam=tr, rectification=np.eye(3))


def _box_tris(center, dims):
    """Axis-aligned box as 8 vertices / 12 triangles (outward winding)."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(dims, dtype=np.float64) / 2.0
    signs = np.array(
        [
            [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
            [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
        ],
        dtype=np.float64,
    )
    verts = c + signs * h
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [1, 2, 6], [1, 6, 5],  # +x
            [3, 0, 4], [3, 4, 7],  # -x
        ],
        dtype=np.intp,
    )
    return verts, faces


def car_mesh(dims) -> tuple[np.ndarray, np.ndarray]:
    """Box-plus-cabin car in local frame (centroid at origin, +x heading).

    Every vertex stays inside the l x w x h bounding box.
    """
    l, w, h = (float(d) for d in dims)
    body_h = 0.55 * h
    body_v, body_f = _box_tris((0.0, 0.0, -h / 2.0 + body_h / 2.0), (l, w, body_h))
    cabin_h = h - body_h
    cabin_v, cabin_f = _box_tris(
        (-0.08 * l, 0.0, h / 2.0 - cabin_h / 2.0), (0.52 * l, 0.82 * w, cabin_h)
    )
    verts = np.vstack([body_v, cabin_v])
    faces = np.vstack([body_f, cabin_f + len(body_v)])
    return verts, faces


def _ground_tris(x_max=45.0, y_max=30.0):
    v = np.array(
        [
            [0.5, -y_max, GROUND_Z],
            [x_max, -y_max, GROUND_Z],
            [x_max, y_max, GROUND_Z],
            [0.5, y_max, GROUND_Z],
        ]
    )
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.intp)
    return v, f


def points_in_box(points: np.ndarray, box: Box3D, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the oriented box (inflated by tol)."""
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    rel = pts - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * rel[:, 0] + s * rel[:, 1]
    ly = -s * rel[:, 0] + c * rel[:, 1]
    l, w, h = box.dims
    return (
        (np.abs(lx) <= l / 2.0 + tol)
        & (np.abs(ly) <= w / 2.0 + tol)
        & (np.abs(rel[:, 2]) <= h / 2.0 + tol)
    )


def _bbox_2d(box: Box3D, calib: Calibration, image_size):
    """2D bbox of projected 3D corners clipped to the image, plus truncation."""
    w, h = image_size
    uv, _, valid = project_to_image_safe(box.corners_3d(), calib)
    if not valid.any():
        return None, 1.0
    uv = uv[valid]
    full = (uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    clipped = (
        max(full[0], 0.0),
        max(full[1], 0.0),
        min(full[2], float(w - 1)),
        min(full[3], float(h - 1)),
    )
    if clipped[2] <= clipped[0] or clipped[3] <= clipped[1]:
        return None, 1.0
    full_area = (full[2] - full[0]) * (full[3] - full[1])
    clip_area = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1])
    truncation = 1.0 - clip_area / full_area if full_area > 0 else 0.0
    return clipped, truncation


def _azimuth_interval(box: Box3D):
    az = np.arctan2(box.bev_corners()[:, 1], box.bev_corners()[:, 0])
    return float(az.min()), float(az.max())


def _sample_boxes(rng: np.random.Generator, params: SynthParams):
    """Car and decoy boxes with mutually disjoint azimuth intervals.

    Disjoint azimuths keep every object unoccluded in both modalities.
    """
    n_cars = int(rng.integers(params.n_cars_range[0], params.n_cars_range[1] + 1))
    n_decoys = int(
        rng.integers(params.n_decoys_range[0], params.n_decoys_range[1] + 1))
    boxes, intervals = [], []
    attempts = 0
    while len(boxes) < n_cars + n_decoys and attempts < 300:
        attempts += 1
        dims = np.asarray(params.mean_dims) * (
            1.0 + params.dims_jitter * rng.standard_normal(3)
        )
        dims = np.clip(dims, 0.5 * np.asarray(params.mean_dims), None)
        x = rng.uniform(*params.x_range)
        y = rng.uniform(-params.y_spread * x, params.y_spread * x)
        yaw = rng.uniform(-math.pi, math.pi)
        box = Box3D(
            center=(x, y, GROUND_Z + dims[2] / 2.0),
            dims=tuple(dims),
            yaw=yaw,
        )
        lo, hi = _azimuth_interval(box)
        margin = params.azimuth_margin
        if any(lo - margin < h and hi + margin > l for l, h in intervals):
            continue
        boxes.append(box)
        intervals.append((lo, hi))
    return boxes[:n_cars], boxes[n_cars:]


def _car_color(rng: np.random.Generator) -> np.ndarray:
    """Car paint stays off-green so appearance separates cars from decoys."""
    r, b = rng.uniform(0.15, 0.75, 2)
    g = rng.uniform(0.05, min(r, b) - 0.1)
    return np.array([r, g, b])


def _decoy_color(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(0.1, 0.3), rng.uniform(0.55, 0.9),
                     rng.uniform(0.1, 0.3)])


def _scene_geometry(cars, decoys, rng: np.random.Generator):
    """Assemble ground + object triangles with flat per-vertex colors."""
    verts_list, faces_list, colors_list, reflect_list = [], [], [], []
    gv, gf = _ground_tris()
    verts_list.append(gv)
    faces_list.append(gf)
    colors_list.append(np.tile(_GROUND_COLOR, (len(gv), 1)))
    reflect_list.append(np.full(len(gf), 0.3))
    offset = len(gv)
    entries = [(box, _car_color(rng)) for box in cars]
    entries += [(box, _decoy_color(rng)) for box in decoys]
    for box, color in entries:
        local_v, f = car_mesh(box.dims)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        world_v = local_v @ rot.T + np.asarray(box.center)
        verts_list.append(world_v)
        faces_list.append(f + offset)
        colors_list.append(np.tile(color, (len(world_v), 1)))
        reflect_list.append(np.full(len(f), 0.6))
        offset += len(world_v)
    verts = np.vstack(verts_list)
    faces = np.vstack(faces_list)
    colors = np.vstack(colors_list)
    face_reflect = np.concatenate(reflect_list)
    return verts, faces, colors, face_reflect


def _render_scene(cars, decoys, rng, params: SynthParams, calib: Calibration, index: int):
    verts, faces, colors, face_reflect = _scene_geometry(cars, decoys, rng)
    lidar_seed = int(rng.integers(2**31))
    cloud_r = render_points(verts, faces, params.lidar, seed=lidar_seed)
    reflect = face_reflect[cloud_r.face_index]
    cloud = np.column_stack([cloud_r.positions, reflect])

    frags = raster.rasterize(verts, faces, calib, params.image_size)
    shading = raster.ShadingConfig()
    overlay, mask = raster.shade(frags, verts, faces, colors, shading, calib)
    w, h = params.image_size
    img = np.tile(_SKY, (h, w, 1)).copy()
    img = raster.composite(img, overlay, mask)
    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    labels = []
    for box in cars:
        bbox, truncation = _bbox_2d(box, calib, params.image_size)
        if bbox is None:
            return None  # car invisible to the camera, resample the scene
        centroid_cam = calib.lidar_to_rect(np.asarray(box.center))
        _, _, ry = internal_to_kitti(box, calib)
        alpha = normalize_angle(ry - math.atan2(centroid_cam[0], centroid_cam[2]))
        labels.append(
            ObjectLabel(
                cls="Car",
                truncation=float(truncation),
                occlusion=0,
                alpha=float(alpha),
                bbox=bbox,
                box=box,
            )
        )
        n_pts = int(np.count_nonzero(points_in_box(cloud, box, tol=0.01)))
        if n_pts < params.min_points:
            return None
    return Scene(cloud=cloud, image=image, calib=calib, labels=labels, id=f"{index:06d}")


def gen_synthetic_scenes(params: SynthParams, n: int) -> list[Scene]:
    """Generate n scenes, deterministic per (params.seed, index).

    Every labeled car is visible in both modalities (>= min_points lidar
    returns inside its box and a nonempty 2D bbox); placements violating
    that are resampled from the same per-index stream.
    """
    calib = default_calibration(params)
    scenes = []
    for index in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([params.seed, index]))
        scene = None
        for _ in range(50):
            cars, decoys = _sample_boxes(rng, params)
            scene = _render_scene(cars, decoys, rng, params, calib, index)
            if scene is not None:
                break
        if scene is None:
            raise RuntimeError(f"scene {index}: no valid placement found")
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# KITTI directory layout

_SUBDIRS = ("velodyne", "image_2", "calib", "label_2")


def save_scene(root, scene: Scene) -> None:
    for sub in _SUBDIRS:
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    write_velodyne(os.path.join(root, "velodyne", scene.id + ".bin"), scene.cloud)
    Image.fromarray(scene.image).save(os.path.join(root, "image_2", scene.id + ".png"))
    write_calib(os.path.join(root, "calib", scene.id + ".txt"), scene.calib)
    write_label(os.path.join(root, "label_2", scene.id + ".txt"), scene.labels, scene.calib)


def load_scene(root, scene_id: str) -> Scene:
    calib = read_calib(os.path.join(root, "calib", scene_id + ".txt"))
    cloud = read_velodyne(os.path.join(root, "velodyne", scene_id + ".bin"))
    image = np.asarray(
        Image.open(os.path.join(root, "image_2", scene_id + ".png")).convert("RGB")
    )
    labels = read_label(os.path.join(root, "label_2", scene_id + ".txt"), calib)
    return Scene(cloud=cloud, image=image, calib=calib, labels=labels, id=scene_id)


def write_split(path, ids) -> None:
    with open(path, "w") as fh:
        for sid in ids:
            fh.write(sid + "\n")


def read_split(path) -> list[str]:
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip()]
