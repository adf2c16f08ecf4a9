"""Victim detector interface and two desk-scale differentiable surrogates.

The cascaded surrogate scores a coarse 2D anchor grid on the image, lifts
each detection to a frustum of lidar points, and runs a shared per-point
network with global max-pool context for segmentation plus one box per
frustum.  The fusion surrogate enriches every cloud point with bilinearly
sampled conv features from the image and emits one scored proposal per
foreground point.  Score paths are differentiable w.r.t. the rendered
image and point positions; box decoding uses frozen forward-pass values.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataio import GROUND_Z, Scene, points_in_box
from .evalmetrics import ScoredBox, compute_ap
from .geom import Box3D, Calibration, normalize_angle, project_to_image_safe
from .lidar import desk_config, render_points
from .losses import ProposalSet, SegmentationOutput
from .meshes import make_icosphere

MEAN_DIMS = np.array([3.9, 1.7, 1.6])
GRID_STRIDE = 16
ANCHOR_WH = (64.0, 32.0)
OBJ_THRESHOLD = 0.5
SEG_THRESHOLD = 0.5
PROPOSAL_FLOOR = 0.05
AZIMUTH_GAP = 0.012  # radians, about two lidar ray steps
MIN_CLUSTER_POINTS = 12


class UntrainedWeights(RuntimeError):
    """Weights missing the tensors required by the requested surrogate."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite; carries the loss trace."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# weights container

WEIGHTS_MAGIC = b"ADVW"
WEIGHTS_VERSION = 1


@dataclass
class SurrogateWeights:
    """Named tensors plus training metadata for one surrogate."""

    kind: str  # "cascaded" or "fusion"
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def require(self, names):
        missing = [n for n in names if n not in self.tensors]
        if missing:
            raise UntrainedWeights(f"missing tensors: {missing}")
        for name in names:
            if not np.isfinite(self.tensors[name]).all():
                raise UntrainedWeights(f"non-finite values in tensor {name}")


def save_weights(path, weights: SurrogateWeights) -> None:
    meta = dict(weights.metadata)
    meta["kind"] = weights.kind
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", WEIGHTS_VERSION))
    buf.write(struct.pack("<I", len(meta_blob)))
    buf.write(meta_blob)
    names = sorted(weights.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(weights.tensors[name], dtype="<f8")
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path) -> SurrogateWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise UntrainedWeights(f"{path}: bad magic")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != WEIGHTS_VERSION:
        raise UntrainedWeights(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + meta_len])
    off += meta_len
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        off += 8 * count
        tensors[name] = arr.reshape(shape).copy()
    kind = meta.pop("kind", "unknown")
    return SurrogateWeights(kind=kind, tensors=tensors, metadata=meta)


# ---------------------------------------------------------------------------
# parameter initialization

def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_cascaded(seed: int) -> SurrogateWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    t = {}
    t["img.conv1.K"] = _he(rng, (12, 3, 4, 4), 3 * 16)
    t["img.conv1.b"] = np.zeros(12)
    t["img.conv2.K"] = _he(rng, (16, 12, 4, 4), 12 * 16)
    t["img.conv2.b"] = np.zeros(16)
    t["img.conv3.K"] = _he(rng, (24, 16, 4, 4), 16 * 16)
    t["img.conv3.b"] = np.zeros(24)
    t["img.head.K"] = _he(rng, (5, 24, 3, 3), 24 * 9)
    t["img.head.b"] = np.zeros(5)
    t["pt.fc1.W"] = _he(rng, (4, 32), 4)
    t["pt.fc1.b"] = np.zeros(32)
    t["pt.fc2.W"] = _he(rng, (32, 32), 32)
    t["pt.fc2.b"] = np.zeros(32)
    t["seg.fc1.W"] = _he(rng, (64, 32), 64)
    t["seg.fc1.b"] = np.zeros(32)
    t["seg.fc2.W"] = _he(rng, (32, 1), 32)
    t["seg.fc2.b"] = np.zeros(1)
    t["seg.gate.fc1.W"] = _he(rng, (35, 16), 35)
    t["seg.gate.fc1.b"] = np.zeros(16)
    t["seg.gate.fc2.W"] = _he(rng, (16, 1), 16)
    t["seg.gate.fc2.b"] = np.zeros(1)
    t["box.fc1.W"] = _he(rng, (172, 48), 172)
    t["box.fc1.b"] = np.zeros(48)
    t["box.fc2.W"] = _he(rng, (48, 7), 48) * 0.1
    t["box.fc2.b"] = np.zeros(7)
    return SurrogateWeights(kind="cascaded", tensors=t)


def init_fusion(seed: int) -> SurrogateWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    t = {}
    t["img.conv1.K"] = _he(rng, (12, 3, 4, 4), 3 * 16)
    t["img.conv1.b"] = np.zeros(12)
    t["img.conv2.K"] = _he(rng, (16, 12, 2, 2), 12 * 4)
    t["img.conv2.b"] = np.zeros(16)
    t["img.conv3.K"] = _he(rng, (16, 16, 5, 5), 16 * 25)
    t["img.conv3.b"] = np.zeros(16)
    t["pt.fc1.W"] = _he(rng, (4, 32), 4)
    t["pt.fc1.b"] = np.zeros(32)
    t["pt.fc2.W"] = _he(rng, (32, 32), 32)
    t["pt.fc2.b"] = np.zeros(32)
    t["score.gate.W"] = _he(rng, (16, 1), 16)
    t["score.gate.b"] = np.zeros(1)
    t["score.fc1.W"] = _he(rng, (48, 32), 48)
    t["score.fc1.b"] = np.zeros(32)
    t["score.fc2.W"] = _he(rng, (32, 1), 32)
    t["score.fc2.b"] = np.zeros(1)
    t["box.fc1.W"] = _he(rng, (172, 48), 172)
    t["box.fc1.b"] = np.zeros(48)
    t["box.fc2.W"] = _he(rng, (48, 7), 48) * 0.1
    t["box.fc2.b"] = np.zeros(7)
    return SurrogateWeights(kind="fusion", tensors=t)


_CASCADED_REQUIRED = tuple(init_cascaded(0).tensors)
_FUSION_REQUIRED = tuple(init_fusion(0).tensors)


def _wt(weights: SurrogateWeights, tape_params: dict | None, name: str) -> ad.Tensor:
    if tape_params is not None:
        return tape_params[name]
    return ad.Tensor(weights.tensors[name])


# ---------------------------------------------------------------------------
# cascaded surrogate: 2D grid scorer

def image_grid_forward(image, weights: SurrogateWeights, params=None):
    """Image (H, W, 3 in [0,1]) -> (objectness Tensor (gh, gw), reg values).

    ``params`` substitutes tape-watched weight tensors during training.
    """
    head = _grid_head(image, weights, params)
    obj = ad.sigmoid(ad.gather_rows(head, np.array([0])))
    reg = head.values[1:5]
    return obj, reg


def _grid_head(image, weights: SurrogateWeights, params=None) -> ad.Tensor:
    """Conv trunk to the stride-16 grid head, (5, gh, gw)."""
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    x = ad.transpose(x, (2, 0, 1))
    h1 = ad.relu(ad.conv2d(_wt(weights, params, "img.conv1.K"),
                           _wt(weights, params, "img.conv1.b"), x, stride=4))
    h2 = ad.relu(ad.conv2d(_wt(weights, params, "img.conv2.K"),
                           _wt(weights, params, "img.conv2.b"), h1, stride=2, pad=1))
    h3 = ad.relu(ad.conv2d(_wt(weights, params, "img.conv3.K"),
                           _wt(weights, params, "img.conv3.b"), h2, stride=2, pad=1))
    return ad.conv2d(_wt(weights, params, "img.head.K"),
                     _wt(weights, params, "img.head.b"), h3, pad=1)


def decode_grid(obj_values: np.ndarray, reg_values: np.ndarray,
                threshold: float = OBJ_THRESHOLD):
    """Grid scores -> list of (bbox, objectness, cell), descending score."""
    gh, gw = obj_values.shape[-2:]
    obj = obj_values.reshape(gh, gw)
    dets = []
    for i in range(gh):
        for j in range(gw):
            s = float(obj[i, j])
            if s < threshold:
                continue
            cx = GRID_STRIDE * j + GRID_STRIDE / 2 + GRID_STRIDE * reg_values[0, i, j]
            cy = GRID_STRIDE * i + GRID_STRIDE / 2 + GRID_STRIDE * reg_values[1, i, j]
            w = ANCHOR_WH[0] * math.exp(np.clip(reg_values[2, i, j], -3, 3))
            h = ANCHOR_WH[1] * math.exp(np.clip(reg_values[3, i, j], -3, 3))
            bbox = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            dets.append((bbox, s, (i, j)))
    dets.sort(key=lambda d: (-d[1], d[2]))
    return nms_2d(dets, 0.5)


def _iou_2d(a, b):
    l, t = max(a[0], b[0]), max(a[1], b[1])
    r, bo = min(a[2], b[2]), min(a[3], b[3])
    if r <= l or bo <= t:
        return 0.0
    inter = (r - l) * (bo - t)
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def nms_2d(dets, iou_thr: float):
    kept = []
    for d in dets:
        if all(_iou_2d(d[0], k[0]) < iou_thr for k in kept):
            kept.append(d)
    return kept


def nms_bev(detections, iou_thr: float = 0.1):
    """Greedy BEV suppression of ScoredBox lists, descending score."""
    from .geom import iou_bev

    order = sorted(detections, key=lambda d: -d.score)
    kept = []
    for d in order:
        if all(iou_bev(d.box, k.box) < iou_thr for k in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# frustum geometry and per-point features

def frustum_indices(cloud_xyz: np.ndarray, bbox, calib: Calibration,
                    margin: float = 6.0) -> np.ndarray:
    """Indices of points projecting inside the (expanded) 2D box."""
    uv, _, valid = project_to_image_safe(np.asarray(cloud_xyz)[:, :3], calib)
    l, t, r, b = bbox
    inside = (
        valid
        & (uv[:, 0] >= l - margin) & (uv[:, 0] <= r + margin)
        & (uv[:, 1] >= t - margin) & (uv[:, 1] <= b + margin)
    )
    return np.nonzero(inside)[0]


def bbox_azimuth(bbox, calib: Calibration) -> float:
    """Azimuth of the viewing ray through the 2D box center."""
    u = (bbox[0] + bbox[2]) / 2.0
    v = (bbox[1] + bbox[3]) / 2.0
    k = calib.cam_projection[:, :3]
    d_rect = np.linalg.solve(k, np.array([u, v, 1.0]))
    p0 = calib.rect_to_lidar(np.zeros(3))[0]
    p1 = calib.rect_to_lidar(d_rect)[0]
    d = p1 - p0
    return math.atan2(d[1], d[0])


def _rot_z(az: float) -> np.ndarray:
    c, s = math.cos(az), math.sin(az)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_FEAT_SCALE = np.array([1 / 20.0, 1 / 5.0, 1 / 2.0, 1 / 20.0])
_FEAT_SHIFT = np.array([0.0, 0.0, 1.73, 0.0])


def frustum_point_features(pts, az: float) -> ad.Tensor:
    """Canonical per-point inputs (x', y', z, range), normalized; (N, 4)."""
    p = pts if isinstance(pts, ad.Tensor) else ad.Tensor(pts)
    rot = _rot_z(-az)
    local = ad.matmul(p, ad.Tensor(rot.T))
    r2 = ad.sum_(ad.mul(p, p), axis=1)
    r = ad.power(r2, 0.5)
    feats = ad.concat([local, ad.reshape(r, (-1, 1))], axis=1)
    return ad.mul(ad.add(feats, ad.Tensor(_FEAT_SHIFT)), ad.Tensor(_FEAT_SCALE))


def _point_backbone(feats: ad.Tensor, weights, params=None):
    """Shared dense layers + max-pool context: (N, 4) -> ((N, 64), (32,))."""
    h1 = ad.relu(ad.dense(_wt(weights, params, "pt.fc1.W"),
                          _wt(weights, params, "pt.fc1.b"), feats))
    h2 = ad.relu(ad.dense(_wt(weights, params, "pt.fc2.W"),
                          _wt(weights, params, "pt.fc2.b"), h1))
    global_feat = ad.max_pool_points(h2)
    n = h2.values.shape[0]
    tiled = ad.matmul(ad.Tensor(np.ones((n, 1))), ad.reshape(global_feat, (1, -1)))
    return ad.concat([h2, tiled], axis=1), global_feat, h2


_POOL_TEMP = 4.0

# height-profile statistics: the top slab of whatever stands at the window
# center.  A plain car tops out at its roofline; roof cargo raises the top,
# and the footprint of that top slab separates compact cargo (balls, boxes)
# from long rack bars, the utility-vehicle signature
_STAT_TEMP = 8.0
# shallow enough that compact cargo's slab clears the roofline below it
_SLAB_DEPTH = 0.3


def _masked_soft_extreme(d: ad.Tensor, w: ad.Tensor,
                         temp: float = _STAT_TEMP) -> ad.Tensor:
    """Soft maximum of d over a soft membership w, safe for empty sets."""
    shift = float(d.values.max()) if d.values.size else 0.0
    e = ad.mul(w, ad.exp(ad.mul(ad.sub(d, ad.Tensor(shift)),
                                ad.Tensor(temp))))
    return ad.add(ad.mul(ad.log(ad.add(ad.sum_(e), ad.Tensor(1e-9))),
                         ad.Tensor(1.0 / temp)), ad.Tensor(shift))


def _axis_col(pts_t: ad.Tensor, axis) -> ad.Tensor:
    col = np.zeros((3, 1))
    col[axis, 0] = 1.0
    return ad.reshape(ad.matmul(pts_t, ad.Tensor(col)), (-1,))


def _cargo_depth_stats(pts_t: ad.Tensor, az: float) -> ad.Tensor:
    """(1, 3) profile of the structure's top slab near the window center.

    Channels: soft max of z over a +-1.2 m depth band around the window
    median (the roofline for a bare car, the cargo top otherwise), the
    weighted BEV variance of points in the top 0.3 m slab, and a soft
    log-count of that slab.  A bare car reads as low top with a broad,
    well-populated roof slab; compact roof cargo as a raised top with a
    tight footprint; a long rack bar as a raised top with a wide one.
    All three move when lidar returns slide along their rays, so the
    gate's learned boundary stays reachable for range perturbations.
    """
    nvec = np.array([[math.cos(az)], [math.sin(az)], [0.0]])
    d = ad.reshape(ad.matmul(pts_t, ad.Tensor(nvec)), (-1,))
    z = _axis_col(pts_t, 2)
    # center the depth band on the standing structure, not on the window's
    # ground points, whose median drifts with how much road the window saw
    up = z.values > GROUND_Z + 0.3
    dv = d.values[up] if up.any() else d.values
    c0 = float(np.median(dv)) if dv.size else 0.0
    # band falloff steeper than _STAT_TEMP so the soft extremes cannot be
    # carried by far-away points despite their larger exponent
    wb = ad.mul(
        ad.sigmoid(ad.mul(ad.sub(d, ad.Tensor(c0 - 1.2)), ad.Tensor(16.0))),
        ad.sigmoid(ad.mul(ad.sub(ad.Tensor(c0 + 1.2), d), ad.Tensor(16.0))))
    # high temperature keeps the log-count bias of the soft max small even
    # for a broad roof plank with a hundred points at the same height
    zmax = _masked_soft_extreme(z, wb, temp=25.0)
    # slab threshold is a constant of the current cloud, like the median
    in_band = wb.values > 0.5
    z_top = float(z.values[in_band].max()) if in_band.any() else 0.0
    ws = ad.mul(wb, ad.sigmoid(ad.mul(
        ad.sub(z, ad.Tensor(z_top - _SLAB_DEPTH)), ad.Tensor(25.0))))
    tot = ad.add(ad.sum_(ws), ad.Tensor(1e-6))
    var = ad.Tensor(0.0)
    for axis in (0, 1):
        u = _axis_col(pts_t, axis)
        mu = ad.div(ad.sum_(ad.mul(ws, u)), tot)
        du = ad.sub(u, mu)
        var = ad.add(var, ad.div(ad.sum_(ad.mul(ws, ad.mul(du, du))), tot))
    cnt = ad.log(ad.add(ad.sum_(ws), ad.Tensor(1.0)))
    parts = [ad.reshape(t, (1,)) for t in (zmax, var, cnt)]
    return ad.reshape(ad.concat(parts, axis=0), (1, 3))


def soft_pool_points(h: ad.Tensor, temp: float = _POOL_TEMP) -> ad.Tensor:
    """Log-sum-exp pooling over points, a smooth channel max.

    Unlike a hard max, every point stays in the gradient path, so points
    below the current channel leader still receive a pull.  The shift is a
    constant, which keeps the value exact and the exp bounded.
    """
    shift = h.values.max(axis=0)
    scaled = ad.mul(ad.sub(h, ad.Tensor(shift)), ad.Tensor(temp))
    pooled = ad.log(ad.sum_(ad.exp(scaled), axis=0))
    return ad.add(ad.mul(pooled, ad.Tensor(1.0 / temp)), ad.Tensor(shift))


def _seg_forward_full(pts, az: float, weights, params=None):
    """(per-point scores (N,), global feature (32,), frustum gate (1,)).

    Scores are the per-point sigmoid multiplied by a frustum-level
    objectness gate computed from pooled backbone features only.  The gate
    is what lets whole-frustum context (is there a car-shaped cluster
    here at all?) override locally car-like points.
    """
    feats = frustum_point_features(pts, az)
    per_point, global_feat, h2 = _point_backbone(feats, weights, params)
    s1 = ad.relu(ad.dense(_wt(weights, params, "seg.fc1.W"),
                          _wt(weights, params, "seg.fc1.b"), per_point))
    logits = ad.dense(_wt(weights, params, "seg.fc2.W"),
                      _wt(weights, params, "seg.fc2.b"), s1)
    pts_t = pts if isinstance(pts, ad.Tensor) \
        else ad.Tensor(np.asarray(pts, dtype=np.float64))
    pooled = ad.concat([ad.reshape(soft_pool_points(h2), (1, -1)),
                        _cargo_depth_stats(pts_t, az)], axis=1)
    g1 = ad.relu(ad.dense(_wt(weights, params, "seg.gate.fc1.W"),
                          _wt(weights, params, "seg.gate.fc1.b"), pooled))
    gate = ad.reshape(
        ad.sigmoid(ad.dense(_wt(weights, params, "seg.gate.fc2.W"),
                            _wt(weights, params, "seg.gate.fc2.b"), g1)),
        (-1,))
    scores = ad.mul(ad.reshape(ad.sigmoid(logits), (-1,)), gate)
    return scores, global_feat, gate


def frustum_seg_forward(pts, az: float, weights: SurrogateWeights, params=None):
    """Per-point car scores (N,) Tensor plus the global feature tensor."""
    scores, global_feat, _ = _seg_forward_full(pts, az, weights, params)
    return scores, global_feat


# ---------------------------------------------------------------------------
# oriented-box anchor from foreground points + learned residual head

def _largest_bev_component(bev: np.ndarray, radius: float) -> np.ndarray:
    """Boolean mask of the largest single-linkage BEV component."""
    d2 = ((bev[:, None, :] - bev[None, :, :]) ** 2).sum(-1)
    adj = d2 <= radius * radius
    unvisited = np.ones(len(bev), bool)
    best = None
    while unvisited.any():
        comp = np.zeros(len(bev), bool)
        comp[np.flatnonzero(unvisited)[0]] = True
        while True:
            grown = adj[comp].any(axis=0) & ~comp
            if not grown.any():
                break
            comp |= grown
        unvisited &= ~comp
        if best is None or comp.sum() > best.sum():
            best = comp
    return best


def _anchor_from_points(fg_local: np.ndarray):
    """Minimum-area oriented BEV rectangle fit in the canonical frame.

    Visible car surfaces form an L in the BEV, so the minimum-area rectangle
    recovers the heading far more stably than moment-based fits.  Returns
    (center (3,), dims (3,), yaw) or None for < 3 points.
    """
    if len(fg_local) < 3:
        return None
    # stray misclassified points wreck a min/max rectangle; keep only the
    # largest connected BEV blob
    keep = _largest_bev_component(fg_local[:, :2], 0.7)
    if keep.sum() >= 3:
        fg_local = fg_local[keep]
    bev = fg_local[:, :2]
    mu = bev.mean(axis=0)
    d = bev - mu
    thetas = np.arange(0.0, math.pi / 2.0, math.radians(1.0))
    c, s = np.cos(thetas), np.sin(thetas)
    x = d[:, 0][:, None] * c[None, :] + d[:, 1][:, None] * s[None, :]
    y = -d[:, 0][:, None] * s[None, :] + d[:, 1][:, None] * c[None, :]
    ex = x.max(axis=0) - x.min(axis=0)
    ey = y.max(axis=0) - y.min(axis=0)
    areas = np.maximum(ex, 0.05) * np.maximum(ey, 0.05)
    k = int(np.argmin(areas))
    theta = float(thetas[k])
    ext = np.array([max(ex[k], 0.3), max(ey[k], 0.3)])
    mid = np.array([(x[:, k].max() + x[:, k].min()) / 2.0,
                    (y[:, k].max() + y[:, k].min()) / 2.0])
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    center_bev = mu + rot @ mid
    if ext[0] < ext[1]:  # length axis first
        theta += math.pi / 2.0
        ext = ext[::-1]
    if ext[0] < 2.6:
        # end-on view: only one face is visible, so the long rect side is the
        # car's width; take the more radial axis as length and pad it to a
        # plausible car length, keeping the near face in place
        phi = math.atan2(center_bev[1], center_bev[0])
        cand = [(theta, ext[0], ext[1]), (theta + math.pi / 2.0, ext[1], ext[0])]
        def radial_dist(a):
            return abs((a - phi + math.pi / 2.0) % math.pi - math.pi / 2.0)
        theta, e_len, e_wid = min(cand, key=lambda t: radial_dist(t[0]))
        length = max(e_len, 3.2)
        u = np.array([math.cos(theta), math.sin(theta)])
        if u @ center_bev < 0:
            u = -u
        center_bev = center_bev + u * (length - e_len) / 2.0
        ext = np.array([length, max(e_wid, 0.3)])
    z_lo, z_hi = fg_local[:, 2].min(), fg_local[:, 2].max()
    center = np.array([center_bev[0], center_bev[1], (z_lo + z_hi) / 2.0])
    dims = np.array([ext[0], ext[1], max(z_hi - z_lo, 0.3)])
    return center, dims, normalize_angle(theta)


def _anchor_stats(fg_local: np.ndarray, anchor):
    center, dims, theta = anchor
    # anchor-frame BEV occupancy histogram so the residual head sees the
    # point layout it has to correct
    rel = (fg_local[:, :2] - center[:2]) @ np.array(
        [[math.cos(theta), -math.sin(theta)],
         [math.sin(theta), math.cos(theta)]])
    hx = np.clip(((rel[:, 0] + 3.2) / 0.4).astype(int), 0, 15)
    hy = np.clip(((rel[:, 1] + 1.6) / 0.4).astype(int), 0, 7)
    hist = np.zeros((16, 8))
    np.add.at(hist, (hx, hy), 1.0)
    return np.concatenate([
        center * [1 / 20.0, 1 / 5.0, 1 / 2.0],
        np.log(dims / MEAN_DIMS),
        [math.cos(2 * theta), math.sin(2 * theta)],
        [len(fg_local) / 200.0],
        fg_local.mean(axis=0) * [1 / 20.0, 1 / 5.0, 1 / 2.0],
        hist.ravel() / max(len(fg_local), 1),
    ])


def box_head_forward(global_feat_values: np.ndarray, fg_local: np.ndarray,
                     anchor, weights: SurrogateWeights, params=None):
    """Residual corrections (7,) on top of the anchor box."""
    stats = _anchor_stats(fg_local, anchor)
    inp = ad.Tensor(np.concatenate([global_feat_values, stats])[None, :])
    h = ad.relu(ad.dense(_wt(weights, params, "box.fc1.W"),
                         _wt(weights, params, "box.fc1.b"), inp))
    out = ad.dense(_wt(weights, params, "box.fc2.W"),
                   _wt(weights, params, "box.fc2.b"), h)
    return ad.reshape(out, (-1,))


def decode_box(anchor, residual: np.ndarray, az: float) -> Box3D:
    """Anchor + residual in the canonical frame -> world-frame Box3D."""
    center_c = np.asarray(anchor[0]) + residual[:3]
    dims = np.asarray(anchor[1]) * np.exp(np.clip(residual[3:6], -1.5, 1.5))
    yaw_c = anchor[2] + math.pi / 2.0 * math.tanh(residual[6])
    center = _rot_z(az) @ center_c
    return Box3D(center=tuple(center), dims=tuple(np.maximum(dims, 0.2)),
                 yaw=yaw_c + az)


def box_targets(gt_box: Box3D, anchor, az: float) -> np.ndarray:
    """Residual targets (7,) for a gt box against an anchor, canonical frame."""
    center_c = _rot_z(-az) @ np.asarray(gt_box.center)
    yaw_c = normalize_angle(gt_box.yaw - az)
    dc = center_c - np.asarray(anchor[0])
    dl = np.log(np.asarray(gt_box.dims) / np.asarray(anchor[1]))
    dth = yaw_c - anchor[2]
    # the box is symmetric under pi rotation; wrap into (-pi/2, pi/2]
    dth = normalize_angle(dth)
    if dth > math.pi / 2:
        dth -= math.pi
    elif dth <= -math.pi / 2:
        dth += math.pi
    dth = float(np.clip(dth, -math.pi / 2 + 2e-3, math.pi / 2 - 2e-3))
    t = math.atanh(dth / (math.pi / 2.0))
    return np.concatenate([dc, np.clip(dl, -1.4, 1.4), [t]])


# ---------------------------------------------------------------------------
# cascaded surrogate end-to-end

@dataclass
class FrustumResult:
    bbox2d: tuple
    objectness: float
    point_idx: np.ndarray
    seg: SegmentationOutput
    azimuth: float


@dataclass
class CascadedOutput:
    detections: list  # ScoredBox per reported object
    detections_2d: list  # (bbox, objectness)
    frustums: list  # FrustumResult


def refined_frustum(cloud: np.ndarray, bbox, calib: Calibration,
                     weights: SurrogateWeights):
    """Segment the 2D-box frustum, then re-gather points around the found
    object by azimuth/range window and segment again.

    The second pass recovers car points clipped by an imprecise 2D box.
    Returns (indices, azimuth, scores Tensor, global feature Tensor) or None.
    """
    idx = frustum_indices(cloud, bbox, calib)
    if len(idx) == 0:
        return None
    az = bbox_azimuth(bbox, calib)
    scores, gfeat = frustum_seg_forward(cloud[idx], az, weights)
    mask = scores.values > SEG_THRESHOLD
    if not mask.any():
        return idx, az, scores, gfeat
    centroid = cloud[idx][mask].mean(axis=0)
    az_c = math.atan2(centroid[1], centroid[0])
    r_c = math.hypot(centroid[0], centroid[1])
    r_p = np.hypot(cloud[:, 0], cloud[:, 1])
    az_p = np.arctan2(cloud[:, 1], cloud[:, 0])
    daz = (az_p - az_c + math.pi) % (2 * math.pi) - math.pi
    half = math.atan2(2.3, max(r_c, 1.0))
    sel = (np.abs(daz) <= half) & (np.abs(r_p - r_c) <= 4.0)
    nidx = np.nonzero(sel)[0]
    if len(nidx) < 8:
        return idx, az, scores, gfeat
    scores2, gfeat2 = frustum_seg_forward(cloud[nidx], az_c, weights)
    return nidx, az_c, scores2, gfeat2


def detect_cascaded(scene: Scene, weights: SurrogateWeights,
                    frustum_bboxes=None) -> CascadedOutput:
    """Full cascaded inference; ``frustum_bboxes`` overrides stage 1."""
    weights.require(_CASCADED_REQUIRED)
    image = scene.image.astype(np.float64) / 255.0
    obj, reg = image_grid_forward(image, weights)
    if frustum_bboxes is None:
        dets2d = decode_grid(obj.values, reg)
    else:
        dets2d = [(tuple(b), 1.0, None) for b in frustum_bboxes]
    cloud = scene.cloud[:, :3]
    detections, frustums, out2d = [], [], []
    for bbox, score, _ in dets2d:
        out2d.append((bbox, score))
        refined = refined_frustum(cloud, bbox, scene.calib, weights)
        if refined is None:
            continue
        idx, az, seg_scores, global_feat = refined
        pts = cloud[idx]
        sv = seg_scores.values
        mask = sv > SEG_THRESHOLD
        local = pts @ _rot_z(-az).T
        anchor = _anchor_from_points(local[mask])
        box = None
        if anchor is not None:
            res = box_head_forward(global_feat.values, local[mask], anchor, weights)
            box = decode_box(anchor, res.values, az)
            # confidence calibrated by box-evidence agreement: boxes that
            # stray from their own foreground points rank below clean fits
            fill = float(points_in_box(pts[mask], box, tol=0.05).mean())
            detections.append(ScoredBox(box=box, score=float(score) * (0.2 + 0.8 * fill),
                                        bbox2d=bbox))
        frustums.append(FrustumResult(
            bbox2d=bbox,
            objectness=float(score),
            point_idx=idx,
            seg=SegmentationOutput(scores=sv, mask=mask, box=box),
            azimuth=az,
        ))
    return CascadedOutput(detections=nms_bev(detections), detections_2d=out2d,
                          frustums=frustums)


# ---------------------------------------------------------------------------
# fusion surrogate

def fusion_image_features(image, weights: SurrogateWeights, params=None) -> ad.Tensor:
    """Stride-8 conv feature map (16, H/8, W/8) from an (H, W, 3) image."""
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    x = ad.transpose(x, (2, 0, 1))
    h1 = ad.relu(ad.conv2d(_wt(weights, params, "img.conv1.K"),
                           _wt(weights, params, "img.conv1.b"), x, stride=4))
    h2 = ad.relu(ad.conv2d(_wt(weights, params, "img.conv2.K"),
                           _wt(weights, params, "img.conv2.b"), h1, stride=2))
    h3 = ad.relu(ad.conv2d(_wt(weights, params, "img.conv3.K"),
                           _wt(weights, params, "img.conv3.b"), h2, pad=2))
    return h3


def window_max_fmap(fmap: ad.Tensor, k: int = 2) -> ad.Tensor:
    """Channelwise max over a (2k+1)^2 cell window, same spatial size.

    Widens the effective receptive field of the sampled image features so
    nearby appearance evidence reaches every point, like attention pooling
    in fusion detectors.  Gradient routes to the argmax cell (lowest index
    on ties).
    """
    v = fmap.values
    c, h, w = v.shape
    size = 2 * k + 1
    pad = np.pad(v, ((0, 0), (k, k), (k, k)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(pad, (size, size),
                                                   axis=(1, 2))
    flat = win.reshape(c, h, w, size * size)
    arg = flat.argmax(axis=3)
    out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

    def vjp(g):
        grad = np.zeros_like(v)
        ci, hi, wi = np.meshgrid(np.arange(c), np.arange(h), np.arange(w),
                                 indexing="ij")
        src_h = hi + arg // size - k
        src_w = wi + arg % size - k
        ok = (src_h >= 0) & (src_h < h) & (src_w >= 0) & (src_w < w)
        np.add.at(grad, (ci[ok], src_h[ok], src_w[ok]), g[ok])
        return grad

    return ad.custom_op(out, (fmap,), (vjp,))


def bilinear_sample(fmap: ad.Tensor, uv: np.ndarray) -> ad.Tensor:
    """Sample (N, C) features at fractional (N, 2) feature-map coords.

    Differentiable in the feature map only; out-of-range points get zeros.
    """
    c, fh, fw = fmap.values.shape
    flat = ad.reshape(ad.transpose(fmap, (1, 2, 0)), (fh * fw, c))
    u, v = uv[:, 0], uv[:, 1]
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    fu, fv = u - u0, v - v0
    out = None
    for du, dv, w in (
        (0, 0, (1 - fu) * (1 - fv)),
        (1, 0, fu * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < fw) & (vv >= 0) & (vv < fh)
        idx = np.where(ok, vv * fw + uu, 0)
        weight = np.where(ok, w, 0.0)[:, None]
        term = ad.mul(ad.gather_rows(flat, idx), ad.Tensor(weight))
        out = term if out is None else ad.add(out, term)
    return out


def fusion_point_features(pts) -> ad.Tensor:
    """Rotation-covariant per-point inputs (range, z, sin az, cos az)."""
    p = pts if isinstance(pts, ad.Tensor) else ad.Tensor(pts)
    pt = ad.transpose(p)
    px = ad.reshape(ad.gather_rows(pt, np.array([0])), (-1, 1))
    py = ad.reshape(ad.gather_rows(pt, np.array([1])), (-1, 1))
    pz = ad.reshape(ad.gather_rows(pt, np.array([2])), (-1, 1))
    r = ad.power(ad.sum_(ad.mul(p, p), axis=1), 0.5)
    rho = ad.power(ad.add(ad.mul(px, px), ad.mul(py, py)), 0.5)
    feats = ad.concat([
        ad.reshape(ad.mul(r, ad.Tensor(1 / 20.0)), (-1, 1)),
        ad.mul(ad.add(pz, ad.Tensor(1.73)), ad.Tensor(1 / 2.0)),
        ad.div(py, rho),
        ad.div(px, rho),
    ], axis=1)
    return feats


def fusion_scores(image, cloud_xyz, weights: SurrogateWeights, calib: Calibration,
                  params=None, frozen_uv: np.ndarray | None = None):
    """Per-point proposal scores (N,) Tensor for image + cloud inputs.

    Image features are sampled at the points' projections; the sampling is
    differentiable in the feature map only, so the projection coordinates
    are frozen at forward values (``frozen_uv`` pins them externally).
    """
    fmap = window_max_fmap(fusion_image_features(image, weights, params))
    if frozen_uv is None:
        pts_values = cloud_xyz.values if isinstance(cloud_xyz, ad.Tensor) else cloud_xyz
        uv, _, valid = project_to_image_safe(np.asarray(pts_values)[:, :3], calib)
        fuv = uv / 8.0 - 0.5
        fuv[~valid] = -10.0  # behind camera: lands outside, zero features
    else:
        fuv = frozen_uv
    img_feats = bilinear_sample(fmap, fuv)
    h1 = ad.relu(ad.dense(_wt(weights, params, "pt.fc1.W"),
                          _wt(weights, params, "pt.fc1.b"),
                          fusion_point_features(cloud_xyz)))
    h2 = ad.relu(ad.dense(_wt(weights, params, "pt.fc2.W"),
                          _wt(weights, params, "pt.fc2.b"), h1))
    # image-conditioned gating of the point features: the image branch
    # modulates how much the geometry evidence counts per point
    gate = ad.sigmoid(ad.dense(_wt(weights, params, "score.gate.W"),
                               _wt(weights, params, "score.gate.b"), img_feats))
    h2 = ad.mul(h2, gate)
    joint = ad.concat([h2, img_feats], axis=1)
    s1 = ad.relu(ad.dense(_wt(weights, params, "score.fc1.W"),
                          _wt(weights, params, "score.fc1.b"), joint))
    logits = ad.dense(_wt(weights, params, "score.fc2.W"),
                      _wt(weights, params, "score.fc2.b"), s1)
    return ad.reshape(ad.sigmoid(logits), (-1,)), h2


def _azimuth_clusters(points: np.ndarray, gap: float = AZIMUTH_GAP):
    """Group points by gaps in BEV azimuth; returns index lists.

    Lidar returns off one object are near-contiguous in azimuth (ray step
    0.35 deg), while distinct objects are separated by at least the scene
    placement margin, so splitting at azimuth gaps larger than two ray
    steps separates objects that BEV distance alone cannot.
    """
    az = np.arctan2(points[:, 1], points[:, 0])
    order = np.argsort(az, kind="stable")
    clusters, cur = [], [int(order[0])]
    for a, b in zip(order, order[1:]):
        if az[b] - az[a] > gap:
            clusters.append(cur)
            cur = []
        cur.append(int(b))
    clusters.append(cur)
    return clusters


@dataclass
class FusionOutput:
    proposals: ProposalSet
    detections: list  # one ScoredBox per cluster
    point_idx: np.ndarray  # cloud row per proposal


def fusion_proposal_boxes(cloud: np.ndarray, scores: np.ndarray,
                          feat_values: np.ndarray, weights: SurrogateWeights,
                          ):
    """Per-point proposal boxes and per-cluster detections from scores.

    Returns (keep rows above floor, one Box3D per kept row, detections).
    """
    keep = np.nonzero(scores > PROPOSAL_FLOOR)[0]
    fg = np.nonzero(scores > SEG_THRESHOLD)[0]
    elevated = cloud[:, 2] > GROUND_Z + 0.3
    elev_az = np.arctan2(cloud[elevated, 1], cloud[elevated, 0])
    elev_scores = scores[elevated]
    cluster_boxes, cluster_centers, detections = [], [], []
    if len(fg):
        for members in _azimuth_clusters(cloud[fg]):
            if len(members) < MIN_CLUSTER_POINTS:
                continue
            rows = fg[np.asarray(members)]
            pts = cloud[rows]
            center = pts.mean(axis=0)
            az = math.atan2(center[1], center[0])
            local = pts @ _rot_z(-az).T
            anchor = _anchor_from_points(local)
            if anchor is None:
                continue
            gfeat = feat_values[rows].max(axis=0)
            res = box_head_forward(gfeat, local, anchor, weights)
            box = decode_box(anchor, res.values, az)
            cluster_boxes.append(box)
            cluster_centers.append(center[:2])
            # confidence by proposal voting: average the scores of every
            # elevated point in the cluster's azimuth span, so low-scoring
            # structure in the same region lowers the detection confidence
            mem_az = np.arctan2(pts[:, 1], pts[:, 0])
            span = (elev_az >= mem_az.min() - AZIMUTH_GAP) & \
                   (elev_az <= mem_az.max() + AZIMUTH_GAP)
            fill = float(points_in_box(pts, box, tol=0.05).mean())
            detections.append(ScoredBox(
                box=box,
                score=float(elev_scores[span].mean()) * (0.2 + 0.8 * fill)))
    boxes = []
    for row in keep:
        if cluster_centers:
            d2 = [float(np.sum((cloud[row, :2] - cc) ** 2)) for cc in cluster_centers]
            boxes.append(cluster_boxes[int(np.argmin(d2))])
        else:
            c = cloud[row]
            boxes.append(Box3D(
                center=(c[0], c[1], -1.73 + MEAN_DIMS[2] / 2),
                dims=tuple(MEAN_DIMS),
                yaw=math.atan2(c[1], c[0]),
            ))
    return keep, boxes, detections


def detect_fusion(scene: Scene, weights: SurrogateWeights) -> FusionOutput:
    weights.require(_FUSION_REQUIRED)
    image = scene.image.astype(np.float64) / 255.0
    cloud = scene.cloud[:, :3]
    scores_t, feats = fusion_scores(image, cloud, weights, scene.calib)
    scores = scores_t.values
    keep, boxes, detections = fusion_proposal_boxes(cloud, scores, feats.values,
                                                    weights)
    proposals = ProposalSet(scores=scores[keep], boxes=boxes)
    return FusionOutput(proposals=proposals, detections=nms_bev(detections),
                        point_idx=keep)


# ---------------------------------------------------------------------------
# detector interface wrappers

@dataclass
class DetectorInterface:
    """Capability flags plus callables shared by surrogates and adapters."""

    has_2d_objectness: bool
    has_point_segmentation: bool
    has_proposals: bool
    detect: object  # scene -> CascadedOutput | FusionOutput


def as_detector(weights: SurrogateWeights) -> DetectorInterface:
    if weights.kind == "cascaded":
        return DetectorInterface(
            has_2d_objectness=True,
            has_point_segmentation=True,
            has_proposals=False,
            detect=lambda scene: detect_cascaded(scene, weights),
        )
    if weights.kind == "fusion":
        return DetectorInterface(
            has_2d_objectness=False,
            has_point_segmentation=False,
            has_proposals=True,
            detect=lambda scene: detect_fusion(scene, weights),
        )
    raise UntrainedWeights(f"unknown surrogate kind {weights.kind!r}")


# ---------------------------------------------------------------------------
# training

def _adam_init(tensors):
    return {
        "m": {k: np.zeros_like(v) for k, v in tensors.items()},
        "v": {k: np.zeros_like(v) for k, v in tensors.items()},
        "t": 0,
    }


def _adam_update(tensors, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state["t"] += 1
    t = state["t"]
    for k in sorted(grads):
        g = grads[k]
        state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * g
        state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * g * g
        mhat = state["m"][k] / (1 - beta1**t)
        vhat = state["v"][k] / (1 - beta2**t)
        tensors[k] -= lr * mhat / (np.sqrt(vhat) + eps)


def _bce(pred: ad.Tensor, target: np.ndarray, weight: np.ndarray) -> ad.Tensor:
    p = ad.clip(pred, 1e-7, 1 - 1e-7)
    pos = ad.mul(ad.Tensor(target * weight), ad.log(p))
    neg = ad.mul(ad.Tensor((1 - target) * weight), ad.log(ad.sub(ad.Tensor(1.0), p)))
    return ad.div(ad.neg(ad.add(ad.sum_(pos), ad.sum_(neg))),
                  ad.Tensor(float(weight.sum())))


def _grid_targets(scene: Scene, gh: int, gw: int):
    obj = np.zeros((gh, gw))
    reg = np.zeros((4, gh, gw))
    weight = np.ones((gh, gw))
    for lab in scene.car_labels():
        l, t, r, b = lab.bbox
        # non-center cells covering the car are soft negatives
        j0, j1 = int(l // GRID_STRIDE), int(r // GRID_STRIDE)
        i0, i1 = int(t // GRID_STRIDE), int(b // GRID_STRIDE)
        weight[max(i0, 0):min(i1, gh - 1) + 1,
               max(j0, 0):min(j1, gw - 1) + 1] = 0.2
    for lab in scene.car_labels():
        l, t, r, b = lab.bbox
        cx, cy = (l + r) / 2, (t + b) / 2
        j = int(cx // GRID_STRIDE)
        i = int(cy // GRID_STRIDE)
        if not (0 <= i < gh and 0 <= j < gw):
            continue
        obj[i, j] = 1.0
        weight[i, j] = 20.0
        reg[0, i, j] = (cx - (GRID_STRIDE * j + GRID_STRIDE / 2)) / GRID_STRIDE
        reg[1, i, j] = (cy - (GRID_STRIDE * i + GRID_STRIDE / 2)) / GRID_STRIDE
        reg[2, i, j] = math.log(max(r - l, 1.0) / ANCHOR_WH[0])
        reg[3, i, j] = math.log(max(b - t, 1.0) / ANCHOR_WH[1])
    return obj, reg, weight


def _watch_all(tape: ad.Tape, tensors: dict, names) -> dict:
    return {k: tape.watch(k, ad.Tensor(tensors[k])) for k in names}


def _train_image_grid(weights, scenes, rng, steps, lr=3e-3):
    names = [k for k in weights.tensors if k.startswith("img.")]
    state = _adam_init({k: weights.tensors[k] for k in names})
    trace = []
    gh = gw = None
    for _ in range(steps):
        batch = rng.choice(len(scenes), size=min(4, len(scenes)), replace=False)
        tape = ad.Tape()
        params = _watch_all(tape, weights.tensors, names)
        total = None
        with ad.active_tape(tape):
            for si in sorted(batch):
                scene = scenes[si]
                image = scene.image.astype(np.float64) / 255.0
                head = _grid_head(image, weights, params)
                if gh is None:
                    gh, gw = head.values.shape[1:]
                tobj, treg, w = _grid_targets(scene, gh, gw)
                pred_obj = ad.reshape(ad.sigmoid(ad.gather_rows(head, np.array([0]))), (gh, gw))
                loss = _bce(ad.reshape(pred_obj, (-1,)), tobj.ravel(), w.ravel())
                pos = tobj.ravel() > 0
                if pos.any():
                    pred_reg = ad.reshape(ad.gather_rows(head, np.arange(1, 5)), (4, -1))
                    diff = ad.sub(ad.gather_rows(ad.transpose(pred_reg), np.nonzero(pos)[0]),
                                  ad.Tensor(treg.reshape(4, -1).T[pos]))
                    loss = ad.add(loss, ad.mul(ad.Tensor(5.0),
                                               ad.mean(ad.mul(diff, diff))))
                total = loss if total is None else ad.add(total, loss)
        grads = ad.backward(tape, total)
        trace.append(float(total.values))
        if not math.isfinite(trace[-1]):
            raise TrainingDiverged("image grid loss non-finite", trace)
        _adam_update(weights.tensors, {k: g.values for k, g in grads.items()},
                     state, lr)
    return trace


_CLUTTER_SPHERE = make_icosphere(1.0, 1)
_CLUTTER_LIDAR = desk_config()


def _roof_cluster_points(cx, cy, top, kind, rng):
    """Lidar returns of a clutter shape mounted over a car roof.

    Rendering through the sensor model (instead of volume sampling) keeps
    the training clutter on the same manifold as any real roof object:
    only sensor-facing surfaces produce points.  ``kind`` is 'ball'
    (round cargo) or 'box' (compact cargo box), both still a car, or
    'bar' (a long raised rack bar at arbitrary yaw, the utility-vehicle
    signature).  The classes share return counts and raised-top heights
    so the separating statistic is the top slab's BEV footprint.
    """
    verts = _CLUTTER_SPHERE.local_vertices()
    if kind == "ball":
        r = rng.uniform(0.25, 0.45)
        v = verts * r
        zc = top + r + rng.uniform(0.0, 0.15)
    elif kind == "box":
        dims = rng.uniform((0.45, 0.45, 0.5), (0.6, 0.6, 0.8))
        v = verts / np.abs(verts).max(axis=1, keepdims=True) * (dims / 2.0)
        zc = top + dims[2] / 2.0
    else:
        dims = np.array([rng.uniform(1.6, 2.2), rng.uniform(0.15, 0.25),
                         rng.uniform(0.2, 0.3)])
        v = verts / np.abs(verts).max(axis=1, keepdims=True) * (dims / 2.0)
        # mostly broadside to the sensor; an end-on bar shows no footprint
        yaw = math.atan2(cy, cx) + math.pi / 2.0 + rng.uniform(-0.9, 0.9)
        c, s = math.cos(yaw), math.sin(yaw)
        v = v @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        zc = top + dims[2] / 2.0 + rng.uniform(0.3, 0.5)
    world = v + (cx, cy, zc)
    cloud = render_points(world, _CLUTTER_SPHERE.faces, _CLUTTER_LIDAR,
                          seed=int(rng.integers(2**31)))
    if len(cloud.positions) < 5:
        return None
    return cloud.positions


def _frustum_dataset(scenes, rng, cap=128, jitter: float = 4.0):
    """(points, az, seg targets, gt box) per labeled car.

    Each car contributes the exact frustum plus one from a jittered 2D box,
    matching the noise of stage-1 boxes at inference.
    """
    out = []
    for scene in scenes:
        cloud = scene.cloud[:, :3]
        for lab in scene.car_labels():
            bboxes = [lab.bbox]
            if jitter > 0:
                bboxes.append(tuple(np.asarray(lab.bbox)
                                    + rng.uniform(-jitter, jitter, 4)))
            for bbox in bboxes:
                idx = frustum_indices(cloud, bbox, scene.calib)
                if len(idx) < 8:
                    continue
                if len(idx) > cap:
                    idx = np.sort(rng.choice(idx, size=cap, replace=False))
                pts = cloud[idx]
                targets = points_in_box(pts, lab.box, tol=0.02).astype(float)
                az = bbox_azimuth(bbox, scene.calib)
                out.append((pts, az, targets, lab.box))
            # wide re-gathered window, matching the second segmentation
            # pass at inference (azimuth wedge around the object, +-4 m in
            # range)
            cx, cy = lab.box.center[0], lab.box.center[1]
            az_c = math.atan2(cy, cx)
            r_c = math.hypot(cx, cy)
            r_p = np.hypot(cloud[:, 0], cloud[:, 1])
            az_p = np.arctan2(cloud[:, 1], cloud[:, 0])
            daz = (az_p - az_c + math.pi) % (2 * math.pi) - math.pi
            half = math.atan2(2.3, max(r_c, 1.0))
            widx = np.nonzero((np.abs(daz) <= half)
                              & (np.abs(r_p - r_c) <= 4.0))[0]
            windows = []
            if len(widx) >= 8:
                windows.append((cloud[widx], az_c))
            idx = frustum_indices(cloud, lab.bbox, scene.calib)
            if len(idx) >= 8:
                windows.append((cloud[idx], bbox_azimuth(lab.bbox,
                                                         scene.calib)))
            for pts_w, az_w in windows:
                if len(pts_w) > cap:
                    pts_w = pts_w[np.sort(rng.choice(len(pts_w), cap,
                                                     replace=False))]
                tgt = points_in_box(pts_w, lab.box, tol=0.02).astype(float)
                out.append((pts_w, az_w, tgt, lab.box))
                top = lab.box.center[2] + lab.box.dims[2] / 2.0
                # benign roof clutter stays a car: compact cargo on the
                # roof (clutter points themselves are not car points)
                if rng.random() < 0.7:
                    kind = "ball" if rng.random() < 0.5 else "box"
                    extra = _roof_cluster_points(cx, cy, top, kind, rng)
                    if extra is not None:
                        out.append((np.vstack([pts_w, extra]), az_w,
                                    np.append(tgt, np.zeros(len(extra))),
                                    lab.box))
                # vehicle-class confusion negative: a long rack bar over
                # the cabin reads as a utility vehicle, not a car, so the
                # whole window is labeled non-car.  This is the class
                # boundary separating sedans from racked conversions.
                if rng.random() < 0.7:
                    extra = _roof_cluster_points(cx, cy, top, "bar", rng)
                    if extra is not None:
                        pts_n = np.vstack([pts_w, extra])
                        out.append((pts_n, az_w, np.zeros(len(pts_n)), None))
        # ground-only background windows: the only supervision that makes
        # the frustum gate depend on the pooled features instead of
        # collapsing to a constant
        h_img, w_img = scene.image.shape[:2]
        added = 0
        for _ in range(8):
            if added >= 2:
                break
            cx = rng.uniform(0.1, 0.9) * w_img
            half = rng.uniform(0.06, 0.14) * w_img
            bbox = (cx - half, 0.0, cx + half, float(h_img))
            idx = frustum_indices(cloud, bbox, scene.calib)
            if len(idx) < 8 or cloud[idx, 2].max() > GROUND_Z + 0.3:
                continue
            if len(idx) > cap:
                idx = np.sort(rng.choice(idx, size=cap, replace=False))
            out.append((cloud[idx], bbox_azimuth(bbox, scene.calib),
                        np.zeros(len(idx)), None))
            added += 1
    return out


def _train_frustum_seg(weights, dataset, rng, steps, lr=3e-3):
    names = ["pt.fc1.W", "pt.fc1.b", "pt.fc2.W", "pt.fc2.b",
             "seg.fc1.W", "seg.fc1.b", "seg.fc2.W", "seg.fc2.b",
             "seg.gate.fc1.W", "seg.gate.fc1.b",
             "seg.gate.fc2.W", "seg.gate.fc2.b"]
    state = _adam_init({k: weights.tensors[k] for k in names})
    trace = []
    for _ in range(steps):
        batch = rng.choice(len(dataset), size=min(8, len(dataset)), replace=False)
        tape = ad.Tape()
        params = _watch_all(tape, weights.tensors, names)
        total = None
        with ad.active_tape(tape):
            for di in sorted(batch):
                pts, az, targets, _ = dataset[di]
                scores, _, gate = _seg_forward_full(pts, az, weights, params)
                # label smoothing keeps scores off the [0,1] rails; a
                # saturated score turns -log(1-s) into an amplifier of
                # numerical noise, which buries every useful gradient
                loss = _bce(scores, targets * 0.9 + 0.05,
                            np.ones_like(targets))
                # frustum-level supervision: without it the gate collapses
                # to a constant because the per-point path alone already
                # fits ground-only windows; ramped targets give ramped
                # gate labels so the car / non-car boundary stays smooth
                has_car = np.array([0.1 + 0.8 * float(targets.max(initial=0.0))])
                loss = ad.add(loss, _bce(gate, has_car, np.array([2.0])))
                total = loss if total is None else ad.add(total, loss)
        grads = ad.backward(tape, total)
        trace.append(float(total.values))
        if not math.isfinite(trace[-1]):
            raise TrainingDiverged("frustum seg loss non-finite", trace)
        _adam_update(weights.tensors, {k: g.values for k, g in grads.items()},
                     state, lr)
    return trace


def _train_box_head(weights, samples, rng, steps, lr=3e-3):
    """samples: (global_feat, fg_local, anchor, target residual (7,))."""
    names = ["box.fc1.W", "box.fc1.b", "box.fc2.W", "box.fc2.b"]
    state = _adam_init({k: weights.tensors[k] for k in names})
    trace = []
    if not samples:
        return [0.0]
    for _ in range(steps):
        batch = rng.choice(len(samples), size=min(16, len(samples)), replace=False)
        tape = ad.Tape()
        params = _watch_all(tape, weights.tensors, names)
        total = None
        with ad.active_tape(tape):
            for si in sorted(batch):
                gfeat, fg_local, anchor, target = samples[si]
                res = box_head_forward(gfeat, fg_local, anchor, weights, params)
                diff = ad.sub(res, ad.Tensor(target))
                loss = ad.mean(ad.mul(diff, diff))
                total = loss if total is None else ad.add(total, loss)
        grads = ad.backward(tape, total)
        trace.append(float(total.values))
        if not math.isfinite(trace[-1]):
            raise TrainingDiverged("box head loss non-finite", trace)
        _adam_update(weights.tensors, {k: g.values for k, g in grads.items()},
                     state, lr)
    return trace


def _cascaded_box_samples(weights, scenes, rng, jitter: float = 4.0):
    """Box-head training pairs from the frozen segmentation network.

    Frustums go through the same refinement as inference, from both the
    exact 2D box and a jittered one, so the head trains on the point sets
    it will actually see.
    """
    samples = []
    for scene in scenes:
        cloud = scene.cloud[:, :3]
        for lab in scene.car_labels():
            bboxes = [lab.bbox]
            if jitter > 0:
                bboxes.append(tuple(np.asarray(lab.bbox)
                                    + rng.uniform(-jitter, jitter, 4)))
            for bbox in bboxes:
                refined = refined_frustum(cloud, bbox, scene.calib, weights)
                if refined is None:
                    continue
                idx, az, scores, gfeat = refined
                mask = scores.values > SEG_THRESHOLD
                local = cloud[idx] @ _rot_z(-az).T
                anchor = _anchor_from_points(local[mask])
                if anchor is None:
                    continue
                target = box_targets(lab.box, anchor, az)
                samples.append((gfeat.values, local[mask], anchor, target))
    return samples


def _fusion_point_targets(scene: Scene):
    cloud = scene.cloud[:, :3]
    target = np.zeros(len(cloud))
    for lab in scene.car_labels():
        target[points_in_box(cloud, lab.box, tol=0.02)] = 1.0
    return target


def _train_fusion_scores(weights, scenes, rng, steps, lr=3e-3, cap=384):
    names = [k for k in weights.tensors
             if k.startswith(("img.", "pt.", "score."))]
    state = _adam_init({k: weights.tensors[k] for k in names})
    trace = []
    targets = [_fusion_point_targets(s) for s in scenes]
    for _ in range(steps):
        batch = rng.choice(len(scenes), size=min(2, len(scenes)), replace=False)
        tape = ad.Tape()
        params = _watch_all(tape, weights.tensors, names)
        total = None
        with ad.active_tape(tape):
            for si in sorted(batch):
                scene = scenes[si]
                t = targets[si]
                n = len(scene.cloud)
                pos = np.nonzero(t > 0)[0]
                neg = np.nonzero(t == 0)[0]
                n_pos = min(len(pos), cap // 2)
                n_neg = min(len(neg), cap - n_pos)
                rows = np.sort(np.concatenate([
                    rng.choice(pos, size=n_pos, replace=False) if n_pos else [],
                    rng.choice(neg, size=n_neg, replace=False) if n_neg else [],
                ]).astype(np.intp))
                image = scene.image.astype(np.float64) / 255.0
                scores, _ = fusion_scores(
                    image, scene.cloud[rows, :3], weights, scene.calib, params)
                loss = _bce(scores, t[rows], np.where(t[rows] > 0, 2.0, 1.0))
                total = loss if total is None else ad.add(total, loss)
        grads = ad.backward(tape, total)
        trace.append(float(total.values))
        if not math.isfinite(trace[-1]):
            raise TrainingDiverged("fusion score loss non-finite", trace)
        _adam_update(weights.tensors, {k: g.values for k, g in grads.items()},
                     state, lr)
    return trace


def _fusion_box_samples(weights, scenes):
    samples = []
    for scene in scenes:
        cloud = scene.cloud[:, :3]
        image = scene.image.astype(np.float64) / 255.0
        scores_t, feats = fusion_scores(image, cloud, weights, scene.calib)
        fg = np.nonzero(scores_t.values > SEG_THRESHOLD)[0]
        if not len(fg):
            continue
        for members in _azimuth_clusters(cloud[fg]):
            if len(members) < MIN_CLUSTER_POINTS:
                continue
            rows = fg[np.asarray(members)]
            pts = cloud[rows]
            center = pts.mean(axis=0)
            best, best_d = None, 4.0
            for lab in scene.car_labels():
                d = float(np.sum((np.asarray(lab.box.center[:2]) - center[:2]) ** 2))
                if d < best_d:
                    best, best_d = lab.box, d
            if best is None:
                continue
            az = math.atan2(center[1], center[0])
            local = pts @ _rot_z(-az).T
            anchor = _anchor_from_points(local)
            if anchor is None:
                continue
            target = box_targets(best, anchor, az)
            gfeat = feats.values[rows].max(axis=0)
            samples.append((gfeat, local, anchor, target))
    return samples


def _val_ap(weights: SurrogateWeights, scenes) -> float:
    dets, gts = [], []
    for scene in scenes:
        if weights.kind == "cascaded":
            dets.append(detect_cascaded(scene, weights).detections)
        else:
            dets.append(detect_fusion(scene, weights).detections)
        gts.append(scene.labels)
    return compute_ap(dets, gts, iou_thr=0.7, difficulty=None, kind="bev")


def surrogate_train(kind: str, train_scenes, val_scenes, seed: int,
                    steps_scale: float = 1.0) -> SurrogateWeights:
    """Train one surrogate; deterministic given (kind, scenes, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    traces = {}
    if kind == "cascaded":
        weights = init_cascaded(seed)
        traces["image_grid"] = _train_image_grid(
            weights, train_scenes, rng, steps=int(300 * steps_scale))
        dataset = _frustum_dataset(train_scenes, rng)
        traces["frustum_seg"] = _train_frustum_seg(
            weights, dataset, rng, steps=int(300 * steps_scale))
        samples = _cascaded_box_samples(weights, train_scenes, rng)
        traces["box_head"] = _train_box_head(
            weights, samples, rng, steps=int(400 * steps_scale))
    elif kind == "fusion":
        weights = init_fusion(seed)
        traces["scores"] = _train_fusion_scores(
            weights, train_scenes, rng, steps=int(250 * steps_scale))
        samples = _fusion_box_samples(weights, train_scenes)
        traces["box_head"] = _train_box_head(
            weights, samples, rng, steps=int(400 * steps_scale))
    else:
        raise ValueError(f"unknown surrogate kind {kind!r}")
    val_ap = _val_ap(weights, val_scenes)
    weights.metadata = {
        "seed": seed,
        "steps": {k: len(v) for k, v in traces.items()},
        "final_losses": {k: v[-1] for k, v in traces.items()},
        "val_ap": val_ap,
    }
    return weights
