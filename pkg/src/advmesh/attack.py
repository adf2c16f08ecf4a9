"""Universal adversarial mesh optimization.

ADAM with projection onto a size box and the color range, driving either
the two-stage cascaded attack (shape against the point pipeline, then
texture against the image pipeline) or the end-to-end fusion attack, with
lidar-only / image-only / combined modes.  One parameter set (vertex
displacements + vertex colors) is trained across all scenes.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .dataio import Scene, points_in_box
from .lidar import LidarConfig, desk_config, merge_scene, render_points, render_points_tensor
from .losses import (
    LossConfig,
    ProposalSet,
    SegmentationOutput,
    loss_epnet,
    loss_fpn_pc,
    loss_objectness_2d,
    total_loss,
)
from .meshes import AdvMesh, Placement, deform, deform_tensor, make_icosphere, place_on_roof
from .raster import ShadingConfig, composite, rasterize, shade, shade_tensor
from .geom import iou_bev
from .victim import (
    OBJ_THRESHOLD,
    detect_cascaded,
    detect_fusion,
    SEG_THRESHOLD,
    SurrogateWeights,
    _anchor_from_points,
    _rot_z,
    bbox_azimuth,
    box_head_forward,
    decode_box,
    frustum_indices,
    frustum_seg_forward,
    fusion_proposal_boxes,
    fusion_scores,
    image_grid_forward,
    refined_frustum,
)

MODES = ("lidar_only", "image_only", "lidar_image")
VICTIM_KINDS = ("cascaded", "fusion")
SIZE_BOXES = {"cascaded": (0.8, 0.8, 0.8), "fusion": (1.2, 1.2, 0.8)}
SPHERE_RADIUS = 0.4
SPHERE_SUBDIVISIONS = 2
GREY = (0.5, 0.5, 0.5)


class ShapeMismatch(ValueError):
    """Parameter, gradient, and state shapes must agree."""


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``iterations`` is the step budget per optimization stage: the cascaded
    attack runs it once per active stage, the fusion attack once in total.
    """

    mode: str = "lidar_image"
    victim_kind: str = "cascaded"
    size_box: tuple[float, float, float] | None = None  # default per victim
    lr_shape: float = 0.005
    lr_texture: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 500
    batch_size: int = 8
    seed: int = 0
    lap_weight: float = 0.001
    iou_kind: str = "3d"
    clearance: float = 0.0
    lidar: LidarConfig = field(default_factory=desk_config)
    shading: ShadingConfig = field(default_factory=ShadingConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.victim_kind not in VICTIM_KINDS:
            raise ValueError(f"victim_kind must be one of {VICTIM_KINDS}")
        if self.size_box is not None and any(s <= 0 for s in self.size_box):
            raise ValueError("size box must be positive")
        if self.lr_shape < 0 or self.lr_texture < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    def resolved_size_box(self) -> tuple[float, float, float]:
        return self.size_box if self.size_box is not None else SIZE_BOXES[self.victim_kind]

    def loss_config(self) -> LossConfig:
        return LossConfig(lap_weight=self.lap_weight, iou_kind=self.iou_kind)


# ---------------------------------------------------------------------------
# ADAM with box/color projection

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})


def project_params(params: dict[str, np.ndarray], base_vertices: np.ndarray,
                   size_box) -> dict[str, np.ndarray]:
    """Clamp deformed local vertices into the centered size box, colors to
    [0, 1].  Idempotent."""
    out = dict(params)
    if "displacements" in out:
        half = np.asarray(size_box) / 2.0
        local = np.clip(base_vertices + out["displacements"], -half, half)
        out["displacements"] = local - base_vertices
    if "colors" in out:
        out["colors"] = np.clip(out["colors"], 0.0, 1.0)
    return out


def adam_project_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: AdamState, cfg: AttackConfig,
                      base_vertices: np.ndarray):
    """Bias-corrected ADAM update followed by box/color projection."""
    lrs = {"displacements": cfg.lr_shape, "colors": cfg.lr_texture}
    for name in params:
        if name not in grads:
            raise ShapeMismatch(f"missing gradient for {name!r}")
        if (params[name].shape != grads[name].shape
                or params[name].shape != state.m[name].shape):
            raise ShapeMismatch(f"shape mismatch on {name!r}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        m_hat = state.m[name] / (1 - cfg.beta1**t)
        v_hat = state.v[name] / (1 - cfg.beta2**t)
        out[name] = p - lrs[name] * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return project_params(out, base_vertices, cfg.resolved_size_box()), state


# ---------------------------------------------------------------------------
# scene composition: place the mesh on every labeled car and re-render

def initial_mesh() -> AdvMesh:
    """Grey 40 cm radius icosphere, 162 vertices / 320 faces."""
    return make_icosphere(SPHERE_RADIUS, SPHERE_SUBDIVISIONS, color=GREY)


def _render_seed(seed: int, iteration: int, scene_id: str, car: int) -> int:
    words = [seed & 0xFFFFFFFF, iteration, zlib.crc32(scene_id.encode()), car]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def apply_mesh(scene: Scene, mesh: AdvMesh, seed: int = 0,
               lidar: LidarConfig | None = None,
               shading: ShadingConfig | None = None,
               clearance: float = 0.0) -> Scene:
    """Place the mesh on every labeled car and re-render cloud and image."""
    lidar = lidar or desk_config()
    shading = shading or ShadingConfig()
    cloud = scene.cloud
    image = scene.image.astype(np.float64) / 255.0
    h, w = image.shape[:2]
    for k, lab in enumerate(scene.car_labels()):
        placement = place_on_roof(lab.box, mesh, clearance)
        world = deform(mesh, placement)
        rendered = render_points(world, mesh.faces, lidar,
                                 seed=_render_seed(seed, 0, scene.id, k))
        cloud, _ = merge_scene(cloud, rendered, lidar)
        frags = rasterize(world, mesh.faces, scene.calib, (w, h))
        overlay, mask = shade(frags, world, mesh.faces, mesh.colors, shading,
                              scene.calib)
        image = composite(image, overlay, mask)
    image8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return replace(scene, cloud=cloud, image=image8)


def baseline_sphere(scenes, seed: int = 0, lidar: LidarConfig | None = None):
    """Unperturbed grey sphere placed through the same pipeline."""
    mesh = initial_mesh()
    return mesh, [apply_mesh(s, mesh, seed=seed, lidar=lidar) for s in scenes]


@dataclass
class ComposedScene:
    """Tape-connected attacked scene: merged cloud and composited image."""

    scene: Scene
    cloud_t: ad.Tensor | None  # (N + M, 3)
    cloud: np.ndarray  # values of cloud_t, or clean cloud xyz
    image_t: ad.Tensor | None  # (H, W, 3) in [0, 1]
    mesh_rows: list[np.ndarray]  # merged-cloud row indices per car


def compose_scene(scene: Scene, mesh: AdvMesh, disp_t: ad.Tensor | None,
                  col_t: ad.Tensor | None, cfg: AttackConfig, iteration: int,
                  with_lidar: bool = True, with_image: bool = True) -> ComposedScene:
    """Differentiable placement of the mesh on every labeled car.

    Either path can be skipped when the stage does not need it; skipped
    paths leave the corresponding tensor as None.
    """
    rows = [ad.Tensor(scene.cloud[:, :3])] if with_lidar else None
    image_t = ad.Tensor(scene.image.astype(np.float64) / 255.0) if with_image else None
    h, w = scene.image.shape[:2]
    mesh_rows = []
    offset = len(scene.cloud)
    for k, lab in enumerate(scene.car_labels()):
        # tangency recomputed from current values; the placement transform
        # itself is held constant within the iteration
        placement = place_on_roof(lab.box, mesh, cfg.clearance)
        world_t = deform_tensor(mesh, placement,
                                disp_t if disp_t is not None
                                else ad.Tensor(mesh.displacements))
        if with_lidar:
            pts_t, rendered = render_points_tensor(
                world_t, mesh.faces, cfg.lidar,
                seed=_render_seed(cfg.seed, iteration, scene.id, k))
            rows.append(pts_t)
            mesh_rows.append(np.arange(offset, offset + len(rendered)))
            offset += len(rendered)
        if with_image:
            frags = rasterize(world_t.values, mesh.faces, scene.calib, (w, h))
            overlay_t, mask = shade_tensor(
                frags, world_t, mesh.faces,
                col_t if col_t is not None else ad.Tensor(mesh.colors),
                cfg.shading, scene.calib)
            m3 = mask[:, :, None].astype(np.float64)
            image_t = ad.add(ad.mul(image_t, ad.Tensor(1.0 - m3)),
                             ad.mul(overlay_t, ad.Tensor(m3)))
    cloud_t = ad.concat(rows, axis=0) if with_lidar else None
    cloud = cloud_t.values if with_lidar else scene.cloud[:, :3]
    return ComposedScene(scene=scene, cloud_t=cloud_t, cloud=cloud,
                         image_t=image_t, mesh_rows=mesh_rows)


# ---------------------------------------------------------------------------
# per-scene losses

def _frustum_prediction_box(pts: np.ndarray, scores: np.ndarray, az: float,
                            gfeat: np.ndarray, weights: SurrogateWeights):
    """Current predicted box for IoU weighting; None when nothing predicted."""
    mask = scores > SEG_THRESHOLD
    anchor = _anchor_from_points((pts @ _rot_z(-az).T)[mask])
    if anchor is None:
        return None
    res = box_head_forward(gfeat, (pts @ _rot_z(-az).T)[mask], anchor, weights)
    return decode_box(anchor, res.values, az)


def scene_loss_cascaded_shape(comp: ComposedScene, weights: SurrogateWeights,
                              cfg: AttackConfig):
    """Segmentation-max suppression summed over cars, gt-box frustums.

    The scored window is the same azimuth/range wedge the second
    segmentation pass gathers at inference, but centered on the gt box so
    the objective stays stationary across iterations.  Window indices are
    constants per iteration; scores stay differentiable.
    """
    loss = None
    n_active = 0
    lcfg = cfg.loss_config()
    for k, lab in enumerate(comp.scene.car_labels()):
        cx, cy = lab.box.center[0], lab.box.center[1]
        az = math.atan2(cy, cx)
        r_c = math.hypot(cx, cy)

        def wedge(cloud):
            r_p = np.hypot(cloud[:, 0], cloud[:, 1])
            az_p = np.arctan2(cloud[:, 1], cloud[:, 0])
            daz = (az_p - az + math.pi) % (2 * math.pi) - math.pi
            half = math.atan2(2.3, max(r_c, 1.0))
            return np.nonzero((np.abs(daz) <= half)
                              & (np.abs(r_p - r_c) <= 4.0))[0]

        idx = wedge(comp.cloud)
        if len(idx) == 0:
            continue
        pts_t = ad.gather_rows(comp.cloud_t, idx)
        scores_t, gfeat = frustum_seg_forward(pts_t, az, weights)
        pts = comp.cloud[idx]
        # mask only true car points: counting the mesh's own returns would
        # let the optimizer win by making the mesh invisible instead of
        # suppressing the car
        car_mask = points_in_box(pts, lab.box, tol=0.02)
        # IoU weight from the current forward pass, treated as a constant
        box = _frustum_prediction_box(pts, scores_t.values, az, gfeat.values,
                                      weights)
        term, suppressed = loss_fpn_pc(
            SegmentationOutput(scores=scores_t, mask=car_mask, box=box),
            lab.box, lcfg)
        if not suppressed:
            n_active += 1
        loss = term if loss is None else ad.add(loss, term)
    return (loss if loss is not None else ad.Tensor(0.0)), n_active


def scene_loss_cascaded_texture(comp: ComposedScene, weights: SurrogateWeights):
    """Objectness sum over above-threshold grid cells (pre-NMS)."""
    obj_t, _ = image_grid_forward(comp.image_t, weights)
    flat = ad.reshape(obj_t, (-1,))
    vals = flat.values
    hot = np.nonzero(vals > OBJ_THRESHOLD)[0]
    detections = [("Car", float(vals[i])) for i in hot]
    return loss_objectness_2d(detections, ad.gather_rows(flat, hot)
                              if len(hot) else None), len(hot)


def scene_loss_fusion(comp: ComposedScene, weights: SurrogateWeights,
                      cfg: AttackConfig):
    """Proposal suppression over the full attacked scene, summed over cars."""
    scores_t, feats = fusion_scores(comp.image_t, comp.cloud_t, weights,
                                    comp.scene.calib)
    keep, boxes, _ = fusion_proposal_boxes(comp.cloud, scores_t.values,
                                           feats.values, weights)
    props = ProposalSet(scores=ad.gather_rows(scores_t, keep), boxes=boxes)
    loss = None
    n_active = 0
    lcfg = cfg.loss_config()
    for lab in comp.scene.car_labels():
        term, suppressed = loss_epnet(props, lab.box, lcfg)
        if not suppressed:
            n_active += 1
        loss = term if loss is None else ad.add(loss, term)
    return (loss if loss is not None else ad.Tensor(0.0)), n_active


# ---------------------------------------------------------------------------
# attack drivers

def _batch_indices(n: int, batch: int, rng):
    """Endless batches, scenes reshuffled each epoch."""
    while True:
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            chunk = order[lo:lo + batch]
            if len(chunk):
                yield np.sort(chunk)


def _run_stage(scenes, weights, cfg: AttackConfig, mesh: AdvMesh, stage: str,
               train_keys, history: list, with_lidar: bool, with_image: bool,
               loss_fn):
    """Shared optimization loop; returns the updated mesh."""
    if cfg.iterations == 0 or not train_keys:
        return mesh
    params = {}
    if "displacements" in train_keys:
        params["displacements"] = mesh.displacements.copy()
    if "colors" in train_keys:
        params["colors"] = mesh.colors.copy()
    state = adam_init(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    batches = _batch_indices(len(scenes), cfg.batch_size, rng)
    for it in range(cfg.iterations):
        mesh = mesh.with_params(
            displacements=params.get("displacements", mesh.displacements),
            colors=params.get("colors", mesh.colors))
        tape = ad.Tape()
        disp_t = tape.watch("displacements", ad.Tensor(mesh.displacements)) \
            if "displacements" in params else None
        col_t = tape.watch("colors", ad.Tensor(mesh.colors)) \
            if "colors" in params else None
        base = None
        with ad.active_tape(tape):
            batch = next(batches)
            for si in batch:
                comp = compose_scene(scenes[si], mesh, disp_t, col_t, cfg, it,
                                     with_lidar=with_lidar,
                                     with_image=with_image)
                term, _ = loss_fn(comp)
                base = term if base is None else ad.add(base, term)
            base = ad.mul(base, ad.Tensor(1.0 / len(batch)))
            if disp_t is not None:
                loss = total_loss(base, mesh, cfg.loss_config(), disp_t)
            else:
                loss = base
        grads = ad.backward(tape, loss)
        grad_arrays = {k: grads[k].values if k in grads else np.zeros_like(v)
                       for k, v in params.items()}
        params, state = adam_project_step(params, grad_arrays, state, cfg,
                                          mesh.base_vertices)
        history.append({
            "iteration": it,
            "stage": stage,
            "loss": float(loss.values),
            "base": float(base.values),
            "lap": float(loss.values) - float(base.values),
        })
    return mesh.with_params(
        displacements=params.get("displacements", mesh.displacements),
        colors=params.get("colors", mesh.colors))


def attack_cascaded(scenes, weights: SurrogateWeights, cfg: AttackConfig):
    """Two-stage attack: shape against the point pipeline from ground-truth
    2D-box frustums, then texture against the image pipeline with the shape
    frozen."""
    if weights.kind != "cascaded" or cfg.victim_kind != "cascaded":
        raise ValueError("attack_cascaded requires a cascaded victim")
    if not scenes:
        raise ValueError("at least one scene is required")
    mesh = initial_mesh()
    history: list[dict] = []
    if cfg.mode in ("lidar_only", "lidar_image"):
        mesh = _run_stage(
            scenes, weights, cfg, mesh, "shape", ("displacements",), history,
            with_lidar=True, with_image=False,
            loss_fn=lambda comp: scene_loss_cascaded_shape(comp, weights, cfg))
    if cfg.mode in ("image_only", "lidar_image"):
        mesh = _run_stage(
            scenes, weights, cfg, mesh, "texture", ("colors",), history,
            with_lidar=False, with_image=True,
            loss_fn=lambda comp: scene_loss_cascaded_texture(comp, weights))
    return mesh, history


def attack_fusion(scenes, weights: SurrogateWeights, cfg: AttackConfig):
    """End-to-end attack on the fusion victim; shape and texture trained
    simultaneously, with either frozen per the mode."""
    if weights.kind != "fusion" or cfg.victim_kind != "fusion":
        raise ValueError("attack_fusion requires a fusion victim")
    if not scenes:
        raise ValueError("at least one scene is required")
    mesh = initial_mesh()
    keys = {"lidar_only": ("displacements",),
            "image_only": ("colors",),
            "lidar_image": ("displacements", "colors")}[cfg.mode]
    history: list[dict] = []
    mesh = _run_stage(
        scenes, weights, cfg, mesh, "combined", keys, history,
        with_lidar=True, with_image=True,
        loss_fn=lambda comp: scene_loss_fusion(comp, weights, cfg))
    return mesh, history


def run_attack(scenes, weights: SurrogateWeights, cfg: AttackConfig):
    if cfg.victim_kind == "cascaded":
        return attack_cascaded(scenes, weights, cfg)
    return attack_fusion(scenes, weights, cfg)


# ---------------------------------------------------------------------------
# attack success rate: initially detected cars that the mesh hides

def _detect(scene: Scene, weights: SurrogateWeights):
    if weights.kind == "cascaded":
        return detect_cascaded(scene, weights).detections
    return detect_fusion(scene, weights).detections


DETECTION_SCORE = 0.5  # minimum score for a detection to count as "detected"


def _detected_flags(scene: Scene, weights: SurrogateWeights,
                    iou_thr: float, det_thr: float) -> list[bool]:
    dets = [d for d in _detect(scene, weights) if d.score >= det_thr]
    flags = []
    for lab in scene.car_labels():
        flags.append(any(iou_bev(d.box, lab.box) > iou_thr for d in dets))
    return flags


def asr_counts(scenes, mesh: AdvMesh, weights: SurrogateWeights,
               seed: int = 0, iou_thr: float = 0.7,
               det_thr: float = DETECTION_SCORE,
               lidar: LidarConfig | None = None):
    """(initially detected, hidden after placement) over held-out scenes.

    A car counts as detected when some detection at or above the score
    threshold overlaps its box with BEV IoU above the threshold; hidden
    cars are detected in the clean scene but not after the mesh is placed
    on every car roof.
    """
    before = hidden = 0
    for scene in scenes:
        clean = _detected_flags(scene, weights, iou_thr, det_thr)
        attacked = _detected_flags(apply_mesh(scene, mesh, seed=seed,
                                              lidar=lidar),
                                   weights, iou_thr, det_thr)
        for was, now in zip(clean, attacked):
            if was:
                before += 1
                if not now:
                    hidden += 1
    return before, hidden
