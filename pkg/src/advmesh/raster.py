"""Differentiable image rendering.

Hard rasterization with a z-buffer and perspective-correct barycentrics,
Phong shading under a directional light, and compositing over a scene image.
Gradients with respect to vertex colors are exact; gradients with respect to
vertex positions split into an exact shading-normal path (interior pixels)
and a soft screen-space coverage path (silhouette pixels).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import Calibration, project_to_image_safe
from .meshes import face_normals


class SizeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ShadingConfig:
    """Directional Phong model.  ``light_direction`` is the direction light
    travels (default: down-forward at 45 degrees in the world x-z plane)."""

    light_direction: tuple[float, float, float] = (
        0.7071067811865476,
        0.0,
        -0.7071067811865476,
    )
    ambient: float = 0.3
    diffuse: float = 0.6
    specular: float = 0.1
    shininess: float = 10.0

    def __post_init__(self):
        d = np.asarray(self.light_direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("light_direction must be unit length")
        for k in (self.ambient, self.diffuse, self.specular):
            if not 0.0 <= k <= 1.0:
                raise ValueError("phong coefficients must lie in [0, 1]")
        if self.shininess < 1.0:
            raise ValueError("shininess must be >= 1")


@dataclass(frozen=True)
class Fragment:
    pixel: tuple[int, int]  # (u, v)
    face_index: int
    weights: tuple[float, float, float]
    depth: float


@dataclass
class FragmentBuffer:
    """Per-covered-pixel rasterization output (nearest-depth fragments)."""

    pixels: np.ndarray  # (M, 2) int, columns (u, v)
    face_index: np.ndarray  # (M,)
    weights: np.ndarray  # (M, 3) perspective-correct barycentrics
    depth: np.ndarray  # (M,)
    image_size: tuple[int, int]  # (width, height)

    def __len__(self):
        return len(self.depth)

    def __getitem__(self, i: int) -> Fragment:
        return Fragment(
            pixel=(int(self.pixels[i, 0]), int(self.pixels[i, 1])),
            face_index=int(self.face_index[i]),
            weights=tuple(self.weights[i]),
            depth=float(self.depth[i]),
        )

    def mask(self) -> np.ndarray:
        w, h = self.image_size
        m = np.zeros((h, w), dtype=bool)
        m[self.pixels[:, 1], self.pixels[:, 0]] = True
        return m


def rasterize(
    world_vertices: np.ndarray,
    faces: np.ndarray,
    calib: Calibration,
    image_size: tuple[int, int],
) -> FragmentBuffer:
    """Project and scan-convert triangles; keep the nearest fragment per pixel.

    Depth ties resolve to the lower face index.  Faces with any vertex at or
    behind the camera are skipped (the attack object sits well in front).
    """
    width, height = image_size
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    world_vertices = np.asarray(world_vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.intp)

    depth_buf = np.full((height, width), np.inf)
    face_buf = np.full((height, width), -1, dtype=np.int64)
    w_buf = np.zeros((height, width, 3))

    if len(world_vertices):
        uv, z, valid = project_to_image_safe(world_vertices, calib)
    for f in range(len(faces)):
        idx = faces[f]
        if not np.all(valid[idx]):
            continue
        p = uv[idx]  # (3, 2) screen coords
        zf = z[idx]
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (
            p[2, 0] - p[0, 0]
        )
        if abs(area) < 1e-12:
            continue
        lo = np.maximum(np.floor(p.min(axis=0)), 0).astype(int)
        hi = np.minimum(np.ceil(p.max(axis=0)), [width - 1, height - 1]).astype(int)
        if lo[0] > hi[0] or lo[1] > hi[1]:
            continue
        us = np.arange(lo[0], hi[0] + 1)
        vs = np.arange(lo[1], hi[1] + 1)
        gu, gv = np.meshgrid(us, vs, indexing="xy")
        # edge functions -> screen barycentrics
        l0 = (p[1, 0] - gu) * (p[2, 1] - gv) - (p[1, 1] - gv) * (p[2, 0] - gu)
        l1 = (p[2, 0] - gu) * (p[0, 1] - gv) - (p[2, 1] - gv) * (p[0, 0] - gu)
        l2 = (p[0, 0] - gu) * (p[1, 1] - gv) - (p[0, 1] - gv) * (p[1, 0] - gu)
        l0, l1, l2 = l0 / area, l1 / area, l2 / area
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        invz = l0 / zf[0] + l1 / zf[1] + l2 / zf[2]
        # outside pixels can hit invz == 0; they are masked out below
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = 1.0 / invz
            w0 = (l0 / zf[0]) * depth
            w1 = (l1 / zf[1]) * depth
            w2 = (l2 / zf[2]) * depth
        better = inside & (depth < depth_buf[lo[1] : hi[1] + 1, lo[0] : hi[0] + 1])
        sub = (slice(lo[1], hi[1] + 1), slice(lo[0], hi[0] + 1))
        depth_buf[sub][better] = depth[better]
        face_buf[sub][better] = f
        w_buf[sub][better] = np.stack([w0[better], w1[better], w2[better]], axis=-1)

    vy, ux = np.nonzero(face_buf >= 0)
    return FragmentBuffer(
        pixels=np.column_stack([ux, vy]),
        face_index=face_buf[vy, ux],
        weights=w_buf[vy, ux],
        depth=depth_buf[vy, ux],
        image_size=image_size,
    )


# ---------------------------------------------------------------------------
# shading


def _camera_position(calib: Calibration) -> np.ndarray:
    """Camera center expressed in the world (lidar) frame."""
    return calib.rect_to_lidar(np.zeros((1, 3)))[0]


def shade_scalars(
    normals: np.ndarray, view_dirs: np.ndarray, cfg: ShadingConfig
) -> np.ndarray:
    """Phong scalar per fragment from unit normals and unit view directions."""
    l = -np.asarray(cfg.light_direction)  # surface-to-light
    ndotl = normals @ l
    diff = np.maximum(ndotl, 0.0)
    refl = 2.0 * ndotl[:, None] * normals - l
    rdotv = np.einsum("ij,ij->i", refl, view_dirs)
    spec = np.maximum(rdotv, 0.0) ** cfg.shininess
    return cfg.ambient + cfg.diffuse * diff + cfg.specular * spec


def _fragment_geometry(
    frags: FragmentBuffer,
    world_vertices: np.ndarray,
    faces: np.ndarray,
    calib: Calibration,
):
    tri = faces[frags.face_index]
    pos = np.einsum("mk,mkj->mj", frags.weights, world_vertices[tri])
    cam = _camera_position(calib)
    view = cam - pos
    vn = np.linalg.norm(view, axis=1, keepdims=True)
    vn[vn < 1e-12] = 1.0
    return tri, pos, view / vn


def shade(
    frags: FragmentBuffer,
    world_vertices: np.ndarray,
    faces: np.ndarray,
    colors: np.ndarray,
    cfg: ShadingConfig,
    calib: Calibration,
) -> tuple[np.ndarray, np.ndarray]:
    """Shaded RGB overlay (H, W, 3) plus coverage mask (H, W)."""
    width, height = frags.image_size
    overlay = np.zeros((height, width, 3))
    mask = frags.mask()
    if len(frags) == 0:
        return overlay, mask
    normals = face_normals(world_vertices, faces)[frags.face_index]
    tri, _, view = _fragment_geometry(frags, world_vertices, faces, calib)
    s = shade_scalars(normals, view, cfg)
    interp = np.einsum("mk,mkc->mc", frags.weights, colors[tri])
    vals = np.clip(s[:, None] * interp, 0.0, 1.0)
    overlay[frags.pixels[:, 1], frags.pixels[:, 0]] = vals
    return overlay, mask


def color_vjp(
    frags: FragmentBuffer,
    shading: np.ndarray,
    faces: np.ndarray,
    n_vertices: int,
    upstream: np.ndarray,
    clip_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Exact gradient of the overlay w.r.t. per-vertex colors.

    ``upstream`` is the (H, W, 3) image gradient; pixel color is linear in
    vertex colors given fixed coverage and shading.
    """
    grad = np.zeros((n_vertices, 3))
    if len(frags) == 0:
        return grad
    g = upstream[frags.pixels[:, 1], frags.pixels[:, 0]]  # (M, 3)
    if clip_mask is not None:
        g = g * clip_mask
    tri = faces[frags.face_index]
    contrib = shading[:, None] * g  # (M, 3)
    for k in range(3):
        np.add.at(grad, tri[:, k], frags.weights[:, k : k + 1] * contrib)
    return grad


def _cross_matrix_vjp(gn: np.ndarray, e1: np.ndarray, e2: np.ndarray):
    """VJP through n = e1 x e2: returns (grad_e1, grad_e2)."""
    return np.cross(e2, gn), np.cross(gn, e1)


def shade_tensor(
    frags: FragmentBuffer,
    world_vertices: ad.Tensor,
    faces: np.ndarray,
    colors: ad.Tensor,
    cfg: ShadingConfig,
    calib: Calibration,
) -> tuple[ad.Tensor, np.ndarray]:
    """Differentiable shading: exact color gradients, analytic normal-path
    position gradients (coverage and barycentric weights held fixed)."""
    verts = world_vertices.values
    cols = colors.values
    width, height = frags.image_size
    faces = np.asarray(faces, dtype=np.intp)
    overlay, mask = shade(frags, verts, faces, cols, cfg, calib)
    if len(frags) == 0:
        return ad.custom_op(overlay, (world_vertices, colors), (None, None)), mask

    n_raw = face_normals(verts, faces, unit=False)[frags.face_index]
    n_len = np.linalg.norm(n_raw, axis=1, keepdims=True)
    n_len[n_len < 1e-30] = 1.0
    normals = n_raw / n_len
    tri, _, view = _fragment_geometry(frags, verts, faces, calib)
    s = shade_scalars(normals, view, cfg)
    interp = np.einsum("mk,mkc->mc", frags.weights, cols[tri])
    pre_clip = s[:, None] * interp
    clip_mask = (pre_clip >= 0.0) & (pre_clip <= 1.0)

    l = -np.asarray(cfg.light_direction)

    def _masked_color_vjp(g):
        gm = g[frags.pixels[:, 1], frags.pixels[:, 0]] * clip_mask
        grad = np.zeros_like(cols)
        contrib = s[:, None] * gm
        for k in range(3):
            np.add.at(grad, tri[:, k], frags.weights[:, k : k + 1] * contrib)
        return grad

    def vjp_verts(g):
        gm = g[frags.pixels[:, 1], frags.pixels[:, 0]] * clip_mask  # (M, 3)
        ds = np.einsum("mc,mc->m", gm, interp)  # dL/ds per fragment
        # ds/dn_hat
        ndotl = normals @ l
        dn = np.zeros_like(normals)
        lit = ndotl > 0.0
        dn[lit] += cfg.diffuse * l
        rdotv = np.einsum("mj,mj->m", 2.0 * ndotl[:, None] * normals - l, view)
        spec_on = rdotv > 0.0
        if cfg.specular > 0.0:
            coef = (
                cfg.specular
                * cfg.shininess
                * np.where(spec_on, np.maximum(rdotv, 0.0) ** (cfg.shininess - 1.0), 0.0)
            )
            # d(rdotv)/dn_hat = 2[(n.v) l + (n.l) v]
            ndotv = np.einsum("mj,mj->m", normals, view)
            dn += coef[:, None] * 2.0 * (ndotv[:, None] * l + ndotl[:, None] * view)
        gn_hat = ds[:, None] * dn
        # chain through normalization: dn_hat/dn = (I - n_hat n_hat^T)/|n|
        gn = (gn_hat - np.einsum("mj,mj->m", gn_hat, normals)[:, None] * normals) / n_len
        e1 = verts[tri[:, 1]] - verts[tri[:, 0]]
        e2 = verts[tri[:, 2]] - verts[tri[:, 0]]
        ge1, ge2 = _cross_matrix_vjp(gn, e1, e2)
        grad = np.zeros_like(verts)
        np.add.at(grad, tri[:, 1], ge1)
        np.add.at(grad, tri[:, 2], ge2)
        np.add.at(grad, tri[:, 0], -(ge1 + ge2))
        return grad

    out = ad.custom_op(overlay, (world_vertices, colors), (vjp_verts, _masked_color_vjp))
    return out, mask


# ---------------------------------------------------------------------------
# compositing


def composite(scene_image: np.ndarray, overlay: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Overlay replaces scene pixels where the mask is set."""
    scene_image = np.asarray(scene_image, dtype=np.float64)
    overlay = np.asarray(overlay, dtype=np.float64)
    if scene_image.shape != overlay.shape or scene_image.shape[:2] != mask.shape:
        raise SizeMismatch(
            f"scene {scene_image.shape}, overlay {overlay.shape}, mask {mask.shape}"
        )
    out = scene_image.copy()
    out[mask] = overlay[mask]
    return out


def composite_tensor(
    scene_image: np.ndarray, overlay: ad.Tensor, mask: np.ndarray
) -> ad.Tensor:
    scene_image = np.asarray(scene_image, dtype=np.float64)
    if scene_image.shape != overlay.values.shape or scene_image.shape[:2] != mask.shape:
        raise SizeMismatch("composite size mismatch")
    vals = scene_image.copy()
    vals[mask] = overlay.values[mask]

    def vjp(g):
        grad = np.zeros_like(scene_image)
        grad[mask] = g[mask]
        return grad

    return ad.custom_op(vals, (overlay,), (vjp,))


# ---------------------------------------------------------------------------
# soft coverage gradients for vertex positions


def _screen_jacobians(world_vertices: np.ndarray, calib: Calibration):
    """Per-vertex 2x3 Jacobian of screen coords w.r.t. world position."""
    rect = calib.lidar_to_rect(world_vertices)
    hom = np.column_stack([rect, np.ones(len(rect))])
    P = calib.cam_projection
    a = hom @ P[0]
    b = hom @ P[1]
    w = hom @ P[2]
    # d(a/w)/dX_rect etc., then chain to the world frame
    R = calib.rectification @ calib.lidar_to_cam[:3, :3]
    J = np.empty((len(rect), 2, 3))
    J[:, 0, :] = (P[0, :3][None, :] * w[:, None] - a[:, None] * P[2, :3][None, :]) / (
        w[:, None] ** 2
    )
    J[:, 1, :] = (P[1, :3][None, :] * w[:, None] - b[:, None] * P[2, :3][None, :]) / (
        w[:, None] ** 2
    )
    return J @ R, w


def _point_segment_distance_grad(p, a, b):
    """Distance from pixels p (N,2) to segment ab plus gradients w.r.t. a, b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        d = np.linalg.norm(p - a, axis=1)
        ga = (a - p) / np.maximum(d[:, None], 1e-12)
        return d, ga * 0.5, ga * 0.5
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    diff = p - proj
    d = np.linalg.norm(diff, axis=1)
    safe = np.maximum(d[:, None], 1e-12)
    gproj = -diff / safe  # d(d)/d(proj)
    # treat t as locally constant (exact off the clamp boundary)
    ga = gproj * (1.0 - t[:, None])
    gb = gproj * t[:, None]
    return d, ga, gb


def soft_coverage(screen_verts: np.ndarray, pixels: np.ndarray, sigma: float):
    """Soft inside-ness of pixels for one screen triangle.

    Returns (coverage (N,), signed distance (N,), edge index (N,), per-edge
    endpoint gradients) with coverage = sigmoid(d_signed / sigma).
    """
    p0, p1, p2 = screen_verts
    area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
    orient = 1.0 if area >= 0 else -1.0
    edges = [(0, 1), (1, 2), (2, 0)]
    dists = np.empty((3, len(pixels)))
    grads = []
    for k, (i, j) in enumerate(edges):
        d, ga, gb = _point_segment_distance_grad(pixels, screen_verts[i], screen_verts[j])
        dists[k] = d
        grads.append((ga, gb))
    nearest = np.argmin(dists, axis=0)
    mind = dists[nearest, np.arange(len(pixels))]

    def signed_side(pix):
        l0 = (p1[0] - pix[:, 0]) * (p2[1] - pix[:, 1]) - (p1[1] - pix[:, 1]) * (
            p2[0] - pix[:, 0]
        )
        l1 = (p2[0] - pix[:, 0]) * (p0[1] - pix[:, 1]) - (p2[1] - pix[:, 1]) * (
            p0[0] - pix[:, 0]
        )
        l2 = (p0[0] - pix[:, 0]) * (p1[1] - pix[:, 1]) - (p0[1] - pix[:, 1]) * (
            p1[0] - pix[:, 0]
        )
        inside = (orient * l0 >= 0) & (orient * l1 >= 0) & (orient * l2 >= 0)
        return np.where(inside, 1.0, -1.0)

    sign = signed_side(pixels)
    d_signed = sign * mind
    cov = 1.0 / (1.0 + np.exp(-d_signed / sigma))
    return cov, d_signed, sign, nearest, grads


def position_vjp_soft(
    world_vertices: np.ndarray,
    faces: np.ndarray,
    calib: Calibration,
    image_size: tuple[int, int],
    upstream: np.ndarray,
    face_colors: np.ndarray,
    background: np.ndarray,
    sigma: float = 1.0,
    band: int = 3,
) -> np.ndarray:
    """Silhouette gradient of the composited image w.r.t. vertex positions.

    Screen-space soft coverage: each face's boundary pixels trade the face's
    shaded color against the background with weight sigmoid(d/sigma).  Only
    descent-direction validity is promised, not value agreement with the hard
    rasterizer.
    """
    width, height = image_size
    faces = np.asarray(faces, dtype=np.intp)
    frags = rasterize(world_vertices, faces, calib, image_size)
    face_buf = np.full((height, width), -1, dtype=np.int64)
    if len(frags):
        face_buf[frags.pixels[:, 1], frags.pixels[:, 0]] = frags.face_index
    uv, z, valid = project_to_image_safe(world_vertices, calib)
    J, _ = _screen_jacobians(world_vertices, calib)
    grad = np.zeros_like(world_vertices)
    pad = int(np.ceil(band * sigma)) + 1
    for f in range(len(faces)):
        idx = faces[f]
        if not np.all(valid[idx]):
            continue
        p = uv[idx]
        lo = np.maximum(np.floor(p.min(axis=0)) - pad, 0).astype(int)
        hi = np.minimum(np.ceil(p.max(axis=0)) + pad, [width - 1, height - 1]).astype(int)
        if lo[0] > hi[0] or lo[1] > hi[1]:
            continue
        gu, gv = np.meshgrid(
            np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="xy"
        )
        pix = np.column_stack([gu.ravel(), gv.ravel()]).astype(np.float64)
        cov, d_signed, sign, nearest, edge_grads = soft_coverage(p, pix, sigma)
        own = face_buf[pix[:, 1].astype(int), pix[:, 0].astype(int)]
        # contribute where the pixel is free or owned by this face
        active = (np.abs(d_signed) <= band * sigma) & ((own == -1) | (own == f))
        if not active.any():
            continue
        gpix = upstream[pix[active, 1].astype(int), pix[active, 0].astype(int)]
        delta = face_colors[f][None, :] - background[
            pix[active, 1].astype(int), pix[active, 0].astype(int)
        ]
        gcov = np.einsum("nc,nc->n", gpix, delta)  # dL/dcoverage
        dcov_dd = cov[active] * (1.0 - cov[active]) / sigma
        gd = gcov * dcov_dd * sign[active]  # dL/d(mindist) with sign
        # scatter into the nearest edge's endpoints
        edges = [(0, 1), (1, 2), (2, 0)]
        for k, (i, j) in enumerate(edges):
            sel = nearest[active] == k
            if not sel.any():
                continue
            ga, gb = edge_grads[k]
            ga = ga[active][sel] * gd[sel, None]
            gb = gb[active][sel] * gd[sel, None]
            grad[idx[i]] += J[idx[i]].T @ ga.sum(axis=0)
            grad[idx[j]] += J[idx[j]].T @ gb.sum(axis=0)
    return grad
