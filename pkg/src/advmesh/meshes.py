"""The adversarial mesh: construction, deformation, placement, smoothness.

Vertex positions are ``base + displacement`` in the mesh's local frame
(origin at the base sphere's center); a rigid transform places the deformed
mesh on a host car's roof with the car's heading.  Deformation never touches
topology.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .geom import Box3D, apply_mat4, compose, mat4_rot_z, mat4_translate


class IsolatedVertex(ValueError):
    pass


@dataclass(frozen=True)
class AdvMesh:
    """Adversarial object: base shape, learnable displacements and colors."""

    base_vertices: np.ndarray  # (V, 3)
    displacements: np.ndarray  # (V, 3)
    colors: np.ndarray  # (V, 3) in [0, 1]
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        object.__setattr__(
            self, "base_vertices", np.asarray(self.base_vertices, dtype=np.float64)
        )
        object.__setattr__(
            self, "displacements", np.asarray(self.displacements, dtype=np.float64)
        )
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.intp))
        v = len(self.base_vertices)
        if self.faces.size and self.faces.max() >= v:
            raise ValueError("face index out of range")
        if np.any(self.colors < 0.0) or np.any(self.colors > 1.0):
            raise ValueError("colors must lie in [0, 1]")

    @property
    def n_vertices(self) -> int:
        return len(self.base_vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def local_vertices(self) -> np.ndarray:
        """Deformed vertices in the local frame: base + displacement."""
        return self.base_vertices + self.displacements

    def adjacency(self) -> list[np.ndarray]:
        """Per-vertex sorted neighbor index arrays from face edges."""
        nbrs: list[set] = [set() for _ in range(self.n_vertices)]
        for a, b, c in self.faces:
            nbrs[a].update((b, c))
            nbrs[b].update((a, c))
            nbrs[c].update((a, b))
        return [np.array(sorted(s), dtype=np.intp) for s in nbrs]

    def with_params(self, displacements=None, colors=None) -> "AdvMesh":
        return replace(
            self,
            displacements=self.displacements if displacements is None else displacements,
            colors=self.colors if colors is None else colors,
        )


@dataclass(frozen=True)
class Placement:
    """Rigid transform putting the mesh on a host car's roof."""

    transform: np.ndarray  # (4, 4)
    host_box: Box3D
    clearance: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "transform", np.asarray(self.transform, dtype=np.float64)
        )


# ---------------------------------------------------------------------------
# icosphere


def make_icosphere(radius: float, subdivisions: int, color=(0.5, 0.5, 0.5)) -> AdvMesh:
    """Icosahedron subdivided and projected onto a sphere of the given radius.

    subdivisions=2 yields the 162-vertex / 320-face mesh used as the attack's
    starting shape.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if subdivisions > 6:
        raise ValueError("subdivisions > 6 not supported")
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.intp,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.intp)

    verts = verts * radius
    v = len(verts)
    return AdvMesh(
        base_vertices=verts,
        displacements=np.zeros((v, 3)),
        colors=np.tile(np.asarray(color, dtype=np.float64), (v, 1)),
        faces=faces,
    )


# ---------------------------------------------------------------------------
# deformation and placement


def deform(mesh: AdvMesh, placement: Placement) -> np.ndarray:
    """World-frame vertices: T applied to (base + displacement) per vertex."""
    return apply_mat4(placement.transform, mesh.local_vertices())


def deform_tensor(mesh: AdvMesh, placement: Placement, displacements: ad.Tensor) -> ad.Tensor:
    """Differentiable deform: world vertices as a tape tensor.

    The placement's vertical offset rests the lowest local vertex on the
    host surface, so every world z depends on that vertex's displacement.
    The correction term below is zero at the current values (the transform
    already accounts for it) but carries the whole-mesh lift through to
    the gradient; without it a large share of the true derivative is lost
    and per-coordinate optimizers follow wrong signs.
    """
    local = ad.add(ad.Tensor(mesh.base_vertices), displacements)
    rot = placement.transform[:3, :3]
    t = placement.transform[:3, 3]
    world = ad.add(ad.matmul(local, ad.Tensor(rot.T)), ad.Tensor(t))
    if len(mesh.base_vertices) == 0:
        return world
    i = int(np.argmin(local.values[:, 2]))
    low = float(local.values[i, 2])
    z = ad.matmul(ad.gather_rows(local, np.array([i])),
                  ad.Tensor(np.array([[0.0], [0.0], [1.0]])))
    delta = ad.matmul(ad.sub(ad.Tensor(np.array([[low]])), z),
                      ad.Tensor(np.array([[0.0, 0.0, 1.0]])))
    return ad.add(world, delta)


def place_on_roof(host_box: Box3D, mesh: AdvMesh, clearance: float = 0.0) -> Placement:
    """Placement whose lowest deformed-local point rests on the roof plane.

    Rotation follows the host's yaw; the mesh is centered over the footprint
    center.  Tangency is recomputed from the current deformed geometry.
    """
    local = mesh.local_vertices()
    low = local[:, 2].min() if len(local) else 0.0
    roof_z = host_box.top
    tz = roof_z + clearance - low
    transform = compose(
        mat4_translate([host_box.center[0], host_box.center[1], tz]),
        mat4_rot_z(host_box.yaw),
    )
    return Placement(transform=transform, host_box=host_box, clearance=clearance)


def mesh_size_extent(mesh: AdvMesh) -> tuple[float, float, float]:
    """Axis-aligned extents of the deformed local vertices (len, wid, hgt)."""
    local = mesh.local_vertices()
    span = local.max(axis=0) - local.min(axis=0)
    return (float(span[0]), float(span[1]), float(span[2]))


# ---------------------------------------------------------------------------
# Laplacian smoothness


def _laplacian_matrix(mesh: AdvMesh) -> np.ndarray:
    """Dense matrix L with L @ verts = verts - neighbor centroids."""
    adj = mesh.adjacency()
    v = mesh.n_vertices
    L = np.eye(v)
    for i, nb in enumerate(adj):
        if len(nb) == 0:
            raise IsolatedVertex(f"vertex {i} has no neighbors")
        L[i, nb] -= 1.0 / len(nb)
    return L


def laplacian_loss(mesh: AdvMesh) -> float:
    """Sum of squared offsets of each vertex from its neighbors' centroid.

    Computed on deformed local vertices, before the placement transform.
    """
    L = _laplacian_matrix(mesh)
    delta = L @ mesh.local_vertices()
    return float((delta**2).sum())


def laplacian_loss_tensor(mesh: AdvMesh, displacements: ad.Tensor) -> ad.Tensor:
    """Differentiable Laplacian loss as a tape op."""
    L = _laplacian_matrix(mesh)
    local = ad.add(ad.Tensor(mesh.base_vertices), displacements)
    delta = ad.matmul(ad.Tensor(L), local)
    return ad.sum_(ad.mul(delta, delta))


def face_normals(world_vertices: np.ndarray, faces: np.ndarray, unit: bool = True) -> np.ndarray:
    v0 = world_vertices[faces[:, 0]]
    e1 = world_vertices[faces[:, 1]] - v0
    e2 = world_vertices[faces[:, 2]] - v0
    n = np.cross(e1, e2)
    if unit:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        norm[norm < 1e-30] = 1.0
        n = n / norm
    return n
