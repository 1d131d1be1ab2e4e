"""Triangle meshes: OBJ ingestion, rigid transforms, and the ADD metric."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, exp_so3, rodrigues_general

log = logging.getLogger(__name__)

DEGENERATE_AREA_MM2 = 1e-12


class ParseError(ValueError):
    """Malformed mesh file; message carries the offending line number."""


class EmptyMesh(ValueError):
    """File parsed but yielded no usable geometry."""


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable vertex/triangle soup in millimeters.

    Vertex order is significant: the ADD metric pairs vertices by index.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
            raise ValueError("vertices must be an (n>=3, 3) array")
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
            raise ValueError("triangles must be an (m>=1, 3) array")
        if t.min() < 0 or t.max() >= v.shape[0]:
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices must be finite")
        areas = _triangle_areas(v, t)
        if np.any(areas <= DEGENERATE_AREA_MM2):
            raise ValueError(
                f"{int(np.sum(areas <= DEGENERATE_AREA_MM2))} degenerate triangle(s); "
                "drop them before construction"
            )
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def load_mesh(path, scale: float = 1.0) -> TriangleMesh:
    """Read an ASCII OBJ file (v/f records, 1-based indices).

    Polygon faces are fan-triangulated around their first vertex.  Normals,
    texture coordinates and grouping records are ignored.  ``scale`` converts
    non-millimeter files.  Degenerate triangles are dropped with a logged
    warning count; a mesh with no valid triangle raises EmptyMesh.
    """
    path = Path(path)
    vertices: list[list[float]] = []
    faces: list[tuple[list[int], int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in tokens[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif tokens[0] == "f":
                if len(tokens) < 4:
                    raise ParseError(f"{path}:{lineno}: face needs at least 3 indices")
                idx = []
                for tok in tokens[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: bad face index {tok!r}") from exc
                    if i <= 0:
                        raise ParseError(f"{path}:{lineno}: face indices must be positive, got {i}")
                    idx.append(i - 1)
                faces.append((idx, lineno))
            # other record types (vn, vt, g, o, s, usemtl, mtllib) are ignored

    if not vertices or not faces:
        raise EmptyMesh(f"{path}: no vertices or no faces")

    n_verts = len(vertices)
    tris: list[tuple[int, int, int]] = []
    for idx, lineno in faces:
        for i in idx:
            if i >= n_verts:
                raise ParseError(f"{path}:{lineno}: face index {i + 1} exceeds vertex count {n_verts}")
        for k in range(1, len(idx) - 1):
            tris.append((idx[0], idx[k], idx[k + 1]))

    v = np.asarray(vertices, dtype=float) * float(scale)
    t = np.asarray(tris, dtype=np.int64)
    areas = _triangle_areas(v, t)
    good = areas > DEGENERATE_AREA_MM2
    dropped = int(np.sum(~good))
    if dropped:
        log.warning("%s: dropped %d degenerate triangle(s)", path, dropped)
    t = t[good]
    if t.shape[0] == 0 or v.shape[0] < 3:
        raise EmptyMesh(f"{path}: no non-degenerate triangles")
    return TriangleMesh(v, t)


def transform_mesh(mesh: TriangleMesh, pose: Pose) -> TriangleMesh:
    """Map every vertex through v -> R v + t; topology unchanged."""
    return TriangleMesh(pose.apply(mesh.vertices), mesh.triangles)


def add_error(mesh: TriangleMesh, pose_est: Pose, pose_gt: Pose) -> float:
    """Average distance of model points between two placements of the mesh.

    Mean Euclidean distance between index-corresponding vertices under the
    estimated and ground-truth poses; no nearest-neighbor matching.
    """
    est = pose_est.apply(mesh.vertices)
    gt = pose_gt.apply(mesh.vertices)
    return float(np.linalg.norm(est - gt, axis=1).mean())


def make_tube_mesh(
    rings: int = 10,
    segments: int = 8,
    half_extent: float = 23.0,
    radius_start: float = 4.5,
    radius_end: float = 3.0,
) -> TriangleMesh:
    """Synthetic vessel-like tube: a curved, tapered capped cylinder.

    The centerline bows out of plane so no rigid self-symmetry survives and
    every pose degree of freedom is observable in silhouette.  Fits inside a
    cube of side ``2 * half_extent`` mm centered at the origin.
    """
    if rings < 2 or segments < 3:
        raise ValueError("need at least 2 rings and 3 segments")
    s = np.linspace(0.0, 1.0, rings)
    center = np.stack(
        [
            (2.0 * s - 1.0) * 0.85,
            0.55 * np.sin(math.pi * s) - 0.22,
            0.35 * np.sin(2.0 * math.pi * s + 0.9),
        ],
        axis=1,
    ) * half_extent
    radius = radius_start + (radius_end - radius_start) * s

    # unit tangents by central differences
    tangents = np.gradient(center, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)

    # parallel-transported frames along the centerline
    normal = np.cross(tangents[0], np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(normal) < 1e-6:
        normal = np.cross(tangents[0], np.array([0.0, 1.0, 0.0]))
    normal /= np.linalg.norm(normal)
    normals = [normal]
    for i in range(1, rings):
        prev_t, cur_t = tangents[i - 1], tangents[i]
        axis = np.cross(prev_t, cur_t)
        sin_a = np.linalg.norm(axis)
        cos_a = float(np.dot(prev_t, cur_t))
        if sin_a < 1e-12:
            normals.append(normals[-1])
            continue
        rot = rodrigues_general(axis / sin_a, math.atan2(sin_a, cos_a))
        n = rot.matrix @ normals[-1]
        n -= np.dot(n, cur_t) * cur_t
        normals.append(n / np.linalg.norm(n))

    phi = 2.0 * math.pi * np.arange(segments) / segments
    verts = []
    for i in range(rings):
        b = np.cross(tangents[i], normals[i])
        ring = (
            center[i]
            + radius[i] * np.outer(np.cos(phi), normals[i])
            + radius[i] * np.outer(np.sin(phi), b)
        )
        verts.append(ring)
    vertices = np.concatenate(verts, axis=0)

    tris = []
    for i in range(rings - 1):
        for k in range(segments):
            a = i * segments + k
            b = i * segments + (k + 1) % segments
            c = (i + 1) * segments + k
            d = (i + 1) * segments + (k + 1) % segments
            tris.append((a, c, d))
            tris.append((a, d, b))

    # end caps: fan around a center vertex
    start_center = len(vertices)
    vertices = np.vstack([vertices, center[0], center[-1]])
    end_center = start_center + 1
    for k in range(segments):
        tris.append((start_center, (k + 1) % segments, k))
        base = (rings - 1) * segments
        tris.append((end_center, base + k, base + (k + 1) % segments))

    return TriangleMesh(vertices, np.asarray(tris, dtype=np.int64))
