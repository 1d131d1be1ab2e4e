"""Soft silhouette rasterizer, differentiable with respect to the pose.

Forward model, per pixel p:

    S(p) = 1 - prod_T (1 - sigmoid(-d(p, T) / sigma)) ** (1 / gamma)

where d(p, T) is the signed 2D Euclidean distance from the pixel center to
the projected triangle T (negative inside) and the product runs over the
triangles whose distance is at most ``band`` pixels.  At the default
``gamma = 1`` this is the probabilistic union of per-triangle logistic
occupancies.  Triangles with any vertex behind the camera, or degenerate
after projection, are skipped.

The backward pass is fully analytic.  For the mean-squared image loss it
chains, per pixel-triangle pair,

    dL/dS -> dS/dd -> dd/d(projected vertices) -> d(vertex pixels)/d(pose)

where the distance gradient uses the envelope theorem on the closest-edge
parameterization and the last factor is the shared pinhole pose Jacobian in
the left-perturbation chart (see geometry.project_points_jacobian).  The
per-pair loops are compiled by numba (_raster_kernels); the numpy
_pair_distance here is the reference the kernels are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raster_kernels
from .geometry import (
    DEPTH_EPS,
    CameraModel,
    Pose,
    Projector,
    project_points,
    project_points_jacobian,
)
from .mesh import TriangleMesh

# Floor on the per-pixel log-survival sum: keeps S strictly below 1 in
# float64 (1 - exp(-36) is still distinguishable from 1.0).
_LOG_FLOOR = -36.0
_AREA_EPS_PX2 = 1e-9


@dataclass(frozen=True)
class RenderSettings:
    """Rasterizer knobs: edge softness, aggregation temperature, cutoff band."""

    sigma: float = 1.5
    gamma: float = 1.0
    band: float = 8.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.band < 3.0 * self.sigma:
            raise ValueError("band must be at least 3 * sigma")


@dataclass(frozen=True)
class SilhouetteImage:
    """Dense occupancy grid; values[i, j] is the pixel at x=j, y=i."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if v.ndim != 2 or v.size == 0:
            raise ValueError("values must be a non-empty 2D array")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("silhouette values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def matches(self, camera: CameraModel) -> bool:
        return self.width == camera.width and self.height == camera.height


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _edge_terms(px, py, x1, y1, x2, y2):
    """Distance terms from pixels to one finite edge, componentwise."""
    ex = x2 - x1
    ey = y2 - y1
    wx = px - x1
    wy = py - y1
    den = ex * ex + ey * ey
    t = (wx * ex + wy * ey) / np.maximum(den, 1e-30)
    np.clip(t, 0.0, 1.0, out=t)
    dx = wx - t * ex
    dy = wy - t * ey
    d2 = dx * dx + dy * dy
    cross = ex * wy - ey * wx
    return t, dx, dy, d2, cross


def _pair_distance(px, py, ax, ay, bx, by, cx, cy):
    """Reference signed distance for pixel/triangle pairs (vectorized).

    Returns ``(d, sel, tstar, nhx, nhy, sign)``: the closest feature lies on
    edge ``sel`` (0: a-b, 1: b-c, 2: c-a) at clamped parameter ``tstar``;
    ``(nhx, nhy)`` is the unit vector from the closest point to the pixel and
    ``sign`` is -1 inside / +1 outside.
    """
    t0, dx0, dy0, d20, c0 = _edge_terms(px, py, ax, ay, bx, by)
    t1, dx1, dy1, d21, c1 = _edge_terms(px, py, bx, by, cx, cy)
    t2, dx2, dy2, d22, c2 = _edge_terms(px, py, cx, cy, ax, ay)

    sel = np.zeros(px.shape[0], dtype=np.int8)
    d2 = d20
    m = d21 < d2
    sel = np.where(m, np.int8(1), sel)
    d2 = np.where(m, d21, d2)
    m = d22 < d2
    sel = np.where(m, np.int8(2), sel)
    d2 = np.where(m, d22, d2)

    is1 = sel == 1
    is2 = sel == 2
    tstar = np.where(is1, t1, np.where(is2, t2, t0))
    dx = np.where(is1, dx1, np.where(is2, dx2, dx0))
    dy = np.where(is1, dy1, np.where(is2, dy2, dy0))

    dist = np.sqrt(d2)
    inside = ((c0 > 0.0) & (c1 > 0.0) & (c2 > 0.0)) | ((c0 < 0.0) & (c1 < 0.0) & (c2 < 0.0))
    sign = np.where(inside, -1.0, 1.0)

    inv = np.zeros_like(dist)
    nz = dist > 1e-12
    inv[nz] = 1.0 / dist[nz]
    return sign * dist, sel, tstar, dx * inv, dy * inv, sign


def signed_distance_point_triangle_2d(p, a, b, c) -> float:
    """Signed Euclidean distance from a 2D point to a triangle boundary.

    Negative inside, positive outside, zero on the boundary.  The triangle is
    assumed non-degenerate (callers skip degenerate projections).
    """
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    d, *_ = _pair_distance(
        np.array([p[0]]), np.array([p[1]]),
        np.array([a[0]]), np.array([a[1]]),
        np.array([b[0]]), np.array([b[1]]),
        np.array([c[0]]), np.array([c[1]]),
    )
    return float(d[0])


def _visible_triangles(uv: np.ndarray, depth: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Triangles fully in front of the camera and non-degenerate in 2D."""
    tris = mesh.triangles
    front = np.all(depth[tris] > DEPTH_EPS, axis=1)
    tris = tris[front]
    if tris.shape[0] == 0:
        return tris
    a = uv[tris[:, 0]]
    b = uv[tris[:, 1]]
    c = uv[tris[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    return tris[np.abs(area2) > _AREA_EPS_PX2]


def _forward(mesh: TriangleMesh, projector: Projector, settings: RenderSettings):
    """Project, accumulate log-survival, and form the occupancy image."""
    cam = projector.camera
    uv, depth = project_points(cam, projector.pose, mesh.vertices)
    tris = _visible_triangles(uv, depth, mesh)
    log_surv = np.zeros(cam.width * cam.height)
    if tris.shape[0]:
        _raster_kernels.forward_accumulate(
            np.nan_to_num(uv), tris, settings.band, settings.sigma,
            cam.width, cam.height, log_surv,
        )
    scaled = log_surv if settings.gamma == 1.0 else log_surv / settings.gamma
    values = 1.0 - np.exp(np.maximum(scaled, _LOG_FLOOR))
    return values.reshape(cam.height, cam.width), log_surv, uv, tris, scaled


def render_silhouette(mesh: TriangleMesh, projector: Projector, settings: RenderSettings) -> SilhouetteImage:
    """Render the soft silhouette of the mesh under the projector.

    A mesh entirely behind the camera yields an all-zero image.
    """
    values, *_ = _forward(mesh, projector, settings)
    return SilhouetteImage(values)


def _check_target(camera: CameraModel, target: SilhouetteImage) -> None:
    if not target.matches(camera):
        raise ValueError(
            f"target is {target.width}x{target.height}, camera expects "
            f"{camera.width}x{camera.height}"
        )


def silhouette_loss(mesh: TriangleMesh, projector: Projector, target: SilhouetteImage,
                    settings: RenderSettings) -> float:
    """Forward-only mean-squared silhouette loss (no gradient)."""
    _check_target(projector.camera, target)
    values, *_ = _forward(mesh, projector, settings)
    diff = values - target.values
    return float(np.mean(diff * diff))


def render_with_pose_gradient(
    mesh: TriangleMesh,
    projector: Projector,
    target: SilhouetteImage,
    settings: RenderSettings,
):
    """Mean-squared silhouette loss and its analytic 6-vector pose gradient.

    loss = mean_p (target(p) - S(p))^2; the gradient lives in the
    left-perturbation pose chart (rotation xyz, translation xyz).
    """
    cam = projector.camera
    _check_target(cam, target)
    values, log_surv, uv, tris, scaled = _forward(mesh, projector, settings)
    residual = values - target.values
    loss = float(np.mean(residual * residual))
    if tris.shape[0] == 0:
        return loss, np.zeros(6)

    # per-pixel factor dL/dS * dS/d(log survival) / sigma; the kernel folds in
    # the remaining per-pair terms q and the distance gradient
    n_px = cam.width * cam.height
    dl_ds = (2.0 / n_px) * residual.ravel()
    survival = np.where(scaled > _LOG_FLOOR, np.exp(scaled), 0.0)
    pix_factor = dl_ds * survival * (-1.0 / (settings.gamma * settings.sigma))

    grad_uv = np.zeros((mesh.n_vertices, 2))
    _raster_kernels.backward_accumulate(
        np.nan_to_num(uv), tris, settings.band, settings.sigma,
        cam.width, cam.height, pix_factor, grad_uv,
    )
    jac = project_points_jacobian(cam, projector.pose, mesh.vertices)
    grad = grad_uv[:, 0] @ jac[:, 0, :] + grad_uv[:, 1] @ jac[:, 1, :]
    return loss, grad


def silhouette_mse(rendered: SilhouetteImage, target: SilhouetteImage) -> float:
    """Per-pixel mean squared difference between two silhouettes."""
    if rendered.values.shape != target.values.shape:
        raise ValueError("silhouette dimensions differ")
    diff = rendered.values - target.values
    return float(np.mean(diff * diff))
