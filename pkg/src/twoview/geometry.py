"""Rotations, rigid poses, pinhole projectors, and the perpendicular coupling.

Conventions used throughout the package:

* A rotation is a 3x3 matrix acting on column vectors, ``x_cam = R @ x_world``.
* A pose is (rotvec, translation): the rotation is ``exp_so3(rotvec)`` and a
  world point maps to camera coordinates as ``R @ x + t``.  Units are radians
  and millimeters.
* Pose derivatives use the left-perturbation chart: the rotation is perturbed
  as ``exp_so3(delta) @ R`` with ``delta`` a small 3-vector, the translation
  additively.  All Jacobians, loss gradients, and optimizer retractions in
  this package share that chart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9
UNIT_AXIS_TOL = 1e-6
DEPTH_EPS = 1e-6  # mm; depths at or below this count as behind the camera


class NonUnitAxis(ValueError):
    """Axis handed to the Rodrigues formula is not unit length."""


class BehindCamera(ValueError):
    """Point projects at or behind the camera plane."""


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


@dataclass(frozen=True)
class Rotation:
    """Element of SO(3), validated on construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=float))
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err >= ORTHONORMALITY_TOL:
            raise ValueError(f"matrix is not orthonormal (|R'R - I| = {err:.3e})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError(f"matrix has det {det:.12f}, not a proper rotation")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def transpose(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.matrix.T


def exp_so3(rotvec: np.ndarray) -> Rotation:
    """Exponential map: axis-angle 3-vector to rotation matrix.

    Rodrigues form ``I + sin(t)/t W + (1-cos(t))/t^2 W^2`` with ``W`` the skew
    matrix of the input; below ``t = 1e-8`` the coefficients switch to their
    second-order Taylor expansions to avoid 0/0.
    """
    v = np.asarray(rotvec, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError("rotvec must be a finite 3-vector")
    theta = float(np.linalg.norm(v))
    w = _skew(v)
    if theta < 1e-8:
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    return Rotation(np.eye(3) + a * w + b * (w @ w))


def log_so3(rotation: Rotation) -> np.ndarray:
    """Inverse of exp_so3 with angle in [0, pi].

    The angle is arccos((trace - 1)/2), evaluated as atan2(|vee(R - R')|/2,
    (trace - 1)/2) because arccos alone loses half the significant digits near
    pi.  Near zero the antisymmetric part is rescaled by the theta/sin(theta)
    series; near pi the axis comes from the symmetric part via its largest
    diagonal entry, with the sign fixed by the (tiny but signed) antisymmetric
    part.
    """
    r = rotation.matrix
    c = (np.trace(r) - 1.0) * 0.5
    s = _vee(r)  # sin(theta) * axis
    sn = float(np.linalg.norm(s))
    theta = math.atan2(sn, c)
    if theta < 1e-7:
        return s * (1.0 + theta * theta / 6.0)
    if theta > math.pi - 1e-4:
        # aa' = ((R + R')/2 - cos(t) I) / (1 - cos(t)); well conditioned here.
        cos_t = math.cos(theta)
        outer = ((r + r.T) * 0.5 - cos_t * np.eye(3)) / (1.0 - cos_t)
        k = int(np.argmax(np.diag(outer)))
        axis = outer[k] / math.sqrt(max(outer[k, k], 1e-15))
        axis /= np.linalg.norm(axis)
        agree = float(np.dot(s, axis))
        if agree < -1e-12:
            axis = -axis
        elif abs(agree) <= 1e-12:
            # theta == pi: +axis and -axis are equivalent, pick deterministically
            for comp in axis:
                if abs(comp) > 1e-8:
                    if comp < 0.0:
                        axis = -axis
                    break
        return theta * axis
    return s * (theta / sn)


def rodrigues_general(axis: np.ndarray, theta: float) -> Rotation:
    """Rotation by ``theta`` radians about a unit ``axis``.

    Raises NonUnitAxis when the axis norm deviates from 1 by more than 1e-6;
    callers holding an unnormalized direction must normalize first.
    """
    a = np.asarray(axis, dtype=float)
    if a.shape != (3,):
        raise ValueError("axis must be a 3-vector")
    norm = float(np.linalg.norm(a))
    if abs(norm - 1.0) > UNIT_AXIS_TOL:
        raise NonUnitAxis(f"axis norm {norm:.8f} deviates from 1 beyond {UNIT_AXIS_TOL}")
    w = _skew(a)
    return Rotation(np.eye(3) + math.sin(theta) * w + (1.0 - math.cos(theta)) * (w @ w))


def perpendicular_coupling(rotation_lat: Rotation, axis_column: int = 1) -> Rotation:
    """90-degree coupling rotation mapping the lateral projector to the AP one.

    Extracts the requested column of the lateral rotation as the axis a
    (renormalized against floating-point drift) and returns
    ``I + [a]x + [a]x^2``, i.e. a quarter turn about a.
    """
    if axis_column not in (0, 1, 2):
        raise ValueError("axis_column must be 0, 1 or 2")
    a = rotation_lat.matrix[:, axis_column].copy()
    a /= np.linalg.norm(a)
    w = _skew(a)
    return Rotation(np.eye(3) + w + w @ w)


@dataclass(frozen=True)
class Pose:
    """Rigid pose: axis-angle rotation vector (radians) + translation (mm).

    The rotation vector is canonicalized to norm <= pi on construction by
    wrapping the angle to [0, 2pi) and replacing angles above pi with the
    2pi-complement about the flipped axis.
    """

    rotvec: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.rotvec, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=float))
        if v.shape != (3,) or t.shape != (3,):
            raise ValueError("rotvec and translation must be 3-vectors")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        theta = float(np.linalg.norm(v))
        if theta > math.pi:
            wrapped = math.fmod(theta, 2.0 * math.pi)
            if wrapped > math.pi:
                v = v * ((wrapped - 2.0 * math.pi) / theta)
            else:
                v = v * (wrapped / theta)
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotvec", v)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_rotation(rotation: Rotation, translation: np.ndarray) -> "Pose":
        return Pose(log_so3(rotation), translation)

    def rotation(self) -> Rotation:
        return exp_so3(self.rotvec)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation().matrix.T + self.translation


def compose_poses(second: Pose, first: Pose) -> Pose:
    """Pose applying ``first`` then ``second``: x -> R2 (R1 x + t1) + t2."""
    r2 = second.rotation()
    r1 = first.rotation()
    return Pose.from_rotation(r2.compose(r1), r2.matrix @ first.translation + second.translation)


def coupled_pose(pose_lat: Pose, axis_column: int = 1) -> Pose:
    """AP projector pose implied by a lateral pose: (W R_lat, t_lat)."""
    r_lat = pose_lat.rotation()
    w = perpendicular_coupling(r_lat, axis_column)
    return Pose.from_rotation(w.compose(r_lat), pose_lat.translation)


def lateral_pose_from_coupled(pose_ap: Pose, axis_column: int = 1) -> Pose:
    """Exact inverse of coupled_pose.

    The coupling axis is invariant under the quarter turn, so it can be read
    directly off the AP rotation's selected column; undoing the turn recovers
    the lateral rotation.  The translation is shared.
    """
    r_ap = pose_ap.rotation()
    w = perpendicular_coupling(r_ap, axis_column)
    return Pose.from_rotation(w.transpose().compose(r_ap), pose_ap.translation)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Projector:
    """X-ray beam projector: intrinsics plus rigid pose, P = K [R | t]."""

    camera: CameraModel
    pose: Pose

    def matrix(self) -> np.ndarray:
        r = self.pose.rotation().matrix
        t = self.pose.translation
        return self.camera.intrinsic_matrix() @ np.hstack([r, t[:, None]])


def project_points(camera: CameraModel, pose: Pose, pts: np.ndarray):
    """Project world points to pixels; vectorized.

    Returns ``(uv, depth)`` with ``uv`` of shape (N, 2) and ``depth`` (N,).
    Points with depth <= DEPTH_EPS get non-finite uv; callers filter on depth.
    """
    pts = np.asarray(pts, dtype=float)
    x = pts @ pose.rotation().matrix.T + pose.translation
    depth = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * x[:, 0] / depth + camera.cx
        v = camera.fy * x[:, 1] / depth + camera.cy
        uv = np.stack([u, v], axis=1)
    uv[depth <= DEPTH_EPS] = np.nan
    return uv, depth


def project_point(projector: Projector, point: np.ndarray):
    """Project a single world point; returns ((u, v), depth).

    Raises BehindCamera when the camera-frame depth is at or below DEPTH_EPS.
    """
    uv, depth = project_points(projector.camera, projector.pose, np.asarray(point, dtype=float)[None, :])
    d = float(depth[0])
    if d <= DEPTH_EPS:
        raise BehindCamera(f"point has depth {d:.6g} mm")
    return uv[0], d


def project_points_jacobian(camera: CameraModel, pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Per-point 2x6 Jacobians of pixel coordinates w.r.t. the pose.

    Columns are (rotation left-perturbation xyz, translation xyz).  With
    ``y = R x`` and ``X = y + t``, the rotation block follows from
    ``d(exp(delta) y)/d(delta) = -[y]x`` and the translation block is the
    plain pinhole derivative.  Entries for points behind the camera are zero.
    """
    pts = np.asarray(pts, dtype=float)
    n = pts.shape[0]
    r = pose.rotation().matrix
    y = pts @ r.T
    x = y + pose.translation
    depth = x[:, 2]
    ok = depth > DEPTH_EPS
    iz = np.zeros(n)
    iz[ok] = 1.0 / depth[ok]

    # d(u,v)/dX, shape (n, 2, 3)
    duv_dx = np.zeros((n, 2, 3))
    duv_dx[:, 0, 0] = camera.fx * iz
    duv_dx[:, 0, 2] = -camera.fx * x[:, 0] * iz * iz
    duv_dx[:, 1, 1] = camera.fy * iz
    duv_dx[:, 1, 2] = -camera.fy * x[:, 1] * iz * iz

    # dX/d(delta_rot) = -[y]x, shape (n, 3, 3)
    dx_dw = np.zeros((n, 3, 3))
    dx_dw[:, 0, 1] = y[:, 2]
    dx_dw[:, 0, 2] = -y[:, 1]
    dx_dw[:, 1, 0] = -y[:, 2]
    dx_dw[:, 1, 2] = y[:, 0]
    dx_dw[:, 2, 0] = y[:, 1]
    dx_dw[:, 2, 1] = -y[:, 0]

    jac = np.zeros((n, 2, 6))
    jac[:, :, :3] = np.einsum("nij,njk->nik", duv_dx, dx_dw)
    jac[:, :, 3:] = duv_dx
    jac[~ok] = 0.0
    return jac


def project_point_jacobian(projector: Projector, point: np.ndarray) -> np.ndarray:
    """2x6 Jacobian of one projected point w.r.t. the 6 pose parameters."""
    pt = np.asarray(point, dtype=float)[None, :]
    _, depth = project_points(projector.camera, projector.pose, pt)
    if float(depth[0]) <= DEPTH_EPS:
        raise BehindCamera(f"point has depth {float(depth[0]):.6g} mm")
    return project_points_jacobian(projector.camera, projector.pose, pt)[0]


def perturb_pose(pose: Pose, delta: np.ndarray) -> Pose:
    """Apply a 6-vector step in the left-perturbation chart.

    ``delta[:3]`` left-multiplies the rotation through the exponential map,
    ``delta[3:]`` adds to the translation.  This is the retraction used by the
    optimizer and by all finite-difference oracles.
    """
    delta = np.asarray(delta, dtype=float)
    r = exp_so3(delta[:3]).compose(pose.rotation())
    return Pose.from_rotation(r, pose.translation + delta[3:])
