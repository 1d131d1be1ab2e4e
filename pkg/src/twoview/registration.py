"""Pose estimation by gradient descent on silhouette losses.

Five acquisition configurations are supported.  Single-view runs optimize one
projector pose on its own image.  AP_PLUS_LAT optimizes only the lateral pose
and renders the AP view through the 90-degree Rodrigues coupling, weighting
the two residuals by lambda1/lambda2.  The sequenced variants spend the first
half of the iteration budget on the first-named view alone and then switch to
the coupled objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    CameraModel,
    Pose,
    Projector,
    coupled_pose,
    lateral_pose_from_coupled,
    perpendicular_coupling,
    perturb_pose,
    Rotation,
)
from .mesh import TriangleMesh
from .renderer import RenderSettings, SilhouetteImage, render_with_pose_gradient

CONVERGENCE_STREAK = 10
# Below this gradient magnitude the iterate is numerically stationary; Adam's
# scale-invariant steps would otherwise amplify float-rounding noise into
# learning-rate-sized wander around an exact optimum.
GRADIENT_FLOOR = 1e-14


class DimensionMismatch(ValueError):
    """Target image dimensions do not match the camera."""


class NonFiniteLoss(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""


class Configuration(str, Enum):
    AP_THEN_LAT = "AP_THEN_LAT"
    AP_ONLY = "AP_ONLY"
    AP_PLUS_LAT = "AP_PLUS_LAT"
    LAT_THEN_AP = "LAT_THEN_AP"
    LAT_ONLY = "LAT_ONLY"


@dataclass(frozen=True)
class Lambda2Schedule:
    """Weight schedule for the second (AP) residual term.

    ``constant`` holds ``value`` everywhere; ``linear_ramp`` is 0 before
    ``start_iter``, rises linearly to ``value`` at ``end_iter``, and stays
    there.
    """

    kind: str = "constant"
    value: float = 1.0
    start_iter: int = 0
    end_iter: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "linear_ramp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("schedule value must be non-negative")
        if self.kind == "linear_ramp" and self.end_iter < self.start_iter:
            raise ValueError("linear_ramp needs end_iter >= start_iter")

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        return {
            "kind": "linear_ramp",
            "value": self.value,
            "start_iter": self.start_iter,
            "end_iter": self.end_iter,
        }

    @staticmethod
    def from_dict(d: dict) -> "Lambda2Schedule":
        return Lambda2Schedule(
            kind=d["kind"],
            value=float(d.get("value", 1.0)),
            start_iter=int(d.get("start_iter", 0)),
            end_iter=int(d.get("end_iter", 0)),
        )


def lambda2_at(schedule: Lambda2Schedule, iteration: int) -> float:
    """Schedule weight at a (0-based, phase-local) iteration index."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if schedule.kind == "constant":
        return schedule.value
    if iteration < schedule.start_iter:
        return 0.0
    if iteration >= schedule.end_iter:
        return schedule.value
    span = schedule.end_iter - schedule.start_iter
    return schedule.value * (iteration - schedule.start_iter) / span


@dataclass(frozen=True)
class RegistrationConfig:
    configuration: Configuration = Configuration.AP_PLUS_LAT
    max_iters: int = 500
    learning_rate_rot: float = 1e-2
    learning_rate_trans: float = 1.0
    lambda1: float = 1.0
    lambda2_schedule: Lambda2Schedule = field(
        default_factory=lambda: Lambda2Schedule("linear_ramp", 1.0, 0, 250)
    )
    convergence_tol: float = 1e-9
    coupling_axis_column: int = 1
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.learning_rate_rot <= 0 or self.learning_rate_trans <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")
        if self.coupling_axis_column not in (0, 1, 2):
            raise ValueError("coupling_axis_column must be 0, 1 or 2")

    def to_dict(self) -> dict:
        return {
            "configuration": self.configuration.value,
            "max_iters": self.max_iters,
            "learning_rate_rot": self.learning_rate_rot,
            "learning_rate_trans": self.learning_rate_trans,
            "lambda1": self.lambda1,
            "lambda2_schedule": self.lambda2_schedule.to_dict(),
            "convergence_tol": self.convergence_tol,
            "coupling_axis_column": self.coupling_axis_column,
            "render": {
                "sigma": self.render.sigma,
                "gamma": self.render.gamma,
                "band": self.render.band,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "RegistrationConfig":
        base = RegistrationConfig()
        render = d.get("render", {})
        return RegistrationConfig(
            configuration=Configuration(d.get("configuration", base.configuration.value)),
            max_iters=int(d.get("max_iters", base.max_iters)),
            learning_rate_rot=float(d.get("learning_rate_rot", base.learning_rate_rot)),
            learning_rate_trans=float(d.get("learning_rate_trans", base.learning_rate_trans)),
            lambda1=float(d.get("lambda1", base.lambda1)),
            lambda2_schedule=(
                Lambda2Schedule.from_dict(d["lambda2_schedule"])
                if "lambda2_schedule" in d
                else base.lambda2_schedule
            ),
            convergence_tol=float(d.get("convergence_tol", base.convergence_tol)),
            coupling_axis_column=int(d.get("coupling_axis_column", base.coupling_axis_column)),
            render=RenderSettings(
                sigma=float(render.get("sigma", 1.5)),
                gamma=float(render.get("gamma", 1.0)),
                band=float(render.get("band", 8.0)),
            ),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @staticmethod
    def from_json(text: str) -> "RegistrationConfig":
        return RegistrationConfig.from_dict(json.loads(text))


@dataclass
class RegistrationReport:
    final_pose_lat: Pose
    final_pose_ap: Pose
    loss_trace: np.ndarray
    iterations_run: int
    converged: bool
    diverged: bool
    initial_loss: float
    configuration: Configuration

    def to_dict(self) -> dict:
        return {
            "configuration": self.configuration.value,
            "final_pose_lat": _pose_to_dict(self.final_pose_lat),
            "final_pose_ap": _pose_to_dict(self.final_pose_ap),
            "loss_trace": [float(x) for x in self.loss_trace],
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "diverged": self.diverged,
            "initial_loss": self.initial_loss,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def loss_trace_csv(self) -> str:
        lines = ["iteration,loss"]
        lines += [f"{i},{float(x):.17g}" for i, x in enumerate(self.loss_trace)]
        return "\n".join(lines) + "\n"


def _pose_to_dict(pose: Pose) -> dict:
    return {
        "rotvec": [float(x) for x in pose.rotvec],
        "translation": [float(x) for x in pose.translation],
    }


def pose_from_dict(d: dict) -> Pose:
    return Pose(np.asarray(d["rotvec"], dtype=float), np.asarray(d["translation"], dtype=float))


def _check_dims(camera: CameraModel, *images: SilhouetteImage) -> None:
    for img in images:
        if not img.matches(camera):
            raise DimensionMismatch(
                f"image is {img.width}x{img.height}, camera expects {camera.width}x{camera.height}"
            )


def two_view_loss(
    pose_ap: Pose,
    pose_lat: Pose,
    mesh: TriangleMesh,
    camera: CameraModel,
    image_ap: SilhouetteImage,
    image_lat: SilhouetteImage,
    settings: RenderSettings,
):
    """Sum of the two independent per-view MSE residuals.

    Returns (loss, grad_ap, grad_lat); each gradient depends only on its own
    pose.
    """
    _check_dims(camera, image_ap, image_lat)
    loss_ap, grad_ap = render_with_pose_gradient(mesh, Projector(camera, pose_ap), image_ap, settings)
    loss_lat, grad_lat = render_with_pose_gradient(mesh, Projector(camera, pose_lat), image_lat, settings)
    return loss_ap + loss_lat, grad_ap, grad_lat


def coupled_loss(
    pose_lat: Pose,
    mesh: TriangleMesh,
    camera: CameraModel,
    image_lat: SilhouetteImage,
    image_ap: SilhouetteImage,
    lambda1: float,
    lambda2: float,
    axis_column: int = 1,
    settings: RenderSettings = RenderSettings(),
    frozen_coupling: Rotation | None = None,
):
    """Single-pose objective: lateral residual plus coupled AP residual.

    The AP view is rendered at (W R_lat, t_lat) with W the quarter turn about
    the selected column of R_lat.  W is recomputed from the current rotation
    on every call but treated as a constant by the gradient; the AP term's
    rotation gradient is transported back through W' and its translation
    gradient adds directly (the translation is shared).  ``frozen_coupling``
    overrides W, which finite-difference checks use to probe the same frozen
    linearization.
    """
    _check_dims(camera, image_lat, image_ap)
    r_lat = pose_lat.rotation()
    w = frozen_coupling if frozen_coupling is not None else perpendicular_coupling(r_lat, axis_column)

    loss = 0.0
    grad = np.zeros(6)
    if lambda1 != 0.0:
        loss_lat, grad_lat = render_with_pose_gradient(
            mesh, Projector(camera, pose_lat), image_lat, settings
        )
        loss += lambda1 * loss_lat
        grad += lambda1 * grad_lat
    if lambda2 != 0.0:
        ap_pose = Pose.from_rotation(w.compose(r_lat), pose_lat.translation)
        loss_ap, grad_ap = render_with_pose_gradient(
            mesh, Projector(camera, ap_pose), image_ap, settings
        )
        loss += lambda2 * loss_ap
        # a left perturbation delta of R_lat appears as W delta on the AP side
        grad[:3] += lambda2 * (w.matrix.T @ grad_ap[:3])
        grad[3:] += lambda2 * grad_ap[3:]
    return loss, grad


class _AdamState:
    """Per-parameter adaptive moments over the 6 local pose coordinates."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(6)
        self.v = np.zeros(6)
        self.t = 0

    def step(self, grad: np.ndarray, lr: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _build_phases(cfg: RegistrationConfig) -> list[tuple[str, int]]:
    n = cfg.max_iters
    first = n // 2
    second = n - first
    c = cfg.configuration
    if c == Configuration.LAT_ONLY:
        return [("lat", n)]
    if c == Configuration.AP_ONLY:
        return [("ap", n)]
    if c == Configuration.AP_PLUS_LAT:
        return [("coupled", n)]
    if c == Configuration.AP_THEN_LAT:
        return [("ap", first), ("coupled", second)]
    if c == Configuration.LAT_THEN_AP:
        return [("lat", first), ("coupled", second)]
    raise ValueError(f"unhandled configuration {c}")


def run_registration(
    cfg: RegistrationConfig,
    mesh: TriangleMesh,
    camera: CameraModel,
    image_ap: SilhouetteImage,
    image_lat: SilhouetteImage,
    init_pose: Pose,
    iteration_callback=None,
) -> RegistrationReport:
    """Gradient-descent pose refinement under the configured acquisition mode.

    ``init_pose`` always refers to the lateral projector; single-AP phases
    derive their working pose through the coupling.  The optimizer is Adam
    with separate rotation/translation base rates, halved whenever the loss
    increases while the term weights are unchanged.  A phase stops early when
    |delta loss| stays below ``convergence_tol`` for 10 consecutive
    iterations; in a non-final phase this advances to the next phase.  A
    non-finite loss or gradient aborts with ``diverged=True`` and the trace up
    to the failure.

    ``iteration_callback(iteration, pose_lat, loss)``, when given, observes
    each iterate (used for frame dumps).
    """
    _check_dims(camera, image_ap, image_lat)
    axis_col = cfg.coupling_axis_column
    phases = _build_phases(cfg)

    pose_lat = init_pose
    trace: list[float] = []
    initial_loss = None
    converged = False

    def evaluate(mode: str, pose: Pose, k: int):
        if mode == "lat":
            loss, grad = render_with_pose_gradient(
                mesh, Projector(camera, pose), image_lat, cfg.render
            )
            return loss, grad, (1.0, 0.0)
        if mode == "ap":
            loss, grad = render_with_pose_gradient(
                mesh, Projector(camera, pose), image_ap, cfg.render
            )
            return loss, grad, (1.0, 0.0)
        lam1 = cfg.lambda1
        lam2 = lambda2_at(cfg.lambda2_schedule, k)
        loss, grad = coupled_loss(
            pose, mesh, camera, image_lat, image_ap, lam1, lam2, axis_col, cfg.render
        )
        return loss, grad, (lam1, lam2)

    def finish(diverged: bool) -> RegistrationReport:
        return RegistrationReport(
            final_pose_lat=pose_lat,
            final_pose_ap=coupled_pose(pose_lat, axis_col),
            loss_trace=np.asarray(trace),
            iterations_run=len(trace),
            converged=converged and not diverged,
            diverged=diverged,
            initial_loss=float(initial_loss) if initial_loss is not None else float("nan"),
            configuration=cfg.configuration,
        )

    for phase_idx, (mode, n_iters) in enumerate(phases):
        if n_iters <= 0:
            continue
        pose = coupled_pose(pose_lat, axis_col) if mode == "ap" else pose_lat

        adam = _AdamState()
        lr = np.array([cfg.learning_rate_rot] * 3 + [cfg.learning_rate_trans] * 3)
        streak = 0
        converged = False

        # baseline at the phase entry pose; not recorded in the trace
        prev_loss, _, prev_lams = evaluate(mode, pose, 0)
        if initial_loss is None:
            initial_loss = prev_loss
        if not np.isfinite(prev_loss):
            pose_lat = lateral_pose_from_coupled(pose, axis_col) if mode == "ap" else pose
            return finish(diverged=True)

        for k in range(n_iters):
            loss, grad, lams = evaluate(mode, pose, k)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                pose_lat = lateral_pose_from_coupled(pose, axis_col) if mode == "ap" else pose
                return finish(diverged=True)
            trace.append(loss)
            if iteration_callback is not None:
                lat_view = lateral_pose_from_coupled(pose, axis_col) if mode == "ap" else pose
                iteration_callback(len(trace) - 1, lat_view, loss)

            if abs(loss - prev_loss) < cfg.convergence_tol:
                streak += 1
            else:
                streak = 0
            if streak >= CONVERGENCE_STREAK:
                converged = True
                break
            if loss > prev_loss and lams == prev_lams:
                lr = lr * 0.5

            if np.abs(grad).max() >= GRADIENT_FLOOR:
                step = adam.step(grad, lr)
                if not np.all(np.isfinite(step)):
                    pose_lat = lateral_pose_from_coupled(pose, axis_col) if mode == "ap" else pose
                    return finish(diverged=True)
                pose = perturb_pose(pose, -step)
            prev_loss, prev_lams = loss, lams

        pose_lat = lateral_pose_from_coupled(pose, axis_col) if mode == "ap" else pose

    return finish(diverged=False)
