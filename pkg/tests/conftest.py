import numpy as np
import pytest

from twoview.geometry import CameraModel, Pose, Projector, perturb_pose
from twoview.mesh import make_tube_mesh
from twoview.metrics import default_camera, default_gt_pose
from twoview.renderer import RenderSettings, render_silhouette, silhouette_loss


@pytest.fixture(scope="session")
def tube_small():
    # ~100-triangle variant used for gradient checks
    return make_tube_mesh(rings=8, segments=7)


@pytest.fixture(scope="session")
def tube_default():
    return make_tube_mesh()


@pytest.fixture(scope="session")
def cam64():
    return default_camera(64)


@pytest.fixture(scope="session")
def cam256():
    return default_camera(256)


@pytest.fixture(scope="session")
def gt_pose():
    return default_gt_pose()


@pytest.fixture(scope="session")
def gradcheck_settings():
    # wide band so the truncation cut sits far below finite-difference noise
    return RenderSettings(sigma=1.5, gamma=1.0, band=24.0)


def random_view_pose(gt, rng, rot_scale=0.06, trans_scale=5.0):
    """Pose near the canonical view, mesh still comfortably in frame."""
    delta = np.concatenate([rng.normal(0.0, rot_scale, 3), rng.normal(0.0, trans_scale, 3)])
    return perturb_pose(gt, delta)


def fd_gradient(loss_fn, pose: Pose, h: float) -> np.ndarray:
    """Central finite differences of a scalar loss over the 6 pose parameters.

    Perturbs in the same left-multiplicative chart the analytic gradients use.
    """
    out = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        out[i] = (loss_fn(perturb_pose(pose, e)) - loss_fn(perturb_pose(pose, -e))) / (2.0 * h)
    return out


def forward_mse(mesh, camera: CameraModel, pose: Pose, target, settings) -> float:
    """Loss via the forward-only renderer path (finite-difference oracle)."""
    return silhouette_loss(mesh, Projector(camera, pose), target, settings)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def render_at(mesh, camera, pose, settings):
    return render_silhouette(mesh, Projector(camera, pose), settings)
