import json

import numpy as np
import pytest

from conftest import fd_gradient, forward_mse, random_view_pose, relative_error

from twoview.geometry import (
    Pose,
    Projector,
    coupled_pose,
    perpendicular_coupling,
    perturb_pose,
)
from twoview.metrics import PerturbationRanges, make_synthetic_case, pose_error
from twoview.registration import (
    Configuration,
    DimensionMismatch,
    Lambda2Schedule,
    RegistrationConfig,
    RegistrationReport,
    coupled_loss,
    lambda2_at,
    pose_from_dict,
    run_registration,
    two_view_loss,
)
from twoview.renderer import RenderSettings, render_silhouette, render_with_pose_gradient


@pytest.fixture(scope="module")
def case64(tube_small, cam64, gt_pose):
    settings = RenderSettings()
    image_lat = render_silhouette(tube_small, Projector(cam64, gt_pose), settings)
    image_ap = render_silhouette(tube_small, Projector(cam64, coupled_pose(gt_pose)), settings)
    return image_ap, image_lat, settings


def fast_config(**overrides):
    base = dict(
        max_iters=160,
        lambda2_schedule=Lambda2Schedule("linear_ramp", 1.0, 0, 80),
    )
    base.update(overrides)
    return RegistrationConfig(**base)


class TestLambda2Schedule:
    def test_constant(self):
        assert lambda2_at(Lambda2Schedule("constant", 1.0), 57) == 1.0

    def test_ramp_midpoint(self):
        assert lambda2_at(Lambda2Schedule("linear_ramp", 1.0, 0, 100), 50) == 0.5

    def test_ramp_before_start(self):
        assert lambda2_at(Lambda2Schedule("linear_ramp", 1.0, 100, 200), 0) == 0.0

    def test_ramp_after_end(self):
        assert lambda2_at(Lambda2Schedule("linear_ramp", 0.7, 10, 20), 500) == 0.7

    def test_validation(self):
        with pytest.raises(ValueError):
            Lambda2Schedule("exponential")
        with pytest.raises(ValueError):
            Lambda2Schedule("linear_ramp", 1.0, 50, 10)
        with pytest.raises(ValueError):
            lambda2_at(Lambda2Schedule("constant", 1.0), -1)


class TestCoupledLoss:
    def test_lambda2_zero_reduces_to_lateral_view(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, settings = case64
        pose = perturb_pose(gt_pose, np.array([0.02, -0.01, 0.03, 1.0, -2.0, 3.0]))
        loss_c, grad_c = coupled_loss(
            pose, tube_small, cam64, image_lat, image_ap, 1.0, 0.0, 1, settings
        )
        loss_s, grad_s = render_with_pose_gradient(
            tube_small, Projector(cam64, pose), image_lat, settings
        )
        assert abs(loss_c - loss_s) < 1e-12
        np.testing.assert_allclose(grad_c, grad_s, atol=1e-15)

    def test_zero_at_ground_truth(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, settings = case64
        loss, _ = coupled_loss(
            gt_pose, tube_small, cam64, image_lat, image_ap, 1.0, 1.0, 1, settings
        )
        assert loss < 1e-10

    def test_gradient_matches_finite_differences_frozen_coupling(
        self, tube_small, cam64, gt_pose, gradcheck_settings
    ):
        image_lat = render_silhouette(
            tube_small, Projector(cam64, gt_pose), gradcheck_settings
        )
        image_ap = render_silhouette(
            tube_small, Projector(cam64, coupled_pose(gt_pose)), gradcheck_settings
        )
        rng = np.random.default_rng(21)
        for _ in range(3):
            pose = random_view_pose(gt_pose, rng)
            frozen = perpendicular_coupling(pose.rotation(), 1)
            _, grad = coupled_loss(
                pose, tube_small, cam64, image_lat, image_ap, 1.0, 1.0, 1,
                gradcheck_settings, frozen_coupling=frozen,
            )

            def loss_at(p):
                return coupled_loss(
                    p, tube_small, cam64, image_lat, image_ap, 1.0, 1.0, 1,
                    gradcheck_settings, frozen_coupling=frozen,
                )[0]

            fd = fd_gradient(loss_at, pose, 1e-4)
            assert relative_error(grad, fd).max() < 1e-3

    def test_dimension_mismatch(self, tube_small, cam64, case64):
        image_ap, image_lat, settings = case64
        from twoview.renderer import SilhouetteImage

        small = SilhouetteImage(np.zeros((32, 32)))
        with pytest.raises(DimensionMismatch):
            coupled_loss(Pose.identity(), tube_small, cam64, small, image_ap, 1, 1, 1, settings)


class TestTwoViewLoss:
    def test_zero_at_ground_truth(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, settings = case64
        loss, _, _ = two_view_loss(
            coupled_pose(gt_pose), gt_pose, tube_small, cam64, image_ap, image_lat, settings
        )
        assert loss < 1e-10

    def test_gradients_are_separable(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, settings = case64
        pose_ap = coupled_pose(gt_pose)
        lat_a = perturb_pose(gt_pose, np.array([0.01, 0.0, 0.0, 2.0, 0.0, 0.0]))
        lat_b = perturb_pose(gt_pose, np.array([-0.03, 0.02, 0.0, 0.0, -4.0, 1.0]))
        _, grad_ap_1, _ = two_view_loss(
            pose_ap, lat_a, tube_small, cam64, image_ap, image_lat, settings
        )
        _, grad_ap_2, _ = two_view_loss(
            pose_ap, lat_b, tube_small, cam64, image_ap, image_lat, settings
        )
        np.testing.assert_array_equal(grad_ap_1, grad_ap_2)

    def test_matches_coupled_terms_at_coupled_pose(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, settings = case64
        pose_lat = perturb_pose(gt_pose, np.array([0.02, 0.01, -0.02, 1.0, 2.0, -1.0]))
        pose_ap = coupled_pose(pose_lat, 1)
        loss_two, _, _ = two_view_loss(
            pose_ap, pose_lat, tube_small, cam64, image_ap, image_lat, settings
        )
        loss_coupled, _ = coupled_loss(
            pose_lat, tube_small, cam64, image_lat, image_ap, 1.0, 1.0, 1, settings
        )
        assert abs(loss_two - loss_coupled) < 1e-12


class TestRunRegistration:
    def test_stationary_at_ground_truth(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        two_phase = {Configuration.AP_THEN_LAT, Configuration.LAT_THEN_AP}
        for config in Configuration:
            cfg = fast_config(configuration=config)
            rep = run_registration(cfg, tube_small, cam64, image_ap, image_lat, gt_pose)
            assert rep.converged
            assert rep.iterations_run <= (20 if config in two_phase else 10)
            assert rep.loss_trace[-1] < 1e-10
            assert np.abs(rep.final_pose_lat.rotvec - gt_pose.rotvec).max() < 1e-6
            assert np.abs(rep.final_pose_lat.translation - gt_pose.translation).max() < 1e-6

    def test_recovers_small_perturbation(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        init = perturb_pose(gt_pose, np.array([0.05, -0.04, 0.06, 4.0, -3.0, 5.0]))
        cfg = fast_config()
        rep = run_registration(cfg, tube_small, cam64, image_ap, image_lat, init)
        err = pose_error(tube_small, rep.final_pose_lat, gt_pose)
        assert err.rotation_deg < 0.5
        assert err.translation_mm < 1.0
        assert rep.loss_trace[-1] < rep.initial_loss

    def test_trace_and_counts_consistent(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        init = perturb_pose(gt_pose, np.array([0.03, 0.0, 0.0, 2.0, 0.0, 0.0]))
        rep = run_registration(fast_config(), tube_small, cam64, image_ap, image_lat, init)
        assert len(rep.loss_trace) == rep.iterations_run
        assert np.all(np.isfinite(rep.loss_trace))
        assert rep.iterations_run <= 160

    def test_deterministic(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        init = perturb_pose(gt_pose, np.array([0.02, -0.01, 0.0, 1.0, 2.0, -3.0]))
        cfg = fast_config(max_iters=40)
        r1 = run_registration(cfg, tube_small, cam64, image_ap, image_lat, init)
        r2 = run_registration(cfg, tube_small, cam64, image_ap, image_lat, init)
        assert np.array_equal(r1.loss_trace, r2.loss_trace)
        assert np.array_equal(r1.final_pose_lat.rotvec, r2.final_pose_lat.rotvec)
        assert np.array_equal(r1.final_pose_lat.translation, r2.final_pose_lat.translation)

    def test_perpendicularity_preserved(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        init = perturb_pose(gt_pose, np.array([0.04, 0.02, -0.05, 3.0, 1.0, -2.0]))
        collected = []
        cfg = fast_config(max_iters=30)
        run_registration(
            cfg, tube_small, cam64, image_ap, image_lat, init,
            iteration_callback=lambda k, pose, loss: collected.append(pose),
        )
        for pose in collected[::7]:
            r_lat = pose.rotation()
            w = perpendicular_coupling(r_lat, cfg.coupling_axis_column)
            from twoview.geometry import log_so3

            angle = np.degrees(np.linalg.norm(log_so3(w)))
            assert abs(angle - 90.0) < 1e-6

    def test_divergence_reported_not_raised(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        init = perturb_pose(gt_pose, np.array([0.02, 0.0, 0.0, 3.0, 0.0, 0.0]))
        cfg = fast_config(learning_rate_trans=float("inf"), max_iters=30)
        rep = run_registration(cfg, tube_small, cam64, image_ap, image_lat, init)
        assert rep.diverged
        assert not rep.converged
        assert np.all(np.isfinite(rep.loss_trace))

    def test_dimension_mismatch(self, tube_small, cam64, gt_pose, case64):
        from twoview.renderer import SilhouetteImage

        image_ap, _, _ = case64
        bad = SilhouetteImage(np.zeros((16, 16)))
        with pytest.raises(DimensionMismatch):
            run_registration(fast_config(), tube_small, cam64, image_ap, bad, gt_pose)

    def test_single_view_ap_estimates_independent_pose(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        init = perturb_pose(gt_pose, np.array([0.05, 0.03, -0.02, 2.0, -2.0, 3.0]))
        cfg = fast_config(configuration=Configuration.AP_ONLY)
        rep = run_registration(cfg, tube_small, cam64, image_ap, image_lat, init)
        # the AP image residual must be driven down even if depth drifts
        ap_pose = rep.final_pose_ap
        from twoview.renderer import silhouette_mse

        rendered = render_silhouette(tube_small, Projector(cam64, ap_pose), cfg.render)
        assert silhouette_mse(rendered, image_ap) < 1e-4


class TestSerialization:
    def test_config_json_roundtrip(self):
        cfg = RegistrationConfig(
            configuration=Configuration.LAT_THEN_AP,
            max_iters=123,
            learning_rate_rot=0.02,
            learning_rate_trans=0.5,
            lambda1=0.9,
            lambda2_schedule=Lambda2Schedule("linear_ramp", 0.8, 5, 50),
            convergence_tol=1e-8,
            coupling_axis_column=2,
            render=RenderSettings(sigma=2.0, gamma=1.5, band=9.0),
        )
        back = RegistrationConfig.from_json(cfg.to_json())
        assert back == cfg

    def test_config_field_names_snake_case(self):
        d = RegistrationConfig().to_dict()
        assert set(d) == {
            "configuration", "max_iters", "learning_rate_rot", "learning_rate_trans",
            "lambda1", "lambda2_schedule", "convergence_tol", "coupling_axis_column",
            "render",
        }

    def test_report_json_and_csv(self, tube_small, cam64, gt_pose, case64):
        image_ap, image_lat, _ = case64
        rep = run_registration(
            fast_config(max_iters=12), tube_small, cam64, image_ap, image_lat, gt_pose
        )
        d = json.loads(rep.to_json())
        assert d["iterations_run"] == rep.iterations_run
        assert len(d["loss_trace"]) == rep.iterations_run
        pose = pose_from_dict(d["final_pose_lat"])
        np.testing.assert_allclose(pose.rotvec, rep.final_pose_lat.rotvec)
        csv = rep.loss_trace_csv()
        assert csv.splitlines()[0] == "iteration,loss"
        assert len(csv.splitlines()) == rep.iterations_run + 1
