"""Command-line interface: synth, register, eval, and sweep subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Pose
from .images import (
    ConstantImage,
    ingest_silhouette,
    save_gray,
    silhouette_to_gray,
)
from .mesh import EmptyMesh, ParseError, TriangleMesh, load_mesh, make_tube_mesh
from .metrics import (
    InvisibleMesh,
    PerturbationRanges,
    default_camera,
    default_gt_pose,
    make_synthetic_case,
    pose_error,
    run_sweep,
    sweep_workers,
)
from .registration import (
    Configuration,
    DimensionMismatch,
    NonFiniteLoss,
    RegistrationConfig,
    pose_from_dict,
    run_registration,
)
from .renderer import Projector, SilhouetteImage, render_silhouette

EXIT_OK = 0
EXIT_IO = 1
EXIT_NUMERIC = 2


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _load_pose(path) -> Pose:
    return pose_from_dict(_load_json(path))


def _pose_payload(pose: Pose) -> dict:
    return {
        "rotvec": [float(x) for x in pose.rotvec],
        "translation": [float(x) for x in pose.translation],
    }


def _load_camera(path) -> CameraModel:
    d = _load_json(path)
    return CameraModel(
        fx=float(d["fx"]), fy=float(d["fy"]),
        cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
    )


def _camera_payload(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    }


def _resolve_mesh(path: str | None) -> TriangleMesh:
    if path is None:
        return make_tube_mesh()
    return load_mesh(path)


def _resolve_config(path: str | None) -> RegistrationConfig:
    if path is None:
        return RegistrationConfig()
    return RegistrationConfig.from_dict(_load_json(path))


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = _resolve_mesh(args.mesh)
    camera = _load_camera(args.camera) if args.camera else default_camera(args.size)
    gt_pose = _load_pose(args.gt_pose) if args.gt_pose else default_gt_pose()
    cfg = _resolve_config(args.config)
    perturb = PerturbationRanges(cone_deg=args.perturb_cone_deg, box_mm=args.perturb_box_mm)
    image_ap, image_lat, init_pose = make_synthetic_case(
        mesh, camera, gt_pose, cfg.render, args.seed,
        perturb=perturb, axis_column=cfg.coupling_axis_column,
    )
    # emit in the DSA convention: vessels dark on a bright background
    save_gray(out / "I_ap.png", silhouette_to_gray(image_ap, bits=16, invert=True))
    save_gray(out / "I_lat.png", silhouette_to_gray(image_lat, bits=16, invert=True))
    _write_json(out / "gt_pose.json", _pose_payload(gt_pose))
    _write_json(out / "init_pose.json", _pose_payload(init_pose))
    _write_json(out / "camera.json", _camera_payload(camera))
    print(f"wrote synthetic case to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_register(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = _resolve_mesh(args.mesh)
    cfg = _resolve_config(args.config)
    image_ap = ingest_silhouette(args.ap, args.polarity, args.segment)
    image_lat = ingest_silhouette(args.lat, args.polarity, args.segment)
    if args.camera:
        camera = _load_camera(args.camera)
    else:
        camera = default_camera(image_lat.width)
    init_pose = _load_pose(args.init) if args.init else default_gt_pose()

    callback = None
    if args.dump_frames:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        stride = max(1, args.frame_stride)

        def callback(iteration: int, pose_lat: Pose, loss: float) -> None:
            if iteration % stride:
                return
            rendered = render_silhouette(mesh, Projector(camera, pose_lat), cfg.render)
            residual = SilhouetteImage(np.abs(image_lat.values - rendered.values))
            save_gray(frames / f"{iteration:04d}_render.png", silhouette_to_gray(rendered, bits=8))
            save_gray(frames / f"{iteration:04d}_residual.png", silhouette_to_gray(residual, bits=8))

    report = run_registration(cfg, mesh, camera, image_ap, image_lat, init_pose,
                              iteration_callback=callback)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if args.loss_csv:
        (out / "loss_trace.csv").write_text(report.loss_trace_csv(), encoding="utf-8")
    if report.diverged:
        raise NonFiniteLoss("optimization diverged; see report.json for the partial trace")
    print(f"wrote {out / 'report.json'}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    mesh = _resolve_mesh(args.mesh)
    est = _load_pose(args.est)
    gt = _load_pose(args.gt)
    err = pose_error(mesh, est, gt)
    print(json.dumps(err.to_dict(), indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = _resolve_mesh(args.mesh)
    cfg = _resolve_config(args.config)
    camera = _load_camera(args.camera) if args.camera else default_camera(args.size)
    gt_pose = _load_pose(args.gt_pose) if args.gt_pose else default_gt_pose()
    if args.configurations:
        configs = [Configuration(c.strip()) for c in args.configurations.split(",") if c.strip()]
    else:
        configs = list(Configuration)
    seeds = list(range(args.seed, args.seed + args.seeds))
    perturb = PerturbationRanges(cone_deg=args.perturb_cone_deg, box_mm=args.perturb_box_mm)
    result = run_sweep(
        mesh, camera, gt_pose, cfg, configs, seeds,
        perturb=perturb, max_workers=sweep_workers(),
    )
    (out / "sweep.csv").write_text(result.to_csv_text(), encoding="utf-8")
    _write_json(out / "summary.json", result.summary_dict())
    print(f"wrote {out / 'sweep.csv'} and {out / 'summary.json'}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twoview",
        description="Register perpendicular angiographic views against a 3D vessel mesh "
        "by differentiable silhouette rendering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--mesh", help="OBJ mesh path (default: built-in synthetic tube)")
        p.add_argument("--config", help="registration config JSON (default: built-in defaults)")
        p.add_argument("--camera", help="camera intrinsics JSON")
        p.add_argument("--out", default="out", help="output directory (default: %(default)s)")

    p = sub.add_parser("synth", help="render a synthetic ground-truth case")
    add_common(p)
    p.add_argument("--gt-pose", help="ground-truth lateral pose JSON (default: canonical)")
    p.add_argument("--seed", type=int, default=0, help="perturbation seed (default: %(default)s)")
    p.add_argument("--size", type=int, default=256, help="image size for the default camera")
    p.add_argument("--perturb-cone-deg", type=float, default=10.0, help="rotation cone (deg)")
    p.add_argument("--perturb-box-mm", type=float, default=10.0, help="translation box (mm)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register two views against the mesh")
    add_common(p)
    p.add_argument("--ap", required=True, help="anteroposterior image (PNG or PGM)")
    p.add_argument("--lat", required=True, help="lateral image (PNG or PGM)")
    p.add_argument("--init", help="initial lateral pose JSON (default: canonical)")
    p.add_argument(
        "--polarity", choices=("vessels_dark", "vessels_bright"), default="vessels_dark",
        help="which side of the Otsu threshold is vasculature (default: %(default)s)",
    )
    p.add_argument(
        "--segment", choices=("otsu", "none"), default="otsu",
        help="target segmentation: Otsu thresholding, or none to keep "
        "normalized grayscale values (lossless for silhouette inputs; "
        "default: %(default)s)",
    )
    p.add_argument("--dump-frames", action="store_true", help="write per-iteration render/residual PNGs")
    p.add_argument("--frame-stride", type=int, default=10, help="iterations between frame dumps")
    p.add_argument("--loss-csv", action="store_true", help="also write loss_trace.csv")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="compare an estimated pose against ground truth")
    p.add_argument("--mesh", help="OBJ mesh path (default: built-in synthetic tube)")
    p.add_argument("--est", required=True, help="estimated pose JSON")
    p.add_argument("--gt", required=True, help="ground-truth pose JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the acquisition-configuration benchmark")
    add_common(p)
    p.add_argument("--gt-pose", help="ground-truth lateral pose JSON (default: canonical)")
    p.add_argument("--seed", type=int, default=0, help="first seed (default: %(default)s)")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (default: %(default)s)")
    p.add_argument("--size", type=int, default=256, help="image size for the default camera")
    p.add_argument("--configurations", help="comma-separated subset of "
                   + ",".join(c.value for c in Configuration))
    p.add_argument("--perturb-cone-deg", type=float, default=10.0, help="rotation cone (deg)")
    p.add_argument("--perturb-box-mm", type=float, default=10.0, help="translation box (mm)")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvisibleMesh, NonFiniteLoss) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        # covers ParseError, EmptyMesh, DimensionMismatch, ConstantImage,
        # malformed JSON/flags, and I/O failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
