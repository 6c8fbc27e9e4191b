"""trajsplat command-line interface.

Every subcommand reads an optional JSON ``--config``; explicit flags override
it. Outputs are written atomically and are byte-identical across runs with
the same config and seed.

Exit codes: 0 success, 2 input or parse error, 3 numerical failure, 4 I/O error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as tio
from .camera import CameraFrame, Intrinsics, Pose, generate_trajectory, ray_embedding_map
from .config import RunConfig, load_config
from .exceptions import InputError, NumericalError

log = logging.getLogger("trajsplat")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _dump_json(path, payload):
    tio.atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _trajectory(args, cfg):
    if getattr(args, "cameras", None):
        traj, _ = tio.parse_camera_file(args.cameras, cfg.width, cfg.height, cfg.cy_by)
        return traj
    base = CameraFrame(Intrinsics.from_fov(cfg.width, cfg.height, cfg.fov_deg), Pose.identity(), 0)
    return generate_trajectory(cfg.trajectory, cfg.n_frames, cfg.magnitude, base)


def _frame(traj, index):
    if not 0 <= index < len(traj):
        raise InputError(f"frame {index} outside a {len(traj)}-frame trajectory")
    return traj[index]


def _depth(path, cfg):
    return tio.read_depth(path, cfg.pgm_scale)


def cmd_rays(args, cfg):
    traj = _trajectory(args, cfg)
    out = Path(args.out)
    for i, frame in enumerate(traj):
        tio.write_rays(out / f"frame_{i:04d}.ray", ray_embedding_map(frame))
    log.info("wrote %d ray maps to %s", len(traj), out)


def cmd_epi_mask(args, cfg):
    from .epipolar import mask_set_for_trajectory

    traj = _trajectory(args, cfg)
    masks = mask_set_for_trajectory(traj, cfg.feature_res, cfg.tau)
    out = Path(args.out)
    tio.write_epim(out / "masks.epim", masks)
    if not args.no_png:
        for i, k in masks.pairs:
            if i != k:
                tio.write_png(out / f"mask_{i:02d}_{k:02d}.png", masks.dense(i, k).astype(np.uint8) * 255)
    log.info("wrote %d masks (tau=%g) to %s", len(masks), cfg.tau, out)


def cmd_scale(args, cfg):
    from .scale import apply_scale, estimate_scale

    traj = _trajectory(args, cfg)
    sparse = tio.read_ply(args.sparse)
    depth = _depth(args.depth, cfg)
    sf = estimate_scale(sparse, _frame(traj, args.frame), depth, cfg.depth_mode, cfg.min_points)
    _dump_json(args.out, {"s": sf.s, "inlier_count": sf.inlier_count, "inlier_ratio": sf.inlier_ratio})
    if args.out_cameras:
        tio.write_camera_file(args.out_cameras, apply_scale(traj, sf.s), cy_by=cfg.cy_by)
    log.info("scale %.6g (%d inliers)", sf.s, sf.inlier_count)


def cmd_warp(args, cfg):
    from .warp import warp_frame

    traj = _trajectory(args, cfg)
    src = _frame(traj, args.frame)
    image = tio.read_image(args.image)
    depth = _depth(args.depth, cfg)
    out = Path(args.out)
    for i, frame in enumerate(traj):
        if args.out_size:
            # warp straight into the target resolution (e.g. a latent grid)
            frame = replace(frame, intrinsics=frame.intrinsics.rescaled(*args.out_size))
        res = warp_frame(src, image, depth, frame, cfg.splat_radius)
        tio.write_ppm(out / f"warp_{i:04d}.ppm", res.image)
        tio.write_mask_pgm(out / f"valid_{i:04d}.pgm", res.validity)
    log.info("warped frame %d to %d views", args.frame, len(traj))


def cmd_fit(args, cfg):
    from .gsplat import LossWeights, fit_gaussians, ray_initialized_cloud, render
    from .metrics import psnr, ssim

    traj = _trajectory(args, cfg)
    frame = _frame(traj, args.frame)
    image = tio.read_image(args.image)
    depth = _depth(args.depth, cfg)
    cloud = ray_initialized_cloud(frame, image, depth, grid=(cfg.grid, cfg.grid))
    weights = LossWeights(cfg.loss_mse, cfg.loss_perceptual, cfg.loss_depth)
    res = fit_gaussians(cloud, [(frame, image, depth)], weights, cfg.n_iters,
                        cfg.lr_color, cfg.lr_opacity, cfg.lr_mean)
    rendered = render(res.cloud, frame).image
    out = Path(args.out)
    tio.write_gspc(out / "cloud.gspc", res.cloud)
    tio.write_ply(out / "cloud.ply", res.cloud)
    tio.write_ppm(out / "render.ppm", rendered)
    report = {
        "n_gaussians": len(res.cloud),
        "n_iters": cfg.n_iters,
        "psnr": psnr(rendered, image),
        "ssim": ssim(rendered, image) if min(image.shape[:2]) >= 11 else None,
        "loss_initial": float(res.loss_history[0]) if len(res.loss_history) else None,
        "loss_final": float(res.loss_history[-1]) if len(res.loss_history) else None,
    }
    _dump_json(out / "metrics.json", report)
    tio.write_csv(out / "loss.csv", ["step", "loss"], list(enumerate(res.loss_history.tolist())))
    log.info("fit %d Gaussians: PSNR %.2f dB", len(res.cloud), report["psnr"])


def _denoiser_tensors(model):
    tensors = {f"net.{k}": v for k, v in model.params.items()}
    tensors["meta.shape"] = np.array([model.length, model.n_features, model.code_dim, model.hidden])
    tensors["meta.sigma_data"] = np.array([model.pre.sigma_data])
    return tensors


def _denoiser_from_tensors(tensors):
    from .diffusion import ToyDenoiser

    try:
        length, n_features, code_dim, hidden = (int(v) for v in tensors["meta.shape"])
        model = ToyDenoiser(length, n_features, code_dim, hidden, float(tensors["meta.sigma_data"][0]))
        for k in model.params:
            if tensors[f"net.{k}"].shape != model.params[k].shape:
                raise InputError(f"checkpoint tensor net.{k} has the wrong shape")
            model.params[k] = tensors[f"net.{k}"].copy()
    except KeyError as exc:
        raise InputError(f"checkpoint lacks tensor {exc}") from None
    return model


def cmd_toy_diffusion(args, cfg):
    from .diffusion import ToyDenoiser, endpoint_error, sample, toy_trajectory_dataset, train

    if args.action == "train":
        data = toy_trajectory_dataset(cfg.n_data, cfg.seq_length, cfg.seed)
        model = ToyDenoiser(cfg.seq_length, 1, 1, cfg.hidden, seed=cfg.seed)
        res = train(model, data, cfg.train_steps, cfg.batch_size, cfg.lr, rng_seed=cfg.seed)
        tio.write_checkpoint(args.out, _denoiser_tensors(model))
        if args.curve:
            tio.write_csv(args.curve, ["step", "loss"], zip(res.steps.tolist(), res.loss.tolist()))
        if args.eval_curve:
            tio.write_csv(args.eval_curve, ["step", "loss"],
                          zip(res.eval_loss[:, 0].astype(int).tolist(), res.eval_loss[:, 1].tolist()))
        log.info("trained %d steps; eval DSM loss %.4g -> %.4g",
                 cfg.train_steps, res.eval_loss[0, 1], res.eval_loss[-1, 1])
        return
    model = _denoiser_from_tensors(tio.read_checkpoint(args.checkpoint))
    # Conditioning comes from fresh toy sequences, distinct from the training seed.
    data = toy_trajectory_dataset(cfg.n_samples, model.length, cfg.seed + 1)
    cond = data.conditioning(cfg.sample_mode)
    xs = sample(model, cond, cfg.sample_steps, cfg.guidance, cfg.seed)
    rows = [(i, t, float(xs[i, t, 0])) for i in range(len(xs)) for t in range(xs.shape[1])]
    tio.write_csv(args.out, ["sample", "t", "value"], rows)
    if args.report:
        _dump_json(args.report, {"endpoint_mae": endpoint_error(xs, cond), "mode": cfg.sample_mode,
                                 "guidance": cfg.guidance, "n_steps": cfg.sample_steps})


def cmd_metrics(args, cfg):
    from .metrics import image_report, pose_report

    gen, _ = tio.parse_camera_file(args.gen, cfg.width, cfg.height, cfg.cy_by)
    gt, _ = tio.parse_camera_file(args.gt, cfg.width, cfg.height, cfg.cy_by)
    report = pose_report(gen, gt).as_dict()
    if args.rendered or args.target:
        if len(args.rendered or []) != len(args.target or []):
            raise InputError("--rendered and --target need the same number of images")
        img = image_report([tio.read_image(p) for p in args.rendered], [tio.read_image(p) for p in args.target])
        report["psnr"], report["ssim"] = img["psnr"], img["ssim"]
        report["per_frame"]["psnr"] = img["per_frame"]["psnr"]
        report["per_frame"]["ssim"] = img["per_frame"]["ssim"]
    _dump_json(args.out, report)


def demo_scene(cfg, scale=2.5):
    """Synthetic scene: trajectory, frame-0 image and metric depth, and a sparse
    cloud ``1/scale`` smaller than metric."""
    from .scale import unproject_depth

    base = CameraFrame(Intrinsics.from_fov(cfg.width, cfg.height, cfg.fov_deg), Pose.identity(), 0)
    traj = generate_trajectory(cfg.trajectory, cfg.n_frames, cfg.magnitude, base)
    h, w = cfg.height, cfg.width
    v, u = np.mgrid[0:h, 0:w]
    un, vn = (u + 0.5) / w, (v + 0.5) / h
    image = np.stack([0.5 + 0.35 * np.sin(2 * np.pi * un), 0.5 + 0.35 * np.cos(2 * np.pi * vn),
                      0.3 + 0.4 * un * vn], axis=2)
    depth = 2.0 + 0.5 * vn
    cloud = unproject_depth(traj[0], depth, image)
    rng = np.random.default_rng(cfg.seed)
    pick = np.sort(rng.choice(len(cloud), size=min(64, len(cloud)), replace=False))
    sparse = cloud.points[pick] / scale
    return traj, image, depth, sparse, cloud.colors[pick]


def cmd_demo_scene(args, cfg):
    traj, image, depth, sparse, colors = demo_scene(cfg, args.scale)
    out = Path(args.out)
    tio.write_camera_file(out / "cameras.txt", traj, cy_by=cfg.cy_by)
    tio.write_ppm(out / "image.ppm", image)
    tio.write_pfm(out / "depth.pfm", depth)
    tio.atomic_write(out / "sparse.ply", tio.encode_ply(sparse, colors))
    _dump_json(out / "config.json", cfg.to_dict())


def _add_config_flags(p, names):
    for name in names:
        field_type = RunConfig.__dataclass_fields__[name].type
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=field_type, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="trajsplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    camera_flags = ["width", "height", "fov_deg", "trajectory", "n_frames", "magnitude", "cy_by"]

    def command(name, func, flags, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON run config")
        _add_config_flags(p, flags)
        p.set_defaults(func=func, config_flags=flags)
        return p

    p = command("rays", cmd_rays, camera_flags, "per-frame Plücker ray maps")
    p.add_argument("--cameras")
    p.add_argument("--out", required=True)

    p = command("epi-mask", cmd_epi_mask, camera_flags + ["feature_height", "feature_width", "tau"],
                "epipolar attention masks")
    p.add_argument("--cameras")
    p.add_argument("--out", required=True)
    p.add_argument("--no-png", action="store_true")

    p = command("scale", cmd_scale, camera_flags + ["depth_mode", "pgm_scale", "min_points"],
                "metric scale from sparse points and a depth map")
    p.add_argument("--cameras")
    p.add_argument("--sparse", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--out-cameras")

    p = command("warp", cmd_warp, camera_flags + ["splat_radius", "pgm_scale"], "depth-warp a frame along the trajectory")
    p.add_argument("--cameras")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out-size", type=int, nargs=2, metavar=("H", "W"),
                   help="resolution of the warped frames (default: image resolution)")
    p.add_argument("--out", required=True)

    p = command("fit", cmd_fit, camera_flags + ["grid", "n_iters", "lr_color", "lr_opacity", "lr_mean",
                                                 "loss_mse", "loss_perceptual", "loss_depth", "pgm_scale"],
                "fit ray-initialized Gaussians to one view")
    p.add_argument("--cameras")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("toy-diffusion", cmd_toy_diffusion,
                ["n_data", "seq_length", "train_steps", "batch_size", "lr", "hidden",
                 "sample_steps", "guidance", "n_samples", "sample_mode", "seed"],
                "train or sample the toy sequence diffusion model")
    p.add_argument("action", choices=["train", "sample"])
    p.add_argument("--out", required=True, help="checkpoint (train) or samples CSV (sample)")
    p.add_argument("--checkpoint", help="checkpoint to sample from")
    p.add_argument("--curve", help="training loss CSV")
    p.add_argument("--eval-curve", help="held-out DSM loss CSV")
    p.add_argument("--report", help="endpoint-error JSON (sample)")

    p = command("metrics", cmd_metrics, ["width", "height", "cy_by"], "pose and image metrics report")
    p.add_argument("--gen", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--rendered", nargs="*")
    p.add_argument("--target", nargs="*")
    p.add_argument("--out", required=True)

    p = command("demo-scene", cmd_demo_scene, camera_flags + ["seed"], "write a small synthetic scene")
    p.add_argument("--scale", type=float, default=2.5)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {k: getattr(args, k) for k in args.config_flags})
        if args.command == "toy-diffusion" and args.action == "sample" and not args.checkpoint:
            raise InputError("sampling needs --checkpoint")
        args.func(args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
