"""Command-line interface: labeling, initialization, training, rendering,
evaluation, outpainting masks, and procedural test-scene generation.

Dataset directory convention (produced by `refsplat toy`, consumed by the
other subcommands): scene.ply (working scene, labels included),
complete.ply (hidden object-free scene for the ground-truth depth oracle),
cameras.json (+ images/ and mask PNGs), gt/gt_<id>.png held-out renders,
reference.png / reference_mask.png / reference_depth.pfm and
reference.json ({"camera_id": ...}).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as ds
from . import ply_io
from .depth_reg import GroundTruthDepthOracle
from .guidance import MixturePrior, LinearCodec, NoiseSchedule, bilinear_resize
from .masks import generate_outpaint_masks, label_gaussians, render_consistent_masks
from .metrics import eval_masked
from .rasterizer import accumulate_contributions, render
from .reference import ReferenceView, align_depth, init_masked_region
from .scene import InvalidInputError
from .config_io import load_config, save_config
from .toy import ToyConfig, gt_dirac_prior, make_toy_scene
from .trainer import train, write_loss_log
from .remote import RemoteDepthOracle, RemotePrior, resolve_prior_url


def _mask_path(masks_dir, view_id):
    return os.path.join(masks_dir, f"mask_{view_id:03d}.png")


def _attach_masks(views, masks_dir):
    for view in views:
        path = _mask_path(masks_dir, view.view_id)
        if not os.path.exists(path):
            raise InvalidInputError(f"no mask file for view {view.view_id}: {path}")
        view.mask = ds.load_mask(path)


def cmd_label(args):
    scene = ply_io.load_scene(args.scene)
    views = ds.load_views(args.cameras)
    _attach_masks(views, args.masks)
    tally = accumulate_contributions(scene, views)
    scene.labels = label_gaussians(tally, args.tau)
    # one consolidation pass: re-threshold rendered labels, then relabel
    consistent = render_consistent_masks(scene, views, args.tau_prime)
    for view, mask in zip(views, consistent):
        view.mask = mask
    scene.labels = label_gaussians(accumulate_contributions(scene, views), args.tau)
    ply_io.save_scene(args.out, scene)
    print(f"labeled {int((scene.labels == 1).sum())}/{len(scene)} particles as masked -> {args.out}")


def cmd_init(args):
    scene = ply_io.load_scene(args.scene)
    if args.labels.endswith(".ply"):
        labels = ply_io.load_scene(args.labels).labels
    else:
        labels = np.load(args.labels).astype(np.uint8)
    ref_dir = os.path.dirname(os.path.abspath(args.reference))
    views = ds.load_views(os.path.join(ref_dir, "cameras.json"))
    by_id = {v.view_id: v for v in views}
    if args.camera_id not in by_id:
        raise InvalidInputError(f"camera id {args.camera_id} not in cameras.json")
    cam = by_id[args.camera_id]
    image = ds.load_image(args.reference)
    rel_depth = ds.load_pfm(args.ref_depth)
    mask = cam.mask if cam.mask is not None else np.zeros(image.shape[:2])
    ref = ReferenceView(camera=cam, image=image, mask=mask, relative_depth=rel_depth)
    labeled = scene.copy()
    labeled.labels = labels
    rendered = render(labeled, cam)
    alignment = align_depth(rel_depth, rendered.depth, (mask == 0) & (rendered.alpha > 0.5))
    out_scene = init_masked_region(scene, labels, ref, alignment)
    ply_io.save_scene(args.out, out_scene)
    print(f"initialized scene: {len(scene)} -> {len(out_scene)} particles -> {args.out}")


def _load_dataset(data_dir):
    scene = ply_io.load_scene(os.path.join(data_dir, "scene.ply"))
    views = ds.load_views(os.path.join(data_dir, "cameras.json"))
    gt_images = []
    gt_dir = os.path.join(data_dir, "gt")
    if os.path.isdir(gt_dir):
        for view in views:
            path = os.path.join(gt_dir, f"gt_{view.view_id:03d}.png")
            gt_images.append(ds.load_image(path) if os.path.exists(path) else None)
    complete = None
    complete_path = os.path.join(data_dir, "complete.ply")
    if os.path.exists(complete_path):
        complete = ply_io.load_scene(complete_path)
    reference = None
    ref_json = os.path.join(data_dir, "reference.json")
    if os.path.exists(ref_json):
        with open(ref_json) as fh:
            ref_id = json.load(fh)["camera_id"]
        cam = {v.view_id: v for v in views}[ref_id]
        reference = ReferenceView(
            camera=cam,
            image=ds.load_image(os.path.join(data_dir, "reference.png")),
            mask=ds.load_mask(os.path.join(data_dir, "reference_mask.png")),
            relative_depth=ds.load_pfm(os.path.join(data_dir, "reference_depth.pfm")),
        )
    return scene, views, gt_images, complete, reference


def cmd_train(args):
    cfg = load_config(args.config)
    if cfg.data_dir:
        scene, views, gt_images, complete, reference = _load_dataset(cfg.data_dir)
    else:
        side = max(cfg.native_resolution, 64)
        bundle = make_toy_scene(cfg.seed, ToyConfig(width=side, height=side))
        scene, views, gt_images = bundle.augmented, bundle.cameras, bundle.gt_images
        complete = bundle.complete
        ref_cam = views[len(views) // 2]
        reference = ReferenceView(
            camera=ref_cam,
            image=bundle.gt_images[ref_cam.view_id],
            mask=ref_cam.mask,
            relative_depth=render(complete, ref_cam).depth,
        )

    if args.prior == "analytic":
        if not gt_images or any(g is None for g in gt_images):
            raise InvalidInputError("analytic prior needs ground-truth images (gt/ directory)")
        prior = gt_dirac_prior(gt_images, cfg.native_resolution)
    elif args.prior == "mixture":
        if not gt_images or any(g is None for g in gt_images):
            raise InvalidInputError("mixture prior needs ground-truth images (gt/ directory)")
        nat = cfg.native_resolution
        targets = [bilinear_resize(g, (nat, nat)) for g in gt_images]
        prior = MixturePrior(LinearCodec(k=4), NoiseSchedule(), targets)
    elif args.prior.startswith("remote="):
        url = resolve_prior_url(args.prior.split("=", 1)[1])
        prior = RemotePrior(url)
    else:
        raise InvalidInputError(f"unknown prior {args.prior!r}")

    if args.depth_oracle == "gt":
        if complete is None:
            raise InvalidInputError("gt depth oracle needs complete.ply in the dataset")
        depth_oracle = GroundTruthDepthOracle(complete)
    elif args.depth_oracle == "remote":
        url = resolve_prior_url(None)
        if url is None and args.prior.startswith("remote="):
            url = args.prior.split("=", 1)[1]
        if url is None:
            raise InvalidInputError("remote depth oracle needs REFSPLAT_PRIOR_URL")
        depth_oracle = RemoteDepthOracle(url)
    else:
        raise InvalidInputError(f"unknown depth oracle {args.depth_oracle!r}")

    result = train(cfg, scene, views, reference, prior, depth_oracle)
    os.makedirs(args.out, exist_ok=True)
    ply_io.save_scene(os.path.join(args.out, "scene.ply"), result.scene)
    write_loss_log(os.path.join(args.out, "loss_log.csv"), result.log)
    print(
        f"trained {cfg.iterations} iterations ({result.rollbacks} rollbacks), "
        f"{len(result.scene)} particles -> {args.out}"
    )


def cmd_render(args):
    scene = ply_io.load_scene(args.scene)
    views = ds.load_views(args.cameras)
    os.makedirs(args.out_dir, exist_ok=True)
    for view in views:
        out = render(scene, view)
        ds.save_image(os.path.join(args.out_dir, f"render_{view.view_id:03d}.png"), out.rgb)
    print(f"rendered {len(views)} views -> {args.out_dir}")


def _sorted_pngs(directory):
    return sorted(
        os.path.join(directory, f) for f in os.listdir(directory) if f.endswith(".png")
    )


def cmd_eval(args):
    pred_paths = _sorted_pngs(args.pred)
    gt_paths = _sorted_pngs(args.gt)
    mask_paths = _sorted_pngs(args.masks)
    if not (len(pred_paths) == len(gt_paths) == len(mask_paths)):
        raise InvalidInputError("pred/gt/mask directories must contain equal PNG counts")
    preds = [ds.load_image(p) for p in pred_paths]
    gts = [ds.load_image(p) for p in gt_paths]
    masks = [ds.load_mask(p) for p in mask_paths]
    m = eval_masked(preds, gts, masks, dilation=args.dilate)
    for i, (l1, psnr, ssim) in enumerate(zip(m.l1, m.psnr, m.ssim)):
        print(f"view {i:3d}: L1 {l1:.5f}  PSNR {psnr:6.2f} dB  SSIM {ssim:.4f}")
    print(f"mean    : L1 {m.mean_l1:.5f}  PSNR {m.mean_psnr:6.2f} dB  SSIM {m.mean_ssim:.4f}")


def cmd_outpaint_mask(args):
    views = ds.load_views(args.cameras)
    masks = generate_outpaint_masks(views, args.distance, args.radius)
    os.makedirs(args.out, exist_ok=True)
    for view, mask in zip(views, masks):
        ds.save_mask(_mask_path(args.out, view.view_id), mask)
    print(f"wrote {len(masks)} outpainting masks -> {args.out}")


def cmd_toy(args):
    bundle = make_toy_scene(args.seed)
    out = args.out
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "gt"), exist_ok=True)
    ply_io.save_scene(os.path.join(out, "scene.ply"), bundle.augmented)
    ply_io.save_scene(os.path.join(out, "complete.ply"), bundle.complete)
    ds.save_views(os.path.join(out, "cameras.json"), bundle.cameras, image_dir="images")
    for view, gt in zip(bundle.cameras, bundle.gt_images):
        ds.save_image(os.path.join(out, "gt", f"gt_{view.view_id:03d}.png"), gt)
    ref_cam = bundle.cameras[len(bundle.cameras) // 2]
    ds.save_image(os.path.join(out, "reference.png"), bundle.gt_images[ref_cam.view_id])
    ds.save_mask(os.path.join(out, "reference_mask.png"), ref_cam.mask)
    ds.save_pfm(
        os.path.join(out, "reference_depth.pfm"), render(bundle.complete, ref_cam).depth
    )
    with open(os.path.join(out, "reference.json"), "w") as fh:
        json.dump({"camera_id": ref_cam.view_id}, fh)
    from .trainer import TrainConfig

    cfg = TrainConfig(data_dir=out, seed=args.seed)
    save_config(os.path.join(out, "train.toml"), cfg)
    print(
        f"toy dataset (seed {args.seed}): {len(bundle.augmented)} particles, "
        f"{len(bundle.cameras)} views -> {out}"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refsplat", description="Reference-guided Gaussian-splat inpainting toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("label", help="Label particles from per-view masks and consolidate.")
    p.add_argument("--scene", required=True, help="input scene PLY")
    p.add_argument("--cameras", required=True, help="cameras JSON manifest")
    p.add_argument("--masks", required=True, help="directory of mask_<id>.png files")
    p.add_argument("--tau", type=float, default=1.0, help="masked/unmasked count ratio threshold")
    p.add_argument("--tau-prime", type=float, default=0.3, help="semantic render threshold")
    p.add_argument("--out", required=True, help="output labeled scene PLY")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("init", help="Replace the masked region with a reference unprojection.")
    p.add_argument("--scene", required=True, help="input scene PLY")
    p.add_argument("--labels", required=True, help="labels source (.npy or labeled .ply)")
    p.add_argument("--reference", required=True, help="inpainted reference image PNG (cameras.json beside it)")
    p.add_argument("--ref-depth", required=True, help="reference relative depth PFM")
    p.add_argument("--camera-id", type=int, required=True, help="reference camera id")
    p.add_argument("--out", required=True, help="output scene PLY")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="Optimize a scene with the configured losses.")
    p.add_argument("--config", required=True, help="TOML-style key = value training config")
    p.add_argument("--prior", default="analytic", help="analytic | mixture | remote=<url>")
    p.add_argument("--depth-oracle", default="gt", help="gt | remote")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="Render a scene from a camera manifest.")
    p.add_argument("--scene", required=True, help="scene PLY")
    p.add_argument("--cameras", required=True, help="cameras JSON manifest")
    p.add_argument("--out-dir", required=True, help="output PNG directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="Masked-region L1/PSNR/SSIM between render sets.")
    p.add_argument("--pred", required=True, help="predicted image directory")
    p.add_argument("--gt", required=True, help="ground-truth image directory")
    p.add_argument("--masks", required=True, help="mask PNG directory")
    p.add_argument("--dilate", type=float, default=0.10, help="bbox dilation per side")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("outpaint-mask", help="Ray-sphere outpainting masks for each camera.")
    p.add_argument("--cameras", required=True, help="cameras JSON manifest")
    p.add_argument("--distance", type=float, required=True, help="sphere distance along optical axis")
    p.add_argument("--radius", type=float, required=True, help="sphere radius")
    p.add_argument("--out", required=True, help="output mask directory")
    p.set_defaults(func=cmd_outpaint_mask)

    p = sub.add_parser("toy", help="Generate a procedural test dataset.")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_toy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
