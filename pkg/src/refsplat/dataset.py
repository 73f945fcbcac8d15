"""Dataset loading: camera JSON manifests, PNG images/masks, PFM depth maps."""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .scene import CameraView, InvalidInputError

REQUIRED_KEYS = ("id", "width", "height", "fx", "fy", "cx", "cy", "world_to_camera")


def load_image(path) -> np.ndarray:
    """Load an RGB PNG as float (h, w, 3) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Save a float (h, w, 3) image in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_mask(path) -> np.ndarray:
    """Load a grayscale PNG as a {0, 1} float mask; values >= 128 are masked."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= 128).astype(np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)).save(path)


def load_pfm(path) -> np.ndarray:
    """Load a single-channel 32-bit float PFM depth map as (h, w) float64."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise InvalidInputError(f"not a grayscale PFM file (magic {magic!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise InvalidInputError("malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype)
        if data.size != w * h:
            raise InvalidInputError("PFM body truncated")
    # PFM rows are stored bottom-to-top.
    return data.reshape(h, w)[::-1].astype(np.float64)


def save_pfm(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise InvalidInputError("PFM writer expects a (h, w) array")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(depth[::-1].astype("<f4").tobytes())


def load_views(manifest_path, image_dir=None, mask_dir=None) -> list[CameraView]:
    """Load cameras (plus optional images and masks) from a JSON manifest.

    The manifest is a JSON list of records with keys id, width, height,
    fx, fy, cx, cy, world_to_camera (16 floats, row-major), image
    (relative path or null), and mask (relative path or null). Relative
    paths resolve against image_dir / mask_dir when given, else against
    the manifest's directory. A null mask loads as all-zeros when an
    image is present.
    """
    with open(manifest_path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise InvalidInputError("camera manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(manifest_path))
    image_base = image_dir if image_dir is not None else base
    mask_base = mask_dir if mask_dir is not None else base
    views = []
    for rec in records:
        missing = [k for k in REQUIRED_KEYS if k not in rec]
        if missing:
            raise InvalidInputError(f"camera record missing keys: {missing}")
        w2c = np.asarray(rec["world_to_camera"], dtype=float)
        if w2c.size != 16:
            raise InvalidInputError("world_to_camera must have 16 entries")
        w2c = w2c.reshape(4, 4)
        image = mask = None
        if rec.get("image"):
            image = load_image(os.path.join(image_base, rec["image"]))
        if rec.get("mask"):
            mask = load_mask(os.path.join(mask_base, rec["mask"]))
        elif image is not None:
            mask = np.zeros(image.shape[:2])
        views.append(
            CameraView(
                width=int(rec["width"]),
                height=int(rec["height"]),
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                world_to_camera=w2c,
                image=image,
                mask=mask,
                view_id=int(rec["id"]),
            )
        )
    return views


def save_views(manifest_path, views: list[CameraView], image_dir: str | None = None) -> None:
    """Write a camera manifest; optionally dump images/masks next to it."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    for view in views:
        rec = {
            "id": view.view_id,
            "width": view.width,
            "height": view.height,
            "fx": view.fx,
            "fy": view.fy,
            "cx": view.cx,
            "cy": view.cy,
            "world_to_camera": [float(v) for v in view.world_to_camera.reshape(-1)],
            "image": None,
            "mask": None,
        }
        if image_dir is not None and view.image is not None:
            os.makedirs(os.path.join(base, image_dir), exist_ok=True)
            rec["image"] = os.path.join(image_dir, f"view_{view.view_id:03d}.png")
            save_image(os.path.join(base, rec["image"]), view.image)
            if view.mask is not None:
                rec["mask"] = os.path.join(image_dir, f"mask_{view.view_id:03d}.png")
                save_mask(os.path.join(base, rec["mask"]), view.mask)
        records.append(rec)
    with open(manifest_path, "w") as fh:
        json.dump(records, fh, indent=2)
