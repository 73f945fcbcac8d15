"""Outpainting-mask walkthrough: for each camera, a sphere of observed
content sits on the optical axis; rays that miss it mark the region to
synthesize. Writes mask PNGs for a ring of cameras.

Run:  python3 demos/outpaint_masks.py [--out /tmp/outpaint_demo]
"""

import argparse
import os

import numpy as np

from refsplat.dataset import save_mask
from refsplat.masks import generate_outpaint_masks
from refsplat.toy import look_at_camera


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="/tmp/outpaint_demo")
    parser.add_argument("--distance", type=float, default=4.0)
    parser.add_argument("--radius", type=float, default=1.2)
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)

    cameras = [
        look_at_camera(
            [3.5 * np.sin(a), 0.0, -3.5 * np.cos(a)], [0, 0, 0],
            width=96, height=96, view_id=i,
        )
        for i, a in enumerate(np.linspace(0, 2 * np.pi, 8, endpoint=False))
    ]
    masks = generate_outpaint_masks(cameras, args.distance, args.radius)
    for cam, mask in zip(cameras, masks):
        frac = float(mask.mean())
        print(f"view {cam.view_id}: {frac:5.1%} of pixels to outpaint")
        save_mask(os.path.join(args.out, f"mask_{cam.view_id:03d}.png"), mask)
    print(f"masks written to {args.out}")


if __name__ == "__main__":
    main()
