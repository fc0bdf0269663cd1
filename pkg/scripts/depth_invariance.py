"""Reconstruction error of one flickering patch rendered at depth Z and 2Z.

With an empty-background reconstruction, the patch itself is the error
pattern. The raw summed error falls with the projected area (about 4x per
depth doubling); weighting each pixel by Z**exponent undoes that.

    python scripts/depth_invariance.py --depths 2.5 3 4 5 --exponent 2
"""
import argparse

import numpy as np

from depcae.geometry import Background, PinholeCamera, SceneObject, projected_side, render_scene
from depcae.loss import DepthWeights, depth_weighted_mse


def summed_error(camera, background, z, side, exponent):
    patch = SceneObject((0.0, 0.0, z), side, is_anomalous=True, anomaly_kind="flicker")
    res = render_scene(camera, [patch], 2, background)
    clean = np.repeat(background.intensity[None], 2, axis=0)
    if exponent == 0:
        weights = DepthWeights.uniform(camera.image_size)
    else:
        weights = DepthWeights(res.depth, exponent, "none")
    return depth_weighted_mse(res.frames, clean, weights) * res.frames.size


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depths", type=float, nargs="+", default=[2.5, 3.0, 4.0, 5.0])
    ap.add_argument("--exponent", type=float, default=2.0)
    ap.add_argument("--side", type=float, default=1.0, help="patch side in metres")
    ap.add_argument("--focal", type=float, default=64.0, help="focal length in pixels")
    args = ap.parse_args()

    camera = PinholeCamera(args.focal, 64)
    background = Background.flat(64, 0.2, 20.0)
    print(f"{'Z':>5} {'px@Z':>6} {'px@2Z':>6} {'raw ratio':>10} {'weighted ratio':>15}")
    for z in args.depths:
        raw = summed_error(camera, background, z, args.side, 0) / summed_error(camera, background, 2 * z,
                                                                              args.side, 0)
        wtd = (summed_error(camera, background, z, args.side, args.exponent)
               / summed_error(camera, background, 2 * z, args.side, args.exponent))
        near = round(projected_side(args.focal, args.side, z))
        far = round(projected_side(args.focal, args.side, 2 * z))
        print(f"{z:5.2f} {near:6d} {far:6d} {raw:10.3f} {wtd:15.3f}")


if __name__ == "__main__":
    main()
