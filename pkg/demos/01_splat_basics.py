"""
Splatting a handful of Gaussians
================================

Build four 3D Gaussians by hand, project them through a pinhole camera and
composite them front to back. The output image and the per-pixel opacity are
written next to this script.
"""

from pathlib import Path

import numpy as np

from wildsplat.io import write_image
from wildsplat.raster import make_splats, project, rasterize
from wildsplat.scene import Camera, build_covariance

out_dir = Path(__file__).with_suffix("")
out_dir.mkdir(exist_ok=True)

###############################################################################
# A camera five units behind the origin looking down +z.

cam = Camera.look_at([0, 0, -5], [0, 0, 0], [0, -1, 0], 90, 90, 64, 48, 128, 96)

###############################################################################
# Four primitives: centres, rotations (quaternions), axis scales, opacity and
# colour. The red one is nearest the camera and hides part of the others.

means = np.array([[0.0, 0.0, -1.0], [0.8, 0.3, 0.0], [-0.9, -0.2, 0.5], [0.0, 0.9, 1.0]])
quats = np.array([[1, 0, 0, 0], [0.9, 0, 0, 0.4], [0.8, 0.2, 0, -0.5], [1, 0, 0, 0]], float)
scales = np.array([[0.4, 0.2, 0.2], [0.6, 0.25, 0.2], [0.3, 0.7, 0.2], [1.2, 0.15, 0.2]])
opacity = np.array([0.9, 0.8, 0.85, 0.7])
colors = np.array([[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.2, 0.3, 0.9], [0.9, 0.8, 0.2]])

###############################################################################
# EWA projection gives screen-space means and 2x2 covariances; the tiled
# rasterizer sorts by depth and alpha-blends.

proj = project(means, build_covariance(quats, scales), cam)
print("screen means:\n", np.round(proj.means2d, 2))
ras = rasterize(make_splats(proj, opacity, colors), cam.width, cam.height)

write_image(out_dir / "splats.ppm", ras.image)
write_image(out_dir / "alpha.ppm", np.repeat(ras.alpha[..., None], 3, axis=2))
print("max contributors per pixel:", ras.n_contrib.max())
print("wrote", out_dir)
