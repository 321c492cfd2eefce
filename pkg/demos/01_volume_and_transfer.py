"""Volumes and transfer functions.

Builds the procedural test volumes, shows trilinear sampling and the
piecewise-linear transfer function, and round-trips the .vvol format.
Outputs land in demos/out/.
"""

import os

import numpy as np

import fovsplat as fs
from fovsplat.frameio import save_png

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

# A 64^3 solid sphere, density 1 inside radius 0.4 * extent, centered at the
# world origin. Spacing is mm per voxel.
vol = fs.make_procedural_volume("sphere", (64, 64, 64))
print(f"sphere volume: dims={vol.dims} spacing={vol.spacing} extent={vol.extent:.0f} mm")

# Trilinear sampling is exact at voxel centers and 0 outside the box.
print("density at center:", fs.sample_density(vol, (0.0, 0.0, 0.0)))
print("density outside:  ", fs.sample_density(vol, (200.0, 0.0, 0.0)))

# Transfer function: ordered (density, RGBA) control points, evaluated by
# piecewise-linear interpolation. This one makes soft tissue reddish and
# dense material bright and opaque.
tf = fs.TransferFunction.from_points(
    [
        (0.0, (0, 0, 0, 0)),
        (0.3, (0.8, 0.5, 0.3, 0.05)),
        (0.7, (0.9, 0.4, 0.25, 0.6)),
        (1.0, (0.95, 0.9, 0.85, 1.0)),
    ]
)
for d in (0.2, 0.5, 0.9):
    print(f"tf({d}) = {np.round(tf.eval(d), 3)}")

# Round-trip the little-endian .vvol container.
path = os.path.join(OUT, "sphere.vvol")
fs.save_volume(vol, path)
back = fs.load_volume(path)
print("vvol round trip identical:", np.array_equal(back.data, vol.data))

# Visualize middle slices of each fixture kind through the transfer function.
strips = []
for kind in ("sphere", "shell", "tubes", "wall"):
    v = fs.make_procedural_volume(kind, (64, 64, 64))
    mid = v.data[v.dims[2] // 2]  # central z slice
    rgba = tf.eval(mid)
    strips.append(rgba[:, :, :3] * rgba[:, :, 3:4])
save_png(np.concatenate(strips, axis=1), os.path.join(OUT, "fixture_slices.png"))
print("wrote", os.path.join(OUT, "fixture_slices.png"))
