"""
From a synthetic scene to detector inputs and targets
=====================================================

Generate one seeded scene, rasterise it into pillar features and encode the
five head targets. Prints a coarse bird's-eye view of the heatmap.
"""
import numpy as np

from itkd.scene import GenConfig, GridConfig, encode_targets, generate_scene, pillarize

gen, grid = GenConfig(), GridConfig()
scene = generate_scene(gen, seed=7)
print(f"{len(scene.boxes)} boxes, {len(scene.points)} points")
for b in scene.boxes:
    name = gen.classes[b.class_id].name
    print(f"  {name:10s} at ({b.center_x:6.2f}, {b.center_y:6.2f})  {b.length:.2f} x {b.width:.2f}  yaw {b.yaw:+.2f}")

# %%
# Pillar features: mean x, y, z, intensity, normalised count and occupancy per cell.
x = pillarize(scene, grid)
print("input map", x.shape, "occupied cells", int(x[5].sum()))

# %%
# Targets: a Gaussian per object centre on its class channel, regression at the centre cell.
t = encode_targets(scene, grid, gen.num_classes)
print("heatmap", t.heatmap.shape, "centre cells", int(t.valid_mask.sum()))
peak = t.heatmap.max(axis=0)
chars = " .:-=+*#%@"
for row in peak[::-2][::2]:
    print("".join(chars[min(int(v * len(chars)), len(chars) - 1)] for v in row[::2]))
