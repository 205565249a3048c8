"""
Synthetic scenes
================

Each scene pairs a source object (on a flat gray card) with a target view of
the same object pasted into a textured background.  The hint is the target
with the box blacked out, so the model only has to paint inside the box.
"""

# %%
import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from objcompose import generate_scene, generate_views

scene = generate_scene(7)
print(scene.scene_id, scene.box, scene.identity.shape)

# %% The hint agrees with the target everywhere outside the box.
inside = scene.box.mask(64)
print("outside equal:", np.array_equal(scene.hint_image[~inside], scene.target_image[~inside]))
print("inside black:", not scene.hint_image[inside].any())

# %% Extra views of the same object, used later to probe the condition vector.
views = generate_views(scene, 4, seed=1)

fig, axes = plt.subplots(1, 8, figsize=(14, 2))
panels = [scene.source_image, scene.hint_image, scene.box_viz, scene.target_image, *views]
for ax, img, title in zip(axes, panels, ["source", "hint", "box", "target", "view 1", "view 2", "view 3", "view 4"]):
    ax.imshow(img)
    ax.set_title(title, fontsize=8)
    ax.axis("off")
fig.savefig("scenes.png", dpi=100, bbox_inches="tight")
