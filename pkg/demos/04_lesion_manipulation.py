"""
Manipulating descriptor sets
============================

Descriptors are the manipulable pathology payload: relocate a lesion by
changing its coordinates, clone or remove lesions to change the count,
subsample a fraction, or multiply every lesion to random positions inside
the field of view.  Crops never change; only geometry and cardinality do.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.patches as patches
import matplotlib.pyplot as plt

from retinagen.descriptors import clone_remove, multiply, relocate, sample_subset
from retinagen.synthetic import disk_mask, synth_descriptor_set

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

size = 128
dset = synth_descriptor_set(size, [(30, 40), (60, 80), (90, 50)], box=12, seed=1)
fov = disk_mask(size)


def show(ax, title, current):
    ax.imshow(fov, cmap="gray", vmin=0, vmax=2)
    colors = plt.colormaps["tab10"]
    for d in current.descriptors:
        ax.add_patch(patches.Rectangle((d.box.left, d.box.top), d.box.width,
                                       d.box.height, fill=False,
                                       edgecolor=colors(d.id % 10), linewidth=2))
    ax.set_title(f"{title} ({len(current)})")
    ax.axis("off")


fig, axes = plt.subplots(1, 5, figsize=(15, 3.2))
show(axes[0], "original", dset)

moved = relocate(dset, 0, 80, 90)
show(axes[1], "relocate #0", moved)

edited = clone_remove(dset, [("clone", 1, 20, 20), ("remove", 2)])
show(axes[2], "clone #1, remove #2", edited)

halved = sample_subset(dset, 0.5, seed=7)
show(axes[3], "keep 50%", halved)

tripled = multiply(dset, 3, seed=7, fov_mask=fov)
show(axes[4], "multiply x3 in FOV", tripled)

fig.tight_layout()
fig.savefig(os.path.join(OUT, "manipulations.png"), dpi=120)

print("original ids:", dset.ids())
print("after clone/remove:", edited.ids())
print("after multiply x3:", len(tripled), "descriptors, all inside the FOV")
print("figure in", OUT)
