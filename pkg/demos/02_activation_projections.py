"""
Back-projecting the bottleneck into activation maps
===================================================

The mirror network reverses the detector layer by layer: transposed convs
share the forward weights, unpooling scatters to the recorded argmax
positions, ReLU gates drop negative projections.  Walking it from the
bottleneck produces activation projections A_0 (image space), A_1 (half
resolution), A_2 (quarter resolution) that light up where the network
looked.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from retinagen.activation import build_activation_net, heatmap_png, project
from retinagen.detector import DetectorSchedule, desk_config, forward_features, train_detector
from retinagen.synthetic import synth_fundus, synth_grade_dataset

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

# a briefly trained detector already responds more around lesions than an
# untrained one; a few hundred steps are enough for the demo
pairs = synth_grade_dataset(n=24, size=64, seed=0)
detector = train_detector(pairs, desk_config(64, 64),
                          DetectorSchedule(steps=200, seed=0, lr=0.002)).checkpoint

image, fov, centers = synth_fundus(64, seed=42, n_lesions=4)
features = forward_features(image, detector)

net = build_activation_net(detector)
print(f"mirror has {net.layer_count()} layers, taps at {net.taps}")

stack = project(features, net)
for level in sorted(stack.taps):
    arr = stack.tap(level)
    print(f"A_{level}: shape {arr.shape}, stride {stack.tap_strides[level]}, "
          f"min {arr.min():.2g} (non-negative after gating)")

fig, axes = plt.subplots(1, 4, figsize=(12, 3))
axes[0].imshow(image)
axes[0].set_title("input")
for ax, level in zip(axes[1:], (0, 1, 2)):
    ax.imshow(stack.scalar_map(level), cmap="inferno")
    ax.set_title(f"A_{level}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "projections.png"), dpi=120)

# A_0 also exports directly as a heat-map PNG and the stack as an archive
heatmap_png(os.path.join(OUT, "a0_heatmap.png"), stack.scalar_map(0))
stack.save(os.path.join(OUT, "activations.zip"))
print("figures in", OUT)
