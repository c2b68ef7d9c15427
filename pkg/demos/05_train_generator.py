"""
Adversarial training of the fundus generator
============================================

The generator turns a binary vessel mask, a descriptor set, and a noise
code into a fundus image.  Training pits it against a conditional
discriminator (updated once for every two generator steps) and regularizes
with a perceptual loss on fixed features and a severity loss on a frozen
detector.  This desk-scale run uses a toy feature net and a small frozen
detector; swap in the pre-trained VGG-19 extractor for real training.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from retinagen.detector import build_detector, desk_config
from retinagen.gan import (DiscriminatorConfig, GanSchedule, GeneratorConfig,
                           generate, sample_noise, train_gan)
from retinagen.perceptual import toy_feature_net
from retinagen.synthetic import synth_gan_dataset

OUT = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(OUT, exist_ok=True)

size = 64
triples = synth_gan_dataset(n=8, size=size, seed=0, channels=(8, 8))
print(f"dataset: {len(triples)} (image, vessel mask, descriptor set) triples")

gen_config = GeneratorConfig(image_size=size, kernel=3,
                             down_channels=(16, 32, 32, 32, 32, 32),
                             up_channels=(32, 32, 32, 32, 16, 16),
                             desc_channels=(8, 8), noise_dim=64, noise_channels=16)
disc_config = DiscriminatorConfig(image_size=size, kernel=3,
                                  channels=(16, 32, 32, 32, 32))
frozen_detector = build_detector(desk_config(size, 32), seed=1)
feature_net = toy_feature_net(seed=2)

schedule = GanSchedule(steps=450, seed=0, save_every=150,
                       log_path=os.path.join(OUT, "gan_loss_log.csv"))
result = train_gan(triples, gen_config, disc_config, schedule,
                   feature_net, frozen_detector)
print(f"updates: {result.g_updates} generator / {result.d_updates} discriminator")

g_steps = [r["step"] for r in result.log_rows if r["L_G"] != ""]
g_loss = [r["L_G"] for r in result.log_rows if r["L_G"] != ""]
d_steps = [r["step"] for r in result.log_rows if r["L_D"] != ""]
d_loss = [r["L_D"] for r in result.log_rows if r["L_D"] != ""]
plt.figure(figsize=(6, 3))
plt.plot(g_steps, g_loss, label="generator")
plt.plot(d_steps, d_loss, label="discriminator")
plt.xlabel("step")
plt.ylabel("loss")
plt.legend()
plt.tight_layout()
plt.savefig(os.path.join(OUT, "gan_losses.png"), dpi=120)

# synthesis: same vessels and descriptors, fresh test-time noise (sigma 0.1)
image, vessels, dset = triples[0]
fake = generate(vessels, dset, sample_noise(dim=64, seed=5), result.generator)
empty = type(dset)(descriptors=[], image_size=size)
lesion_free = generate(vessels, empty, sample_noise(dim=64, seed=5), result.generator)

fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
for ax, (img, title) in zip(axes, [(image, "reference"), (vessels, "vessels"),
                                   (fake, "synthesized"),
                                   (lesion_free, "no descriptors")]):
    ax.imshow(img, cmap="gray" if img.ndim == 2 else None)
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "synthesis.png"), dpi=120)
print("figures and loss log in", OUT)
