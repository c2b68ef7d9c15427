"""
Sweeping the perceptual-loss weight
===================================

The perceptual term anchors the generator to the reference image's feature
statistics.  This sweep trains one desk-scale model per weight w_p (0 turns
the term off) with identical seeds and emits a side-by-side gallery plus
final losses, one column per weight.
"""

import os

from retinagen.detector import build_detector, desk_config
from retinagen.gan import DiscriminatorConfig, GanSchedule, GeneratorConfig
from retinagen.metrics import ablation_percept
from retinagen.perceptual import toy_feature_net
from retinagen.synthetic import synth_gan_dataset

OUT = os.path.join(os.path.dirname(__file__), "output", "wp_sweep")

size = 64
triples = synth_gan_dataset(n=4, size=size, seed=0, channels=(8, 8))
gen_config = GeneratorConfig(image_size=size, kernel=3,
                             down_channels=(16, 32, 32, 32, 32, 32),
                             up_channels=(32, 32, 32, 32, 16, 16),
                             desc_channels=(8, 8), noise_dim=32, noise_channels=8)
disc_config = DiscriminatorConfig(image_size=size, kernel=3,
                                  channels=(16, 32, 32, 32, 32))
schedule = GanSchedule(steps=150, seed=0, save_every=150)

weights = [0.0, 0.1, 1.0, 10.0]
rows, grid_path = ablation_percept(
    weights, triples, gen_config, disc_config, schedule,
    toy_feature_net(seed=2), build_detector(desk_config(size, 32), seed=1),
    out_dir=OUT)

print(f"{'w_p':>6} {'final L_G':>12} {'final L_D':>12}")
for r in rows:
    if r["error"]:
        print(f"{r['w_p']:>6} failed: {r['error']}")
    else:
        print(f"{r['w_p']:>6} {r['final_L_G']:>12.4f} {r['final_L_D']:>12.4f}")
print("gallery (one column per weight):", grid_path)
