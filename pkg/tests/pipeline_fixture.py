"""Deterministic desk-scale pipeline shared by CLI/service tests and the
recorded API contract fixtures.  Every model and sample is seeded so the
same bytes come out on every run in this environment.
"""

import torch

from retinagen import descriptors as dsc
from retinagen import gan, preprocess
from retinagen.activation import build_activation_net, project
from retinagen.detector import (build_detector, desk_config, detector_to_checkpoint,
                                forward_features)
from retinagen.synthetic import synth_fundus, synth_vessel_mask

SIZE = 64


def build_models():
    det = build_detector(desk_config(SIZE, SIZE), seed=1)
    gcfg = gan.GeneratorConfig(image_size=SIZE, kernel=3,
                               down_channels=(8, 16, 16, 16, 16, 16),
                               up_channels=(16, 16, 16, 16, 8, 8),
                               desc_channels=(16, 32), noise_dim=32,
                               noise_channels=8)
    torch.manual_seed(2)
    gen = gan.FundusGenerator(gcfg)
    gen.eval()
    return det, gen


def build_sample_dir(root):
    """Write checkpoints, sample image/mask PNGs, and a descriptor file."""
    det, gen = build_models()
    detector_to_checkpoint(det).save(root / "detector.ckpt")
    gan.generator_to_checkpoint(gen).save(root / "generator.ckpt")

    image, fov, _ = synth_fundus(SIZE, seed=4, n_lesions=3)
    vessels = synth_vessel_mask(SIZE, seed=4)
    preprocess.save_image(root / "image.png", image)
    preprocess.save_mask(root / "vessels.png", vessels)
    preprocess.save_mask(root / "fov.png", fov)

    feats = forward_features(image, det)
    stack = project(feats, build_activation_net(det), keep="taps")
    boxes = dsc.locate_lesions(stack.scalar_map(0), sigma=2)
    dset = dsc.extract_descriptors(stack, boxes, image_id="image")
    dsc.save_descriptor_set(dset, root / "lesions.json")
    return root
