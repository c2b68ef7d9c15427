"""Fixed feature extractors for the perceptual loss.

The default extractor is a VGG-19 trunk tapped at the second conv of the
fourth block, with frozen pre-trained weights.  Weights must come from a
real release (torchvision cache or a local state-dict file); a random-init
fallback is deliberately refused.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import PerceptualWeightsError

# VGG-19 conv trunk: channel widths per block, two to four convs each.
VGG19_LAYOUT = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)]
DEFAULT_TAP = "conv4_2"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Vgg19Features(nn.Module):
    """VGG-19 features up to (and including) the tap layer.

    Consumes NCHW RGB in [0, 1]; ImageNet normalization happens inside.
    """

    def __init__(self, tap=DEFAULT_TAP):
        super().__init__()
        layers = []
        names = []
        in_ch = 3
        for bi, (width, n_convs) in enumerate(VGG19_LAYOUT, start=1):
            for ci in range(1, n_convs + 1):
                layers.append(nn.Conv2d(in_ch, width, 3, padding=1))
                names.append(f"conv{bi}_{ci}")
                layers.append(nn.ReLU(inplace=False))
                names.append(f"relu{bi}_{ci}")
                in_ch = width
            layers.append(nn.MaxPool2d(2, 2))
            names.append(f"pool{bi}")
        if tap not in names:
            raise PerceptualWeightsError(f"unknown tap layer {tap!r}")
        cut = names.index(tap) + 1
        self.tap = tap
        self.trunk = nn.Sequential(*layers[:cut])
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        return self.trunk((x - self.mean) / self.std)


def load_vgg19_features(tap=DEFAULT_TAP, weights_path=None) -> Vgg19Features:
    """Build the frozen VGG-19 extractor from pre-trained weights.

    Tries ``weights_path`` (a torchvision-layout state dict) first, then the
    torchvision release.  Raises :class:`PerceptualWeightsError` when
    neither source is available; there is no silent random init.
    """
    net = Vgg19Features(tap=tap)
    if weights_path is not None:
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise PerceptualWeightsError(f"cannot load VGG-19 weights from {weights_path}: {exc}") from exc
    else:
        try:
            from torchvision.models import vgg19, VGG19_Weights

            state = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()
        except Exception as exc:
            raise PerceptualWeightsError(
                "pre-trained VGG-19 weights are unavailable (torchvision download "
                "failed and no weights_path was given)") from exc
    # the trunk mirrors the torchvision "features" sequence, so indices line up
    by_index = {n[len("features."):]: t for n, t in state.items() if n.startswith("features.")}
    own = dict(net.trunk.named_parameters())
    missing = [n for n in own if n not in by_index]
    if missing:
        raise PerceptualWeightsError(f"weights file does not cover the requested tap: {missing}")
    net.trunk.load_state_dict({n: by_index[n] for n in own})
    net.eval()
    net.requires_grad_(False)
    return net


def toy_feature_net(channels=4, kernel=3, seed=0) -> nn.Module:
    """Tiny frozen conv extractor for desk-scale runs and tests."""
    torch.manual_seed(seed)
    net = nn.Sequential(nn.Conv2d(3, channels, kernel, padding=kernel // 2), nn.ReLU())
    net.eval()
    net.requires_grad_(False)
    return net
