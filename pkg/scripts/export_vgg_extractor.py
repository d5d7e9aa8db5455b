#!/usr/bin/env python3
"""
VGG-19 Extractor Export
Writes the first five conv layers of torchvision's pretrained VGG-19 in the
extractor weight format used by the perceptual loss.

Run from the repository root:
    python -m scripts.export_vgg_extractor --out weights/vgg19_first5.rrfx

Only the conv weights and biases are exported. The max-pooling layers that
sit between VGG blocks have no counterpart in the extractor, so stages 3-5
see full-resolution maps, and inputs are fed in [0, 1] without ImageNet
mean/std normalisation.
"""

import sys
import argparse
from pathlib import Path

from src.core.autodiff import ConvLayerSpec, Tensor
from src.core.loss import FeatureExtractor, save_extractor_weights

STAGES = 5


def export_vgg_extractor(out_path: Path, stages: int = STAGES) -> Path:
    """
    Export the first `stages` conv layers of a pretrained VGG-19.

    Args:
        out_path: Destination of the weight file
        stages: Number of conv layers to keep
    """
    try:
        from torchvision.models import VGG19_Weights, vgg19
    except ImportError:
        print("Error: Required packages not installed.")
        print("Please install: pip install torch torchvision")
        sys.exit(1)

    print("Loading pretrained VGG-19 (downloads on first use)...")
    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    convs = [m for m in model.features if m.__class__.__name__ == "Conv2d"][:stages]

    layers = []
    for n, conv in enumerate(convs, start=1):
        weight = conv.weight.detach().double().numpy()
        bias = conv.bias.detach().double().numpy()
        out_ch, in_ch, k, _ = weight.shape
        print(f"  phi{n}: {in_ch} -> {out_ch}, {k}x{k}")
        layers.append(ConvLayerSpec(in_ch, out_ch, k, Tensor(weight, name=f"phi{n}.weight"),
                                    Tensor(bias, name=f"phi{n}.bias"), name=f"phi{n}"))

    fx = FeatureExtractor(layers, {"source": "torchvision vgg19 IMAGENET1K_V1"})
    path = save_extractor_weights(fx, out_path)
    print(f"Extractor weights written to {path}")
    return path


def main():
    parser = argparse.ArgumentParser(description="Export VGG-19 conv layers for the perceptual loss")
    parser.add_argument("--out", type=Path, required=True, help="output weight file")
    parser.add_argument("--stages", type=int, default=STAGES, help="number of conv layers (default: 5)")
    args = parser.parse_args()

    export_vgg_extractor(args.out, args.stages)


if __name__ == "__main__":
    main()
