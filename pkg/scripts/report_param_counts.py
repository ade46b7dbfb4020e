#!/usr/bin/env python3
"""Print trainable-parameter counts for every full-size architecture.

Builds each encoder scale (b0-b5) plus the attention U-Net and prints a
table mirroring the backbone-comparison report layout. CPU-only, no
training; takes well under a minute.
"""

import gc

from glomseg.models import ModelConfig, build_model, count_parameters


def main():
    print(f"{'model':<16}{'params':>12}")
    print("-" * 28)
    for variant in ("b0", "b1", "b2", "b3", "b4", "b5"):
        model = build_model(ModelConfig(arch="segformer", variant=variant), seed=0)
        print(f"segformer_{variant:<6}{count_parameters(model) / 1e6:>11.1f}M")
        del model
        gc.collect()
    unet = build_model(ModelConfig(arch="att_unet"), seed=0)
    print(f"{'att_unet':<16}{count_parameters(unet) / 1e6:>11.1f}M")


if __name__ == "__main__":
    main()
