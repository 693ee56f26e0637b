#!/usr/bin/env python3
"""
Finite-difference check of every differentiable op

Usage:
    python scripts/check_gradients.py [--seeds 5] [--tolerance 1e-4]
"""

import argparse
import os
import sys

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import numpy as np

from src.autodiff.engine import gradients
from src.autodiff.gradcheck import GRADIENT_CASES, check_op
from src.constants import GRADCHECK_TOLERANCE
from src.models.dual_encoder import (
    ConvBlockConfig,
    DualEncoderModel,
    TextEncoderConfig,
    VisionEncoderConfig,
    build_vocabulary,
)
from src.models.objective import ClassPromptSet, ClassWeights, weighted_contrastive_loss
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


def check_ops(seeds: int, tolerance: float) -> bool:
    print("1️⃣  Checking individual ops...")
    failures = []
    for name in GRADIENT_CASES:
        worst = max(check_op(name, seed) for seed in range(seeds))
        mark = "✅" if worst <= tolerance else "❌"
        print(f"   {mark} {name:<20} max relative error {worst:.2e}")
        if worst > tolerance:
            failures.append(name)
    print()
    if failures:
        print(f"   ❌ {len(failures)} op(s) above tolerance: {', '.join(failures)}")
        return False
    return True


def check_model(tolerance: float) -> bool:
    """Compare a few end-to-end loss gradients against finite differences."""
    print("2️⃣  Checking the full contrastive loss on a tiny model...")
    prompts = ClassPromptSet.default()
    vision = VisionEncoderConfig(
        input_size=16,
        conv_blocks=[ConvBlockConfig(channels=4), ConvBlockConfig(channels=4)],
        embed_dim=8,
    )
    text = TextEncoderConfig(vocabulary=build_vocabulary(prompts.prompts), token_embed_dim=6, embed_dim=8)
    model = DualEncoderModel.initialize(vision, text, seed=3)
    rng = np.random.default_rng(3)
    images = rng.uniform(0.0, 1.0, size=(4, 16, 16))
    labels = [0, 1, 2, 3]
    weights = ClassWeights(prompts.classes, (0.5, 1.0, 1.5, 2.0))

    def loss_value() -> float:
        return float(weighted_contrastive_loss(model.logits(images, prompts.prompts), labels, weights).value)

    loss = weighted_contrastive_loss(model.logits(images, prompts.prompts), labels, weights)
    params = model.params
    analytic = gradients(loss, list(params.values()))

    h = 1e-5
    worst = 0.0
    for (name, node), grad in zip(params.items(), analytic):
        flat = node.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            original = flat[i]
            flat[i] = original + h
            plus = loss_value()
            flat[i] = original - h
            minus = loss_value()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[i]
            err = abs(exact - numeric) / max(abs(exact) + abs(numeric), 1e-8)
            worst = max(worst, err)
    mark = "✅" if worst <= tolerance * 10 else "❌"
    print(f"   {mark} sampled {len(params)} parameter tensors, max relative error {worst:.2e}")
    print()
    return worst <= tolerance * 10


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    args = parser.parse_args()

    print("=" * 60)
    print("GRADIENT CHECK")
    print("=" * 60)
    print()

    ok = check_ops(args.seeds, args.tolerance) and check_model(args.tolerance)

    print("=" * 60)
    print("✅ ALL GRADIENTS MATCH" if ok else "❌ GRADIENT CHECK FAILED")
    print("=" * 60)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
