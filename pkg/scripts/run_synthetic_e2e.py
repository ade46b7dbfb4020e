#!/usr/bin/env python3
"""Desk-scale end-to-end demo on the bundled synthetic fixture.

Generates a fixture (8 labeled / 64 unlabeled / 20 validation patches),
then trains supervised, FixMatch and UniMatch models with a small labeled
subset and prints a held-out comparison table. Everything runs on CPU in
a few minutes.

Usage: python scripts/run_synthetic_e2e.py [workdir] [--seed N] [--epochs N]
"""

import argparse
import time
from pathlib import Path

from glomseg.augment import StrongAugSpec, WeakAugSpec
from glomseg.catalog import Role, load_manifest, sample_label_fraction
from glomseg.metrics import evaluate, format_report_table
from glomseg.models import ModelConfig, build_model
from glomseg.synthetic import FixtureSpec, generate_fixture
from glomseg.training import TrainConfig, train


def run_method(method, labeled, unlabeled, val, seed, epochs):
    cfg = TrainConfig(method=method, lr=0.05, lr_schedule="poly",
                      batch_size_labeled=min(4, len(labeled)),
                      batch_size_unlabeled=8, epochs=epochs, seed=seed,
                      dice_loss_weight=1.0)
    model = build_model(ModelConfig(variant="tiny"), seed=seed)
    t0 = time.monotonic()
    train(model, labeled, unlabeled if method != "supervised" else None,
          cfg, WeakAugSpec(crop_size=64), StrongAugSpec())
    report = evaluate(model, val, dataset_id="synthetic-val", method=method)
    print(f"  {method}: dice={report.dice:.3f} ({time.monotonic() - t0:.0f}s)")
    return report


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("workdir", nargs="?", default="e2e-demo")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=200)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    print(f"generating fixture under {workdir} ...")
    spec = FixtureSpec(size=64, n_labeled_wsis=8, labeled_per_wsi=1,
                       n_unlabeled_wsis=16, unlabeled_per_wsi=4, n_centers=4,
                       n_val_wsis=5, val_per_wsi=4, seed=args.seed)
    paths = generate_fixture(workdir, spec)

    labeled = load_manifest(paths["labeled"])
    unlabeled = load_manifest(paths["unlabeled"])
    val = load_manifest(paths["val"], role=Role.EXTERNAL_VALIDATION)

    two_labeled = sample_label_fraction(labeled, "1/4", seed=args.seed)
    print(f"training with {len(two_labeled)} labeled / {len(unlabeled)} unlabeled patches")
    reports = [run_method(m, two_labeled, unlabeled, val, args.seed, args.epochs)
               for m in ("supervised", "fixmatch", "unimatch")]
    print()
    print(format_report_table(reports))


if __name__ == "__main__":
    main()
