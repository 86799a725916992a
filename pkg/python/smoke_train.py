#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Smoke training on synthetic fingerprints.

Trains on 10 fingers x 8 impressions (two impressions per finger held out)
and checks that the epoch-mean L_all at least halves and that the held-out
EER beats the untrained network's. Run from the python/ directory:

    python smoke_train.py [--config configs/smoke.json] [--train.epochs 20]
"""

import argparse
import logging
import os
import sys
import time

import pandas as pd

from cli import parse_overrides
from config import ModelConfig, load_cli_config, sync_ablation_flags
from data.loader import split_train_val
from data.synthetic import synthetic_index
from model.network import MultiTaskModel
from training.trainer import METRICS_FILE, seed_everything, train, validate

MAX_EER = 0.20


def main():
    script_dir = os.path.dirname(os.path.abspath(__file__))
    parser = argparse.ArgumentParser(description="Smoke training on synthetic fingerprints")
    parser.add_argument("--config", default=os.path.join(script_dir, "configs", "smoke.json"))
    args, extra = parser.parse_known_args()
    try:
        overrides = parse_overrides(extra)
    except ValueError as e:
        parser.error(str(e))

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config = load_cli_config(args.config, overrides)
    data = config.data
    index = synthetic_index(data.synthetic_fingers, data.synthetic_impressions, data.synthesis,
                            seed=config.train.seed)
    train_index, val_index = split_train_val(index, data.impressions_for_val)

    model_config = sync_ablation_flags(config.model, config.train)
    model_config = ModelConfig.model_validate({**model_config.model_dump(), "num_classes": index.class_count})
    seed_everything(config.train.seed, config.train.strict_determinism)
    untrained = validate(MultiTaskModel(model_config), val_index, config.train, data, compute_eer=True)
    print(f"Untrained: val L_all {untrained.L_all:.4f}, EER {untrained.eer:.2%}")

    checkpoint_dir = os.path.join(config.output_dir, config.train.checkpoint_dir)
    train_config = config.train.model_copy(update={"checkpoint_dir": checkpoint_dir})
    start = time.time()
    checkpoint = train(train_config, train_index, val_index, config.model, config.augment, data)
    elapsed = time.time() - start

    metrics = pd.read_csv(os.path.join(checkpoint_dir, METRICS_FILE))
    first, last = metrics["train_L_all"].iloc[0], metrics["train_L_all"].iloc[-1]
    trained = validate(checkpoint, val_index, config.train, data, compute_eer=True)

    print("\n=== Smoke Training Summary ===")
    print(f"Epochs: {len(metrics)} in {elapsed / 60:.1f} min")
    print(f"L_all: epoch 1 {first:.4f} -> last {last:.4f} (ratio {last / first:.3f})")
    print(f"Held-out EER: untrained {untrained.eer:.2%}, trained {trained.eer:.2%}")
    print(f"Accuracy: {', '.join(f'{k} {v:.2f}' for k, v in trained.accuracy.items())}")

    passed = last <= 0.5 * first and trained.eer is not None and trained.eer <= MAX_EER
    print("PASSED" if passed else "FAILED")
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
