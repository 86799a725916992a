#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Command-line entry point.

    python cli.py train --config configs/smoke.json --train.epochs 5
    python cli.py extract --checkpoint runs/checkpoints/best.h5 --dataset DB1_A --out emb.fpe
    python cli.py match --embeddings emb.fpe 001_1 001_2
    python cli.py eval --embeddings emb.fpe --dataset DB1_A --protocol fvc_standard
    python cli.py synth --count 80 --out synthetic
    python cli.py augment-preview --image 001_1.png --seed 3 --out preview

Every command accepts ``--config``, ``--seed``, ``--log-level`` and dotted
``--section.key value`` overrides. Exit codes: 0 success, 2 config/usage,
3 input data, 4 partial processing.
"""

import argparse
import logging
import os
import sys
import traceback
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from config import CliConfig, load_cli_config
from data.augment import augment_preview, config_for_side
from data.loader import load_dataset, parse_minutiae_file, read_image_file, save_image, split_train_val, write_minutiae_file
from data.records import MinutiaSet
from data.synthetic import synthetic_index, write_synthetic_dataset
from errors import (EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, DatasetFormatError, InputDataError,
                    MissingEmbeddingError, exit_code_for)
from evaluation.evaluate import evaluate_dataset, match_score, write_report
from model.checkpoint import load_checkpoint
from model.embedding_store import read_embeddings, write_embeddings
from model.network import extract_embeddings
from training.trainer import make_preprocessor, train

logger = logging.getLogger(__name__)

LAYOUTS = ("fvc", "molf", "flat")


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False, formatter_class=formatter)
    common.add_argument("--config", default=None, help="JSON config with sections model/train/augment/data/eval")
    common.add_argument("--seed", type=int, default=None, help="Seed for all randomness (overrides train.seed)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")

    parser = argparse.ArgumentParser(description="Fixed-length fingerprint embedding toolkit",
                                     formatter_class=formatter)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", parents=[common], formatter_class=formatter,
                            help="Train a model on data.root or synthetic data")
    p.add_argument("--output-dir", default=None, help="Overrides output_dir")

    p = commands.add_parser("extract", parents=[common], formatter_class=formatter,
                            help="Write an FPE1 embedding file for a dataset directory")
    p.add_argument("--checkpoint", required=True, help="Checkpoint archive (.h5)")
    p.add_argument("--dataset", required=True, help="Dataset directory")
    p.add_argument("--layout", default="fvc", choices=LAYOUTS, help="Dataset filename convention")
    p.add_argument("--out", required=True, help="Embedding file to write")

    p = commands.add_parser("match", parents=[common], formatter_class=formatter,
                            help="Print the matching score of two embedded images")
    p.add_argument("--embeddings", required=True, help="FPE1 embedding file")
    p.add_argument("id_a", help="First image id")
    p.add_argument("id_b", help="Second image id")

    p = commands.add_parser("eval", parents=[common], formatter_class=formatter,
                            help="Compute the EER of an embedding file over a dataset")
    p.add_argument("--embeddings", required=True, help="FPE1 embedding file")
    p.add_argument("--dataset", required=True, help="Dataset directory")
    p.add_argument("--layout", default="fvc", choices=LAYOUTS, help="Dataset filename convention")
    p.add_argument("--protocol", default=None, choices=["all_pairs", "fvc_standard"],
                   help="Pair protocol (default: eval.protocol)")
    p.add_argument("--out", default=None, help="Report directory (default: <output_dir>/eval)")

    p = commands.add_parser("synth", parents=[common], formatter_class=formatter,
                            help="Write synthetic fingerprints with .min sidecars")
    p.add_argument("--count", type=int, default=10, help="Number of images")
    p.add_argument("--impressions", type=int, default=None, help="Impressions per finger (default: data.synthetic_impressions)")
    p.add_argument("--out", required=True, help="Output directory")

    p = commands.add_parser("augment-preview", parents=[common], formatter_class=formatter,
                            help="Write the original and one image per augmentation")
    p.add_argument("--image", default=None, help="Image file (default: a synthetic fingerprint)")
    p.add_argument("--minutiae", default=None, help="Minutiae file (default: the image's .min sibling)")
    p.add_argument("--out", required=True, help="Output directory")
    return parser


def parse_overrides(extra: Sequence[str]) -> List[Tuple[str, str]]:
    """Turn ``--section.key value`` tokens into (path, value) pairs."""
    overrides = []
    tokens = list(extra)
    while tokens:
        flag = tokens.pop(0)
        if not flag.startswith("--") or "." not in flag:
            raise ValueError(f"unrecognized argument {flag}")
        if "=" in flag:
            path, value = flag[2:].split("=", 1)
        elif tokens:
            path, value = flag[2:], tokens.pop(0)
        else:
            raise ValueError(f"{flag} needs a value")
        overrides.append((path, value))
    return overrides


def resolve_config(args: argparse.Namespace, overrides: Sequence[Tuple[str, str]]) -> CliConfig:
    overrides = list(overrides)
    if args.seed is not None:
        overrides.append(("train.seed", str(args.seed)))
    if getattr(args, "output_dir", None):
        overrides.append(("output_dir", args.output_dir))
    return load_cli_config(args.config, overrides)


def _require_dir(path: str) -> None:
    if not os.path.isdir(path):
        raise InputDataError(f"Dataset directory not found: {path}")


def cmd_train(config: CliConfig, args: argparse.Namespace) -> int:
    data = config.data
    if data.synthetic:
        index = synthetic_index(data.synthetic_fingers, data.synthetic_impressions, data.synthesis,
                                seed=config.train.seed)
    else:
        if data.root is None:
            raise InputDataError("data.root is not set and data.synthetic is off")
        _require_dir(data.root)
        index = load_dataset(data.root, data.layout)
    train_index, val_index = split_train_val(index, data.impressions_for_val)

    checkpoint_dir = config.train.checkpoint_dir
    if not os.path.isabs(checkpoint_dir):
        checkpoint_dir = os.path.join(config.output_dir, checkpoint_dir)
    train_config = config.train.model_copy(update={"checkpoint_dir": checkpoint_dir})

    checkpoint = train(train_config, train_index, val_index, config.model, config.augment, data)
    print(f"Trained {checkpoint.epoch} epochs on {len(train_index)} images "
          f"({train_index.class_count} classes)")
    print(f"Checkpoint: {os.path.join(checkpoint_dir, 'best.h5')}")
    return EXIT_OK


def cmd_extract(config: CliConfig, args: argparse.Namespace) -> int:
    _require_dir(args.dataset)
    checkpoint = load_checkpoint(args.checkpoint)
    index = load_dataset(args.dataset, args.layout)
    model = checkpoint.build_model()
    preprocessor = make_preprocessor(checkpoint.model, checkpoint.data or config.data)

    image_ids, images, failed = [], [], []
    for record in index.records:
        try:
            image, _ = preprocessor.prepare(read_image_file(record.path))
        except (InputDataError, DatasetFormatError) as e:
            logger.warning(f"Skipping {record.image_id}: {e}")
            failed.append(record.image_id)
            continue
        image_ids.append(record.image_id)
        images.append(image.pixels)

    vectors = extract_embeddings(model, images, config.eval.batch_size)
    write_embeddings(args.out, image_ids, vectors)
    print(f"Wrote {len(image_ids)} embeddings of dimension {checkpoint.model.embedding_size} to {args.out}")
    if failed:
        print(f"Skipped {len(failed)} unreadable images", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_match(config: CliConfig, args: argparse.Namespace) -> int:
    embeddings = read_embeddings(args.embeddings)
    unknown = [image_id for image_id in (args.id_a, args.id_b) if image_id not in embeddings]
    if unknown:
        print(f"error: unknown image id(s): {', '.join(unknown)}", file=sys.stderr)
        return EXIT_CONFIG
    score = match_score(embeddings[args.id_a], embeddings[args.id_b])
    print(f"{score:.6f}")
    return EXIT_OK


def cmd_eval(config: CliConfig, args: argparse.Namespace) -> int:
    _require_dir(args.dataset)
    embeddings = read_embeddings(args.embeddings)
    index = load_dataset(args.dataset, args.layout)
    protocol = args.protocol or config.eval.protocol
    out_dir = args.out or os.path.join(config.output_dir, "eval")

    report = evaluate_dataset(index, embeddings, protocol)
    write_report(report, out_dir)
    print(f"EER {report.eer * 100:.2f}%")
    print(f"Genuine pairs: {report.genuine_count}")
    print(f"Impostor pairs: {report.impostor_count}")
    print(f"Report: {out_dir}")
    return EXIT_OK


def cmd_synth(config: CliConfig, args: argparse.Namespace) -> int:
    if args.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    impressions = args.impressions or config.data.synthetic_impressions
    paths = write_synthetic_dataset(args.out, args.count, impressions, config.data.synthesis,
                                    seed=config.train.seed)
    print(f"Created {len(paths)} synthetic fingerprints in {args.out}")
    return EXIT_OK


def _preview_source(config: CliConfig, args: argparse.Namespace):
    if args.image is None:
        from data.synthetic import generate_synthetic_fingerprint

        return generate_synthetic_fingerprint(config.train.seed, config.data.synthesis)
    image = read_image_file(args.image)
    minutiae_path = args.minutiae or os.path.splitext(args.image)[0] + ".min"
    if os.path.isfile(minutiae_path):
        return image, parse_minutiae_file(minutiae_path, image.pixels.shape, args.image)
    if args.minutiae:
        raise InputDataError(f"Minutiae file not found: {args.minutiae}")
    return image, MinutiaSet(image_ref=args.image)


def cmd_augment_preview(config: CliConfig, args: argparse.Namespace) -> int:
    image, minutiae = _preview_source(config, args)
    augment_config = config_for_side(config.augment, int(max(image.pixels.shape)))
    panels = augment_preview(image, minutiae, augment_config, config.train.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise InputDataError(f"Cannot create {args.out}: {e}")
    for name, (panel, panel_minutiae) in panels.items():
        save_image(panel, os.path.join(args.out, f"{name}.png"))
        write_minutiae_file(panel_minutiae, os.path.join(args.out, f"{name}.min"))
    print(f"Wrote {len(panels)} panels to {args.out}: {', '.join(panels)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "extract": cmd_extract,
    "match": cmd_match,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "augment-preview": cmd_augment_preview,
}


def _field_path(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in error.errors())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args, parse_overrides(extra))
    except ValidationError as e:
        print(f"error: invalid configuration: {_field_path(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputDataError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e) if isinstance(e, InputDataError) else EXIT_CONFIG
    if args.seed is not None:
        np.random.seed(args.seed % (2 ** 32))

    try:
        return COMMANDS[args.command](config, args)
    except MissingEmbeddingError as e:
        print(f"error: embeddings do not cover the dataset; missing: {', '.join(e.image_ids)}", file=sys.stderr)
        return exit_code_for(e)
    except ValidationError as e:
        print(f"error: {_field_path(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        code = exit_code_for(e)
        print(f"error: {e}", file=sys.stderr)
        if code == EXIT_PARTIAL:
            traceback.print_exc()
        return code


if __name__ == "__main__":
    sys.exit(main())
