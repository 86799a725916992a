#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Dataset ingestion: directory layouts, minutia sidecar files, image I/O and
train/validation splits.

Layouts:
    fvc   ``NNN_I.<ext>`` in one directory (finger NNN, impression I)
    molf  one subdirectory per sensor DB, each following the fvc convention;
          finger numbers identify the same finger across DBs
    flat  ``<fingerlabel>_<impression>.<ext>`` in one directory

A minutia sidecar shares the image basename with the extension ``.min``.
"""

import logging
import os
import re
from collections import defaultdict
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from data.records import (DatasetIndex, DatasetRecord, FingerprintImage, Minutia,
                          MinutiaSet, SynthesisSpec)
from errors import (DatasetFormatError, EmptyDatasetError, InputDataError,
                    MinutiaRangeError, SplitError)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ("tif", "tiff", "bmp", "png", "jpg", "jpeg", "pgm")
_EXT = "|".join(IMAGE_EXTENSIONS)
_FVC_NAME = re.compile(rf"^(\d+)_(\d+)\.({_EXT})$", re.IGNORECASE)
_FLAT_NAME = re.compile(rf"^(.+)_(\d+)\.({_EXT})$", re.IGNORECASE)
_MINUTIA_KINDS = ("ending", "bifurcation", "unknown")


def _is_image(name: str) -> bool:
    return name.rsplit(".", 1)[-1].lower() in IMAGE_EXTENSIONS and ".enh." not in name


def _scan_directory(directory: str, pattern: "re.Pattern", source_tag: str,
                    root: str) -> List[Tuple[str, int, str, str]]:
    """Return (label, impression, source_tag, path) for every matching image."""
    found = []
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if not os.path.isfile(path) or not _is_image(name):
            continue
        match = pattern.match(name)
        if match is None:
            logger.warning(f"Skipping {os.path.relpath(path, root)}: name does not follow the layout")
            continue
        found.append((match.group(1), int(match.group(2)), source_tag, path))
    return found


def _label_sort_key(label: str):
    return (0, int(label), "") if label.isdigit() else (1, 0, label)


def load_dataset(root: str, layout: str = "fvc") -> DatasetIndex:
    """
    Index a fingerprint dataset directory.

    Args:
        root (str): Dataset directory
        layout (str): One of ``fvc``, ``molf``, ``flat``

    Returns:
        DatasetIndex: Records sorted by (finger_id, impression_id) with
        contiguous finger labels

    Raises:
        InputDataError: If the directory does not exist
        EmptyDatasetError: If no image follows the layout
        DatasetFormatError: If a (finger, impression) pair occurs twice
    """
    if not os.path.isdir(root):
        raise InputDataError(f"Dataset directory not found: {root}")

    root_tag = os.path.basename(os.path.normpath(root))
    if layout == "fvc":
        found = _scan_directory(root, _FVC_NAME, root_tag, root)
    elif layout == "flat":
        found = _scan_directory(root, _FLAT_NAME, root_tag, root)
    elif layout == "molf":
        found = []
        for name in sorted(os.listdir(root)):
            sub = os.path.join(root, name)
            if os.path.isdir(sub):
                found.extend(_scan_directory(sub, _FVC_NAME, name, root))
    else:
        raise ValueError(f"Unknown layout: {layout}")

    if not found:
        raise EmptyDatasetError(f"No {layout} images found in {root}")

    # fvc numbers 1 and 01 name the same finger
    def identity(label: str) -> str:
        return str(int(label)) if layout != "flat" else label

    labels = sorted({identity(label) for label, _, _, _ in found}, key=_label_sort_key)
    relabel = {label: i for i, label in enumerate(labels)}

    seen: Dict[Tuple[str, str, int], str] = {}
    records = []
    for label, impression, source_tag, path in found:
        key = (source_tag, identity(label), impression)
        if key in seen:
            raise DatasetFormatError(
                f"Duplicate finger {label} impression {impression} in {source_tag}: "
                f"{seen[key]} and {path}")
        seen[key] = path
        stem = os.path.splitext(path)[0]
        sidecar = stem + ".min"
        image_id = os.path.relpath(stem, root).replace(os.sep, "/")
        records.append(DatasetRecord(
            image_id=image_id, finger_id=relabel[identity(label)], impression_id=impression,
            source_tag=source_tag, path=path,
            minutiae_path=sidecar if os.path.isfile(sidecar) else None,
            original_label=identity(label)))

    records.sort(key=lambda r: (r.finger_id, r.impression_id, r.source_tag))
    logger.info(f"Indexed {len(records)} images of {len(labels)} fingers from {root} ({layout})")
    return DatasetIndex(records=tuple(records), class_count=len(labels))


def parse_minutiae_file(path: str, image_shape: Optional[Tuple[int, int]] = None,
                        image_ref: Optional[str] = None) -> MinutiaSet:
    """
    Read a minutia text file: one ``x y theta kind`` per line, ``#`` comments.

    Args:
        path (str): The sidecar file
        image_shape (tuple): Optional (height, width) used for the range check
        image_ref (str): Identifier stored in the returned set

    Returns:
        MinutiaSet: Minutiae in file order, theta wrapped into [0, 2*pi)

    Raises:
        InputDataError: If the file does not exist
        DatasetFormatError: If a line is malformed (with its line number)
        MinutiaRangeError: If a coordinate lies outside the image
    """
    if not os.path.isfile(path):
        raise InputDataError(f"Minutiae file not found: {path}")

    items = []
    with open(path, "r") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise DatasetFormatError(f"expected 'x y theta kind', got {raw.strip()!r} in {path}", line=number)
            try:
                x, y, theta = (float(v) for v in fields[:3])
            except ValueError:
                raise DatasetFormatError(f"non-numeric field in {raw.strip()!r} in {path}", line=number)
            kind = fields[3].lower() if len(fields) == 4 else "unknown"
            if kind not in _MINUTIA_KINDS:
                raise DatasetFormatError(f"unknown minutia kind {fields[3]!r} in {path}", line=number)
            if not all(np.isfinite((x, y, theta))):
                raise DatasetFormatError(f"non-finite value in {path}", line=number)
            if x < 0 or y < 0 or (image_shape is not None and (x >= image_shape[1] or y >= image_shape[0])):
                raise MinutiaRangeError(f"minutia ({x}, {y}) outside the image in {path}", line=number)
            items.append(Minutia(x=x, y=y, theta=theta, kind=kind))

    try:
        return MinutiaSet(items=tuple(items), image_ref=image_ref or path)
    except ValidationError as e:
        raise DatasetFormatError(f"{path}: {e.errors()[0]['msg']}")


def write_minutiae_file(minutiae: MinutiaSet, path: str) -> None:
    """Write a MinutiaSet in the sidecar text format, floats at full precision."""
    try:
        with open(path, "w") as f:
            f.write(f"# {minutiae.image_ref}\n# x y theta kind\n")
            for m in minutiae:
                f.write(f"{m.x!r} {m.y!r} {m.theta!r} {m.kind}\n")
    except OSError as e:
        raise InputDataError(f"Cannot write minutiae file {path}: {e}")


def split_train_val(index: DatasetIndex, impressions_for_val: int) -> Tuple[DatasetIndex, DatasetIndex]:
    """
    Hold out the last impressions of every finger (per source DB) for validation.

    Args:
        index (DatasetIndex): The full index
        impressions_for_val (int): Impressions per finger moved to validation

    Returns:
        tuple: (train, val) indices sharing the full class label space

    Raises:
        SplitError: If a finger has no more than impressions_for_val impressions
    """
    if impressions_for_val < 0:
        raise ValueError(f"impressions_for_val must be >= 0, got {impressions_for_val}")
    if impressions_for_val == 0:
        return index, DatasetIndex(records=(), class_count=index.class_count, synthesis=index.synthesis)

    groups: Dict[Tuple[str, int], List[DatasetRecord]] = defaultdict(list)
    for record in index.records:
        groups[(record.source_tag, record.finger_id)].append(record)

    held_out = set()
    for (source_tag, finger_id), records in groups.items():
        if len(records) <= impressions_for_val:
            name = records[0].original_label or str(finger_id)
            raise SplitError(
                f"Finger {name} in {source_tag or 'dataset'} has {len(records)} impressions, "
                f"cannot hold out {impressions_for_val}", finger=name)
        ordered = sorted(records, key=lambda r: r.impression_id)
        held_out.update(r.image_id for r in ordered[-impressions_for_val:])

    train = tuple(r for r in index.records if r.image_id not in held_out)
    val = tuple(r for r in index.records if r.image_id in held_out)
    return (DatasetIndex(records=train, class_count=index.class_count, synthesis=index.synthesis),
            DatasetIndex(records=val, class_count=index.class_count, synthesis=index.synthesis))


def read_image_file(path: str) -> FingerprintImage:
    """Read an 8-bit grayscale raster into [0, 1]."""
    if not os.path.isfile(path):
        raise InputDataError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise InputDataError(f"Cannot read image {path}: {e}")
    try:
        return FingerprintImage(pixels=pixels, path=path)
    except ValidationError as e:
        raise DatasetFormatError(f"{path}: {e.errors()[0]['msg']}")


def save_image(image: FingerprintImage, path: str) -> None:
    """Write a FingerprintImage as an 8-bit grayscale file."""
    data = np.round(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data).save(path)
    except OSError as e:
        raise InputDataError(f"Cannot write image {path}: {e}")


def load_sample(record: DatasetRecord,
                synthesis: Optional[SynthesisSpec] = None,
                require_minutiae: bool = False) -> Tuple[FingerprintImage, MinutiaSet]:
    """
    Resolve a record to its image and ground-truth minutiae.

    Args:
        record (DatasetRecord): File or generator record
        synthesis (SynthesisSpec): Generator parameters for seed records
        require_minutiae (bool): Raise instead of returning an empty set
            when a file record has no sidecar

    Returns:
        tuple: (FingerprintImage, MinutiaSet) labelled with the record's ids
    """
    labels = {"finger_id": record.finger_id, "impression_id": record.impression_id,
              "source_tag": record.source_tag}
    if record.seed is not None:
        if synthesis is None:
            raise InputDataError(f"Record {record.image_id} is synthetic but no synthesis spec was given")
        from data.synthetic import generate_synthetic_fingerprint

        image, minutiae = generate_synthetic_fingerprint(
            record.seed, synthesis.model_copy(update={"impression_id": record.impression_id}))
        return (image.model_copy(update=labels),
                minutiae.model_copy(update={"image_ref": record.image_id}))

    image = read_image_file(record.path).model_copy(update=labels)
    if record.minutiae_path is None:
        if require_minutiae:
            raise InputDataError(f"No minutiae file for {record.image_id} (expected {os.path.splitext(record.path)[0]}.min)")
        return image, MinutiaSet(image_ref=record.image_id)
    minutiae = parse_minutiae_file(record.minutiae_path, image_shape=image.pixels.shape,
                                   image_ref=record.image_id)
    return image, minutiae


def load_image(record: DatasetRecord, synthesis: Optional[SynthesisSpec] = None) -> FingerprintImage:
    """Resolve a record to its image."""
    if record.seed is None:
        labels = {"finger_id": record.finger_id, "impression_id": record.impression_id,
                  "source_tag": record.source_tag}
        return read_image_file(record.path).model_copy(update=labels)
    return load_sample(record, synthesis)[0]

