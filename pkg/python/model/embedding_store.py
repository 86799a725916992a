#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Embedding file (FPE1) and its JSON manifest.

Binary layout: magic b"FPE1", uint32 dimension, uint32 count (little
endian), then count * dimension little-endian float32 values. The
manifest ``<path>.manifest.json`` maps record index to image id.
"""

import json
import logging
import os
from collections.abc import Mapping
from typing import Iterator, List, Sequence

import numpy as np

from errors import DatasetFormatError, InputDataError, MissingEmbeddingError

logger = logging.getLogger(__name__)

MAGIC = b"FPE1"
HEADER = np.dtype([("magic", "S4"), ("dimension", "<u4"), ("count", "<u4")])


def manifest_path(path: str) -> str:
    return f"{path}.manifest.json"


def write_embeddings(path: str, image_ids: Sequence[str], vectors: np.ndarray) -> str:
    """
    Write embeddings and their manifest.

    Args:
        path: Target embedding file.
        image_ids: One id per row of ``vectors``.
        vectors: (count, dimension) array.

    Returns:
        str: The written path.
    """
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] != len(image_ids):
        raise ValueError(f"{len(image_ids)} ids for an array of shape {vectors.shape}")
    header = np.array([(MAGIC, vectors.shape[1], vectors.shape[0])], dtype=HEADER)
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header.tobytes())
            f.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
        with open(manifest_path(path), "w") as f:
            json.dump({"format": MAGIC.decode(), "dimension": int(vectors.shape[1]),
                       "count": int(vectors.shape[0]), "image_ids": list(image_ids)}, f, indent=2)
    except OSError as e:
        raise InputDataError(f"Cannot write embeddings {path}: {e}")
    logger.info(f"Wrote {vectors.shape[0]} embeddings of dimension {vectors.shape[1]} to {path}")
    return path


class EmbeddingFile(Mapping):
    """Read-only image_id -> float64 vector mapping over an FPE1 file."""

    def __init__(self, image_ids: List[str], vectors: np.ndarray):
        self.image_ids = list(image_ids)
        self.vectors = vectors
        self._position = {image_id: i for i, image_id in enumerate(self.image_ids)}

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __getitem__(self, image_id: str) -> np.ndarray:
        if image_id not in self._position:
            raise MissingEmbeddingError([image_id])
        return self.vectors[self._position[image_id]]

    def __iter__(self) -> Iterator[str]:
        return iter(self.image_ids)

    def __len__(self) -> int:
        return len(self.image_ids)


def read_embeddings(path: str) -> EmbeddingFile:
    """
    Load an FPE1 file and its manifest.

    Raises:
        InputDataError: If either file is missing.
        DatasetFormatError: On a bad magic, truncated payload or a manifest
            that disagrees with the header.
    """
    for required in (path, manifest_path(path)):
        if not os.path.isfile(required):
            raise InputDataError(f"Embedding file not found: {required}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER.itemsize:
        raise DatasetFormatError(f"{path} is too short for an FPE1 header")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if bytes(header["magic"]) != MAGIC:
        raise DatasetFormatError(f"{path} is not an FPE1 file")
    dimension, count = int(header["dimension"]), int(header["count"])
    payload = raw[HEADER.itemsize:]
    if len(payload) != 4 * dimension * count:
        raise DatasetFormatError(f"{path}: expected {count}x{dimension} floats, got {len(payload)} bytes")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dimension).astype(np.float64)

    with open(manifest_path(path), "r") as f:
        manifest = json.load(f)
    image_ids = manifest.get("image_ids", [])
    if len(image_ids) != count or manifest.get("dimension") != dimension:
        raise DatasetFormatError(f"manifest of {path} does not match its header ({count} x {dimension})")
    return EmbeddingFile(image_ids, vectors)
