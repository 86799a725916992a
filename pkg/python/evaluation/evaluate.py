#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Verification evaluation: matching scores, genuine/impostor pair protocols,
FAR/FRR sweep, EER and report files.
"""

import json
import logging
import os
from collections import defaultdict
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from data.records import DatasetIndex
from errors import ContractError, InputDataError, MissingEmbeddingError, ProtocolError

logger = logging.getLogger(__name__)

Pair = Tuple[str, str]


class PairList(BaseModel):
    """Genuine (same finger) and impostor (different finger) image-id pairs."""
    model_config = ConfigDict(frozen=True)

    genuine: List[Pair] = Field(default_factory=list)
    impostor: List[Pair] = Field(default_factory=list)


class EvalReport(BaseModel):
    """EER, the DET sweep it came from, and score statistics."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    eer: float = Field(ge=0, le=1)
    eer_threshold: float
    det_points: List[Tuple[float, float, float]] = Field(description="(threshold, far, frr) per distinct score")
    score_stats: Dict[str, float] = Field(default_factory=dict)
    genuine_count: int = 0
    impostor_count: int = 0
    protocol: str = ""
    scores: Optional[pd.DataFrame] = Field(default=None, exclude=True,
                                           description="pair_type, image_a, image_b, score")

    @model_validator(mode="after")
    def check_monotone(self) -> "EvalReport":
        far = np.array([p[1] for p in self.det_points])
        frr = np.array([p[2] for p in self.det_points])
        if np.any(np.diff(far) > 0) or np.any(np.diff(frr) < 0):
            raise ValueError("far must be non-increasing and frr non-decreasing in the threshold")
        return self


def _vector(embedding) -> np.ndarray:
    return np.asarray(getattr(embedding, "vector", embedding), dtype=np.float64)


def match_score(e1, e2) -> float:
    """
    Inner product of two unit-norm embeddings, in [-1, 1].

    Raises:
        ContractError: On a dimension mismatch or a vector that is not unit norm.
    """
    v1, v2 = _vector(e1), _vector(e2)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise ContractError(f"embedding dimensions differ: {v1.shape} vs {v2.shape}")
    for v in (v1, v2):
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-4:
            raise ContractError(f"embedding is not unit norm (norm {np.linalg.norm(v):.6f})")
    return float(np.clip(np.dot(v1, v2), -1.0, 1.0))


def fvc_pairs(index: DatasetIndex, protocol: str = "all_pairs") -> PairList:
    """
    Enumerate verification pairs.

    all_pairs:     every unordered same-finger pair is genuine, every
                   unordered cross-finger pair is impostor.
    fvc_standard:  genuine as above; impostors pair the first impression of
                   each finger with the first impression of every other finger.

    Raises:
        ProtocolError: If no finger has two impressions or fewer than two fingers exist.
    """
    by_finger: Dict[int, List[str]] = defaultdict(list)
    ordered = sorted(index.records, key=lambda r: (r.finger_id, r.impression_id, r.source_tag))
    for record in ordered:
        by_finger[record.finger_id].append(record.image_id)

    if len(by_finger) < 2:
        raise ProtocolError("need at least two fingers to form impostor pairs")
    if all(len(ids) < 2 for ids in by_finger.values()):
        raise ProtocolError("every finger has fewer than 2 impressions; no genuine pairs")

    genuine = [pair for ids in by_finger.values() for pair in combinations(ids, 2)]
    fingers = sorted(by_finger)
    if protocol == "all_pairs":
        impostor = [(a, b) for f1, f2 in combinations(fingers, 2)
                    for a in by_finger[f1] for b in by_finger[f2]]
    elif protocol == "fvc_standard":
        impostor = list(combinations([by_finger[f][0] for f in fingers], 2))
    else:
        raise ProtocolError(f"Unknown protocol: {protocol}")
    return PairList(genuine=genuine, impostor=impostor)


def det_curve(genuine_scores: Sequence[float],
              impostor_scores: Sequence[float]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    FAR and FRR at every distinct score, accepting iff score >= threshold.

    Returns:
        tuple: (thresholds ascending, far, frr)
    """
    genuine = np.sort(np.asarray(genuine_scores, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    thresholds = np.unique(np.concatenate([genuine, impostor]))
    far = (impostor.size - np.searchsorted(impostor, thresholds, side="left")) / impostor.size
    frr = np.searchsorted(genuine, thresholds, side="left") / genuine.size
    return thresholds, far, frr


def compute_eer(genuine_scores: Sequence[float],
                impostor_scores: Sequence[float]) -> Tuple[float, float, List[Tuple[float, float, float]]]:
    """
    Equal error rate by threshold sweep.

    At the first threshold where FAR equals FRR that value is the EER.
    Otherwise, where FAR - FRR changes sign between consecutive thresholds
    i and i+1, both rates and the threshold are interpolated linearly at
    alpha = d_i / (d_i - d_{i+1}) and EER = (FAR + FRR) / 2 there. Without a
    sign change, (FAR + FRR) / 2 at the threshold minimizing |FAR - FRR|.

    Returns:
        tuple: (eer, threshold, [(threshold, far, frr), ...])

    Raises:
        ContractError: If either list is empty.
    """
    if len(genuine_scores) == 0 or len(impostor_scores) == 0:
        raise ContractError("genuine and impostor score lists must be nonempty")
    thresholds, far, frr = det_curve(genuine_scores, impostor_scores)
    det_points = [(float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr)]
    diff = far - frr

    exact = np.nonzero(diff == 0)[0]
    if exact.size:
        i = int(exact[0])
        return float(far[i]), float(thresholds[i]), det_points

    crossing = np.nonzero((diff[:-1] > 0) & (diff[1:] < 0))[0]
    if crossing.size:
        i = int(crossing[0])
        alpha = diff[i] / (diff[i] - diff[i + 1])
        far_x = far[i] + alpha * (far[i + 1] - far[i])
        frr_x = frr[i] + alpha * (frr[i + 1] - frr[i])
        threshold = thresholds[i] + alpha * (thresholds[i + 1] - thresholds[i])
        return float((far_x + frr_x) / 2), float(threshold), det_points

    i = int(np.argmin(np.abs(diff)))
    return float((far[i] + frr[i]) / 2), float(thresholds[i]), det_points


def _embedding_matrix(ids: Sequence[str], embeddings: Mapping[str, object]) -> np.ndarray:
    missing = [image_id for image_id in ids if image_id not in embeddings]
    if missing:
        raise MissingEmbeddingError(missing)
    return np.stack([_vector(embeddings[image_id]) for image_id in ids])


def evaluate_dataset(index: DatasetIndex, embeddings: Mapping[str, object],
                     protocol: str = "all_pairs") -> EvalReport:
    """
    Score every protocol pair and compute the EER.

    Args:
        index: Verification dataset.
        embeddings: image_id -> embedding vector (or FingerprintEmbedding).
        protocol: ``all_pairs`` or ``fvc_standard``.

    Returns:
        EvalReport: With the per-pair scores attached as ``scores``.

    Raises:
        MissingEmbeddingError: Naming every record without an embedding.
    """
    ids = [r.image_id for r in index.records]
    matrix = _embedding_matrix(ids, embeddings)
    position = {image_id: i for i, image_id in enumerate(ids)}
    gram = matrix @ matrix.T
    pairs = fvc_pairs(index, protocol)

    def scores_of(pair_list: List[Pair]) -> np.ndarray:
        if not pair_list:
            return np.zeros(0)
        a = np.fromiter((position[p[0]] for p in pair_list), dtype=np.int64, count=len(pair_list))
        b = np.fromiter((position[p[1]] for p in pair_list), dtype=np.int64, count=len(pair_list))
        return np.clip(gram[a, b], -1.0, 1.0)

    genuine, impostor = scores_of(pairs.genuine), scores_of(pairs.impostor)
    eer, threshold, det_points = compute_eer(genuine, impostor)
    logger.info(f"{protocol}: {len(genuine)} genuine and {len(impostor)} impostor pairs, EER {eer:.4%}")

    scores = pd.DataFrame({
        "pair_type": ["genuine"] * len(genuine) + ["impostor"] * len(impostor),
        "image_a": [p[0] for p in pairs.genuine] + [p[0] for p in pairs.impostor],
        "image_b": [p[1] for p in pairs.genuine] + [p[1] for p in pairs.impostor],
        "score": np.concatenate([genuine, impostor]),
    })
    stats = {
        "genuine_mean": float(genuine.mean()), "genuine_std": float(genuine.std()),
        "impostor_mean": float(impostor.mean()), "impostor_std": float(impostor.std()),
    }
    return EvalReport(eer=eer, eer_threshold=threshold, det_points=det_points, score_stats=stats,
                      genuine_count=len(genuine), impostor_count=len(impostor), protocol=protocol,
                      scores=scores)


def plot_det(report: EvalReport, path: str) -> None:
    """FRR against FAR with the EER point marked."""
    far = [p[1] for p in report.det_points]
    frr = [p[2] for p in report.det_points]
    plt.figure(figsize=(6, 6))
    plt.plot(far, frr, label="DET")
    plt.plot([report.eer], [report.eer], "o", label=f"EER {report.eer:.2%}")
    plt.plot([0, 1], [0, 1], ":", color="gray")
    plt.xlabel("FAR")
    plt.ylabel("FRR")
    plt.title(f"DET curve ({report.protocol})")
    plt.legend()
    plt.grid(True)
    plt.savefig(path, format="png")
    plt.close()


def write_report(report: EvalReport, out_dir: str) -> Dict[str, str]:
    """
    Write report.json, det.csv, scores.csv and det.png.

    Returns:
        dict: Written file paths by name.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {name: os.path.join(out_dir, name)
                 for name in ("report.json", "det.csv", "scores.csv", "det.png")}
        with open(paths["report.json"], "w") as f:
            json.dump(report.model_dump(exclude={"det_points"}), f, indent=2)
        pd.DataFrame(report.det_points, columns=["threshold", "far", "frr"]).to_csv(
            paths["det.csv"], index=False, float_format="%.9g")
        if report.scores is not None:
            report.scores.to_csv(paths["scores.csv"], index=False, float_format="%.9g")
        else:
            paths.pop("scores.csv")
        plot_det(report, paths["det.png"])
    except OSError as e:
        raise InputDataError(f"Cannot write report to {out_dir}: {e}")
    return paths
