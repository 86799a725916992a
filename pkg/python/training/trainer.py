#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Multi-task training loop.

Per step: load a batch, augment it (warping the minutiae along), build the
ground-truth minutia maps from the augmented minutiae, run the network,
and take one RMSprop step on

    L_all = L_t + L_m + L_f + lambda_map * L_map

with the STN parameters in their own group at ``lr_stn``. Every step is
appended to ``train_log.jsonl``; every epoch to ``metrics.csv``. The
checkpoint with the lowest validation L_all is kept as ``best.h5``.
"""

import json
import logging
import math
import os
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from torch.utils.data import DataLoader, Dataset

from config import AugmentConfig, DataConfig, ModelConfig, TrainConfig, sync_ablation_flags
from data.augment import augment_pipeline, config_for_side, sample_rng
from data.loader import load_sample
from data.preprocess import ImagePreprocessor
from data.records import DatasetIndex
from errors import ContractError, InputDataError, ProtocolError, TrainingDivergedError
from evaluation.evaluate import evaluate_dataset
from features.minutia_map import build_minutia_map
from model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from model.losses import head_scale, minutia_map_loss, total_loss
from model.network import MultiTaskModel, assemble_embedding_tensor

logger = logging.getLogger(__name__)

HEAD_SUFFIX = {"texture": "t", "minutia": "m", "frequency": "f"}
LOG_FILE = "train_log.jsonl"
METRICS_FILE = "metrics.csv"
BEST_FILE = "best.h5"
LAST_FILE = "last.h5"


class ValidationMetrics(BaseModel):
    """Losses, per-branch accuracy and optional EER over a validation index."""
    count: int = Field(ge=0)
    L_t: float
    L_m: float
    L_f: float
    L_map: float
    L_all: float
    accuracy: Dict[str, float] = Field(default_factory=dict)
    eer: Optional[float] = None


def seed_everything(seed: int, strict: bool = False) -> None:
    """Seed torch and numpy; in strict mode also force deterministic kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    if strict:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def make_preprocessor(model_config: ModelConfig, data_config: Optional[DataConfig] = None) -> ImagePreprocessor:
    data_config = data_config or DataConfig()
    return ImagePreprocessor(side=model_config.input_side, method=data_config.enhancement,
                             block=data_config.enhance_block, band_fraction=model_config.band_fraction,
                             elliptical_mask=model_config.elliptical_mask)


class TrainingSamples(Dataset):
    """
    Preprocessed samples of an index as (image, H_g, label) tensors.

    Enhancement and resizing run once per record and are cached. When an
    augmentation config is given, every epoch draws fresh augmentations from
    the stream ``sample_rng(seed, epoch, index)``, so the result does not
    depend on worker scheduling.
    """

    def __init__(self, index: DatasetIndex, preprocessor: ImagePreprocessor, model_config: ModelConfig,
                 augment_config: Optional[AugmentConfig] = None, seed: int = 0):
        self.records = index.records
        self.synthesis = index.synthesis
        self.preprocessor = preprocessor
        self.model_config = model_config
        self.augment_config = (config_for_side(augment_config, model_config.input_side)
                               if augment_config is not None else None)
        self.seed = seed
        self.epoch = 0
        self._cache = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def base_sample(self, i: int):
        if i not in self._cache:
            image, minutiae = load_sample(self.records[i], self.synthesis, require_minutiae=True)
            self._cache[i] = self.preprocessor.prepare(image, minutiae)
        return self._cache[i]

    def __getitem__(self, i: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        image, minutiae = self.base_sample(i)
        if self.augment_config is not None:
            image, minutiae = augment_pipeline(image, minutiae, self.augment_config,
                                               sample_rng(self.seed, self.epoch, i))
        c = self.model_config
        h_g = build_minutia_map(minutiae, c.input_side, c.map_side, c.map_channels, c.sigma_s, c.sigma_a)
        return (torch.from_numpy(image.pixels[None].astype(np.float32)),
                torch.from_numpy(h_g.values.astype(np.float32)),
                self.records[i].finger_id)


def make_optimizer(model: MultiTaskModel, config: TrainConfig) -> torch.optim.Optimizer:
    """RMSprop with the STN at ``lr_stn`` and everything else at ``lr_features``."""
    return torch.optim.RMSprop([
        {"params": model.feature_parameters(), "lr": config.lr_features, "name": "features"},
        {"params": model.stn_parameters(), "lr": config.lr_stn, "name": "stn"},
    ], weight_decay=config.weight_decay)


def compute_losses(outputs, logits: Dict[str, torch.Tensor], labels: torch.Tensor, h_g: torch.Tensor,
                   config: TrainConfig) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Combined objective and its parts; a disabled frequency branch contributes 0.

    Returns:
        tuple: (L_all tensor, {"L_t", "L_m", "L_f", "L_map"} tensors)
    """
    parts = {f"L_{HEAD_SUFFIX[name]}": F.cross_entropy(head_logits, labels)
             for name, head_logits in logits.items()}
    parts.setdefault("L_f", torch.zeros((), dtype=outputs.h_e.dtype))
    parts["L_map"] = minutia_map_loss(h_g, outputs.h_e, config.rho)
    l_all = parts["L_t"] + parts["L_m"] + parts["L_f"] + config.lambda_map * parts["L_map"]
    return l_all, parts


def _check_labels(index: DatasetIndex, num_classes: int) -> None:
    outside = [r.image_id for r in index.records if r.finger_id >= num_classes]
    if outside:
        raise ContractError(f"{len(outside)} records have labels outside [0, {num_classes}), e.g. {outside[0]}")


def _check_minutiae(index: DatasetIndex) -> None:
    missing = [r.image_id for r in index.records if r.seed is None and r.minutiae_path is None]
    if missing:
        raise InputDataError(f"{len(missing)} training images have no .min file, e.g. {missing[0]}")


@torch.no_grad()
def validate(source: Union[Checkpoint, MultiTaskModel], val_index: DatasetIndex,
             train_config: Optional[TrainConfig] = None, data_config: Optional[DataConfig] = None,
             batch_size: int = 16, compute_eer: bool = False) -> ValidationMetrics:
    """
    Evaluate a model on a labelled index without changing it.

    Args:
        source: A checkpoint or a model.
        val_index: Records with labels inside the trained class range.
        train_config: Supplies rho and lambda_map (defaults otherwise).
        data_config: Supplies the enhancement settings.
        batch_size: Inference batch size.
        compute_eer: Also compute the EER over all validation pairs.

    Returns:
        ValidationMetrics: Mean losses, per-branch accuracy and optional EER.

    Raises:
        ContractError: If the index is empty or a label is outside the trained range.
    """
    model = source.build_model() if isinstance(source, Checkpoint) else source
    config = model.config
    train_config = train_config or TrainConfig()
    if len(val_index) == 0:
        raise ContractError("validation index is empty")
    _check_labels(val_index, config.num_classes)

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    samples = TrainingSamples(val_index, make_preprocessor(config, data_config), config)
    totals: Dict[str, float] = {"L_t": 0.0, "L_m": 0.0, "L_f": 0.0, "L_map": 0.0, "L_all": 0.0}
    correct: Dict[str, int] = {name: 0 for name in model.heads}
    embeddings: Dict[str, np.ndarray] = {}

    for start in range(0, len(samples), batch_size):
        batch = [samples[i] for i in range(start, min(start + batch_size, len(samples)))]
        images = torch.stack([b[0] for b in batch]).to(dtype)
        h_g = torch.stack([b[1] for b in batch]).to(dtype)
        labels = torch.tensor([b[2] for b in batch], dtype=torch.long)
        outputs, logits = model(images, None, h_g)
        l_all, parts = compute_losses(outputs, logits, labels, h_g, train_config)
        n = len(batch)
        for key, value in parts.items():
            totals[key] += float(value) * n
        totals["L_all"] += float(l_all) * n
        for name, head_logits in logits.items():
            correct[name] += int((head_logits.argmax(dim=1) == labels).sum())
        if compute_eer:
            vectors, _ = assemble_embedding_tensor(outputs, config)
            for offset, vector in enumerate(vectors.to(torch.float64).numpy()):
                embeddings[val_index.records[start + offset].image_id] = vector

    model.train(was_training)
    count = len(samples)
    eer = None
    if compute_eer:
        try:
            eer = evaluate_dataset(val_index, embeddings).eer
        except ProtocolError as e:
            logger.warning(f"Validation EER skipped: {e}")
    return ValidationMetrics(count=count, accuracy={name: c / count for name, c in correct.items()},
                             eer=eer, **{key: value / count for key, value in totals.items()})


def _selection_value(summary: Dict[str, object]) -> float:
    """Validation L_all of an epoch summary, or its training L_all without validation."""
    value = summary.get("val_L_all")
    return float(value if value is not None else summary["train_L_all"])


def _step_record(step: int, epoch: int, parts: Dict[str, torch.Tensor], lambda_map: float,
                 model: MultiTaskModel) -> Dict[str, object]:
    breakdown = total_loss([parts["L_t"], parts["L_m"], parts["L_f"], parts["L_map"]], lambda_map)
    record = {"step": step, "epoch": epoch, **breakdown.model_dump(exclude={"lambda_map"})}
    for name, suffix in HEAD_SUFFIX.items():
        record[f"scale_{suffix}"] = head_scale(model.heads[name]) if name in model.heads else None
    return record


def train(config: TrainConfig, train_index: DatasetIndex, val_index: Optional[DatasetIndex] = None,
          model_config: Optional[ModelConfig] = None, augment_config: Optional[AugmentConfig] = None,
          data_config: Optional[DataConfig] = None, resume: Optional[Checkpoint] = None) -> Checkpoint:
    """
    Train a MultiTaskModel and return its best checkpoint.

    Args:
        config: Optimization settings and ablation flags.
        train_index: Training records; every file record needs a .min sidecar.
        val_index: Validation records in the same label space, or None.
        model_config: Architecture; num_classes is taken from train_index.
        augment_config: Augmentation settings used when ``use_augment`` is on.
        data_config: Enhancement settings.
        resume: Continue from this checkpoint's weights, optimizer state and epoch.

    Returns:
        Checkpoint: The checkpoint with the lowest validation L_all (training
        L_all when there is no validation set).

    Raises:
        InputDataError: If a training image has no minutiae file.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    if len(train_index) < 2:
        raise ContractError(f"training needs at least 2 images, got {len(train_index)}")
    data_config = data_config or DataConfig()
    model_config = model_config or ModelConfig()
    model_config = sync_ablation_flags(model_config, config)
    model_config = ModelConfig.model_validate({**model_config.model_dump(), "num_classes": train_index.class_count})
    val_index = val_index if val_index is not None and len(val_index) else None
    if val_index is not None:
        _check_labels(val_index, model_config.num_classes)
    _check_minutiae(train_index)

    seed_everything(config.seed, config.strict_determinism)
    model = MultiTaskModel(model_config)
    optimizer = make_optimizer(model, config)
    start_epoch, history = 0, []
    if resume is not None:
        model.load_state_dict(resume.weights)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        start_epoch, history = resume.epoch, list(resume.history)
        logger.info(f"Resuming from epoch {start_epoch}")

    samples = TrainingSamples(train_index, make_preprocessor(model_config, data_config), model_config,
                              (augment_config or AugmentConfig()) if config.use_augment else None, config.seed)
    workers = 0 if config.strict_determinism else config.num_workers
    shuffler = torch.Generator()

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(config.checkpoint_dir, LOG_FILE)
    best_path = os.path.join(config.checkpoint_dir, BEST_FILE)
    best_value = min((_selection_value(h) for h in history), default=math.inf)
    step = sum(int(h.get("steps", 0)) for h in history)
    logger.info(f"Training {model_config.num_classes} classes on {len(samples)} images "
                f"(head {model_config.head}, frequency {model_config.use_frequency}, "
                f"mam {model_config.use_mam}, augment {config.use_augment})")

    with open(log_path, "a" if resume is not None else "w") as log_file:
        for epoch in range(start_epoch, config.epochs):
            samples.set_epoch(epoch)
            shuffler.manual_seed(config.seed * 1000003 + epoch)
            loader = DataLoader(samples, batch_size=config.batch_size, shuffle=True, generator=shuffler,
                                num_workers=workers, drop_last=len(samples) % config.batch_size == 1)
            model.train()
            epoch_records: List[Dict[str, object]] = []
            for images, h_g, labels in loader:
                outputs, logits = model(images, labels, h_g)
                l_all, parts = compute_losses(outputs, logits, labels, h_g, config)
                if not torch.isfinite(l_all):
                    raise TrainingDivergedError(step, float(l_all))
                optimizer.zero_grad()
                l_all.backward()
                optimizer.step()
                model.renormalize_heads()

                record = _step_record(step, epoch, parts, config.lambda_map, model)
                log_file.write(json.dumps(record) + "\n")
                epoch_records.append(record)
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    break
            log_file.flush()

            train_frame = pd.DataFrame(epoch_records)
            summary = {"epoch": epoch + 1, "steps": len(epoch_records),
                       "train_L_all": float(train_frame["L_all"].mean()),
                       "train_L_map": float(train_frame["L_map"].mean())}
            if val_index is not None:
                metrics = validate(model, val_index, config, data_config, config.batch_size,
                                   compute_eer=config.validate_eer)
                summary.update({"val_L_all": metrics.L_all, "val_L_map": metrics.L_map, "val_eer": metrics.eer,
                                **{f"val_acc_{name}": acc for name, acc in metrics.accuracy.items()}})
            history.append(summary)
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: train L_all {summary['train_L_all']:.4f}"
                        + (f", val L_all {summary['val_L_all']:.4f}" if val_index is not None else ""))

            selection = _selection_value(summary)
            if selection < best_value:
                best_value = selection
                save_checkpoint(best_path, model, model_config, config, optimizer, epoch + 1, history, data_config)
            save_checkpoint(os.path.join(config.checkpoint_dir, LAST_FILE), model, model_config, config,
                            optimizer, epoch + 1, history, data_config)
            pd.DataFrame(history).to_csv(os.path.join(config.checkpoint_dir, METRICS_FILE), index=False)
            if config.max_steps is not None and step >= config.max_steps:
                logger.info(f"Reached max_steps={config.max_steps}")
                break

    if not os.path.exists(best_path):
        save_checkpoint(best_path, model, model_config, config, optimizer, start_epoch, history, data_config)
    return load_checkpoint(best_path)
