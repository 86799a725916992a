#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Checkpoint archive (HDF5).

Layout:
    /weights/<state_dict name>          model parameters and buffers, including
                                        the per-head class weights and scales
    /optimizer/state/<param index>/<k>  optimizer tensors; scalars as attributes
    attrs: format_version, model_config, train_config, data_config,
           param_groups, epoch, history (JSON text)
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

import h5py
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from config import DataConfig, ModelConfig, TrainConfig
from errors import InputDataError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class Checkpoint(BaseModel):
    """Everything needed to resume training or run inference."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ModelConfig
    train: Optional[TrainConfig] = None
    data: Optional[DataConfig] = None
    weights: Dict[str, torch.Tensor] = Field(default_factory=dict)
    optimizer_state: Optional[Dict[str, Any]] = None
    epoch: int = 0
    history: List[Dict[str, Any]] = Field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def build_model(self):
        """Instantiate a MultiTaskModel holding these weights, in eval mode."""
        from model.network import MultiTaskModel

        model = MultiTaskModel(self.model)
        model.load_state_dict(self.weights)
        model.eval()
        return model


def _write_optimizer(group: h5py.Group, state_dict: Dict[str, Any]) -> None:
    state = group.create_group("state")
    for index, entries in state_dict["state"].items():
        entry_group = state.create_group(str(index))
        for key, value in entries.items():
            if isinstance(value, torch.Tensor):
                entry_group.create_dataset(key, data=value.detach().cpu().numpy())
            else:
                entry_group.attrs[key] = value
    group.attrs["param_groups"] = json.dumps(state_dict["param_groups"])


def _read_optimizer(group: h5py.Group) -> Dict[str, Any]:
    state = {}
    for index, entry_group in group["state"].items():
        entries = {key: torch.from_numpy(np.array(ds)) for key, ds in entry_group.items()}
        entries.update({key: value.item() if hasattr(value, "item") else value
                        for key, value in entry_group.attrs.items()})
        state[int(index)] = entries
    return {"state": state, "param_groups": json.loads(group.attrs["param_groups"])}


def save_checkpoint(path: str, model: torch.nn.Module, model_config: ModelConfig,
                    train_config: Optional[TrainConfig] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    epoch: int = 0, history: Optional[List[Dict[str, Any]]] = None,
                    data_config: Optional[DataConfig] = None) -> str:
    """
    Write a checkpoint archive.

    Args:
        path: Target .h5 file.
        model: The MultiTaskModel.
        model_config: Its configuration, stored as JSON text.
        train_config: Optional training configuration snapshot.
        optimizer: Optional optimizer whose state is stored.
        epoch: Completed epochs.
        history: Per-epoch validation metrics.
        data_config: Preprocessing settings the weights were trained with.

    Returns:
        str: The written path.
    """
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with h5py.File(path, "w") as f:
            f.attrs["format_version"] = FORMAT_VERSION
            f.attrs["model_config"] = model_config.model_dump_json()
            f.attrs["train_config"] = train_config.model_dump_json() if train_config else ""
            f.attrs["data_config"] = data_config.model_dump_json() if data_config else ""
            f.attrs["epoch"] = epoch
            f.attrs["history"] = json.dumps(history or [])
            weights = f.create_group("weights")
            for name, tensor in model.state_dict().items():
                weights.create_dataset(name, data=tensor.detach().cpu().numpy())
            if optimizer is not None:
                _write_optimizer(f.create_group("optimizer"), optimizer.state_dict())
    except OSError as e:
        raise InputDataError(f"Cannot write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint {path} (epoch {epoch})")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint archive.

    Raises:
        InputDataError: If the file is missing, unreadable, or of another format version.
    """
    if not os.path.isfile(path):
        raise InputDataError(f"Checkpoint not found: {path}")
    try:
        with h5py.File(path, "r") as f:
            version = int(f.attrs.get("format_version", -1))
            if version != FORMAT_VERSION:
                raise InputDataError(f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
            model_config = ModelConfig.model_validate_json(f.attrs["model_config"])
            train_text = f.attrs["train_config"]
            train_config = TrainConfig.model_validate_json(train_text) if train_text else None
            data_text = f.attrs.get("data_config", "")
            data_config = DataConfig.model_validate_json(data_text) if data_text else None
            weights = {}
            f["weights"].visititems(
                lambda name, obj: weights.__setitem__(name, torch.from_numpy(np.array(obj)))
                if isinstance(obj, h5py.Dataset) else None)
            optimizer_state = _read_optimizer(f["optimizer"]) if "optimizer" in f else None
            epoch = int(f.attrs["epoch"])
            history = json.loads(f.attrs["history"])
    except OSError as e:
        raise InputDataError(f"Cannot read checkpoint {path}: {e}")
    return Checkpoint(model=model_config, train=train_config, data=data_config, weights=weights,
                      optimizer_state=optimizer_state, epoch=epoch, history=history,
                      format_version=version)
