"""Checkpoint archive: config, vocabulary, named parameter tensors, format version.

A checkpoint is a single torch archive holding everything needed to rebuild
the model and resume training: model config, vocabulary, the backbone and
head state dicts, optimizer state, and the step counter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .corpus import Vocabulary
from .model import ModelConfig, UnifiedDialogModel
from .objectives import PretrainHeads

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab: Vocabulary
    model_state: dict
    heads_state: Optional[dict] = None
    optimizer_state: Optional[dict] = None
    step: int = 0
    extra: Optional[dict] = None

    def build_model(self) -> UnifiedDialogModel:
        model = UnifiedDialogModel(self.model_config)
        model.load_state_dict(self.model_state)
        return model

    def build_heads(self) -> PretrainHeads:
        heads = PretrainHeads(self.model_config.hidden_dim, self.model_config.vocab_size)
        if self.heads_state is not None:
            heads.load_state_dict(self.heads_state)
        return heads


def save_checkpoint(
    path,
    model: UnifiedDialogModel,
    vocab: Vocabulary,
    heads: PretrainHeads | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": vocab.to_dict(),
        "model_state": model.state_dict(),
        "heads_state": heads.state_dict() if heads is not None else None,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    return Checkpoint(
        model_config=ModelConfig.from_dict(payload["model_config"]),
        vocab=Vocabulary.from_dict(payload["vocab"]),
        model_state=payload["model_state"],
        heads_state=payload.get("heads_state"),
        optimizer_state=payload.get("optimizer_state"),
        step=payload.get("step", 0),
        extra=payload.get("extra") or {},
    )
