"""Checkpoint files shared by classifiers and trigger generators."""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
import torch.nn as nn

from .exceptions import IngestionError
from .networks import ClassifierNet, build_classifier
from .triggers import ConditionalTriggerGenerator, build_generator
from .utils import atomic_torch_save

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_module(
    path: Union[str, Path], module: nn.Module, kind: str, metadata: Dict[str, Any]
) -> Path:
    """Write ``{kind, format_version, metadata, state_dict}`` atomically."""
    path = Path(path)
    atomic_torch_save(
        {
            "kind": kind,
            "format_version": FORMAT_VERSION,
            "metadata": metadata,
            "state_dict": {k: v.detach().cpu() for k, v in module.state_dict().items()},
        },
        path,
    )
    logger.debug(f"Saved {kind} checkpoint to {path}")
    return path


def _read(path: Union[str, Path], kind: str) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Missing checkpoint: {path}", path=str(path))
    try:
        payload = torch.load(path, map_location="cpu")
    except Exception as e:
        raise IngestionError(
            f"Cannot read checkpoint {path}: {e}", path=str(path)
        ) from e
    if not isinstance(payload, dict) or payload.get("kind") != kind:
        raise IngestionError(f"{path} is not a {kind} checkpoint", path=str(path))
    return payload


def save_classifier(
    path: Union[str, Path],
    classifier: ClassifierNet,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    metadata = dict(classifier.metadata())
    metadata.update(extra or {})
    return save_module(path, classifier, "classifier", metadata)


def load_classifier(path: Union[str, Path]) -> Tuple[ClassifierNet, Dict[str, Any]]:
    """Rebuild a classifier from its checkpoint; returns (model, metadata)."""
    payload = _read(path, "classifier")
    meta = payload["metadata"]
    model = build_classifier(meta["arch_id"], meta["num_classes"], meta["input_shape"])
    model.load_state_dict(payload["state_dict"])
    return model, meta


def save_generator(
    path: Union[str, Path],
    generator: ConditionalTriggerGenerator,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    metadata = dict(generator.metadata())
    metadata.update(extra or {})
    return save_module(path, generator, "generator", metadata)


def load_generator(
    path: Union[str, Path],
) -> Tuple[ConditionalTriggerGenerator, Dict[str, Any]]:
    """Rebuild a trigger generator from its checkpoint; returns (model, metadata)."""
    payload = _read(path, "generator")
    meta = payload["metadata"]
    generator = build_generator(
        meta["num_classes"], meta["image_shape"], meta["epsilon"]
    )
    generator.load_state_dict(payload["state_dict"])
    generator.eval()
    return generator, meta


def save_training_state(path: Union[str, Path], state: Dict[str, Any]) -> Path:
    """Persist a resumable training state (models, optimizers, RNG, history)."""
    payload = dict(state)
    payload["kind"] = "train_state"
    payload["format_version"] = FORMAT_VERSION
    atomic_torch_save(payload, Path(path))
    return Path(path)


def load_training_state(path: Union[str, Path]) -> Dict[str, Any]:
    return _read(path, "train_state")
