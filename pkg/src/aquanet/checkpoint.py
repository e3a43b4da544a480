"""Versioned checkpoint container.

Layout (a torch-serialized dict, loadable with weights_only=True):
  format_version: int (currently 1)
  kind:           "aquanet" | "atex_classifier"
  config:         model config echo (plain dict)
  taxonomy:       taxonomy echo (plain dict)
  model_state:    state_dict
  extra:          free-form small metadata (iterations, seed, ...)
"""

from __future__ import annotations

from pathlib import Path

import torch

from .errors import IoFailure
from .network import AquaNet, AquaNetConfig
from .taxonomy import ClassTaxonomy, load_taxonomy

FORMAT_VERSION = 1


def save_checkpoint(path, model, config_dict: dict, taxonomy: ClassTaxonomy,
                    kind: str = "aquanet", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config_dict,
        "taxonomy": taxonomy.to_dict(),
        "model_state": model.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise IoFailure(f"unsupported checkpoint format_version {version!r}")
    return payload


def load_aquanet(path) -> tuple[AquaNet, AquaNetConfig, ClassTaxonomy, dict]:
    """Rebuild an AquaNet (eval-ready) from a checkpoint file."""
    payload = load_checkpoint(path)
    if payload["kind"] != "aquanet":
        raise IoFailure(f"checkpoint kind {payload['kind']!r} is not an aquanet model")
    config = AquaNetConfig.from_dict(payload["config"])
    taxonomy = load_taxonomy(payload["taxonomy"])
    model = AquaNet(config, taxonomy)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, config, taxonomy, payload["extra"]
