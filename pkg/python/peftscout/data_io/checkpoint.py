"""Save and load pretrained backbones."""

import json
from pathlib import Path
from typing import Union

import numpy as np

from ..backbone import Backbone, BackboneConfig, build_backbone
from ..utilities.utils import atomic_write_text

CHECKPOINT_SCHEMA_VERSION = 1


def save_backbone(backbone: Backbone, fname: Union[str, Path]) -> Path:
    """Write a backbone to a JSON checkpoint.

    Parameters are stored as nested lists in sorted key order; float values
    round-trip exactly, so equal backbones give byte-identical files.

    :param backbone: Backbone to save.
    :param fname: File name.

    :return: Path of the written file.
    """
    content = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": backbone.config.to_dict(),
        "frozen": backbone.frozen,
        "pretrain_loss": backbone.pretrain_loss,
        "pretrain_losses": list(backbone.pretrain_losses),
        "params": {name: backbone.params[name].tolist() for name in sorted(backbone.params)},
    }
    return atomic_write_text(fname, json.dumps(content, sort_keys=True) + "\n")


def load_backbone(fname: Union[str, Path]) -> Backbone:
    """Load a backbone from a JSON checkpoint.

    :param fname: File name.

    :return: Backbone.

    :raises OSError: File does not exist or is not valid JSON.
    :raises ValueError: Unsupported schema version or parameters that do not fit
        the stored configuration.
    """
    fname = Path(fname)
    if not fname.exists():
        raise OSError(f"The requested checkpoint {fname} does not exist.")
    with fname.open("r", encoding="utf-8") as fin:
        try:
            content = json.load(fin)
        except json.decoder.JSONDecodeError as orig_err:
            raise OSError(
                f"Cannot open the checkpoint {fname.name}. JSON decode error."
            ) from orig_err

    version = content.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"Checkpoint schema version {version} is not supported, "
            f"expected version {CHECKPOINT_SCHEMA_VERSION}."
        )

    config = BackboneConfig(**content["config"])
    params = {name: np.array(arr, dtype=np.float64) for name, arr in content["params"].items()}

    expected = _expected_shapes(config)
    if set(params) != set(expected):
        raise ValueError(f"Checkpoint {fname.name} does not match its configuration.")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(
                f"Checkpoint {fname.name}: parameter {name} has shape "
                f"{params[name].shape}, expected {shape}."
            )

    backbone = Backbone(config, params, frozen=bool(content.get("frozen", True)))
    backbone.pretrain_losses = list(content.get("pretrain_losses", []))
    backbone.pretrain_loss = content.get("pretrain_loss")
    return backbone


def _expected_shapes(config: BackboneConfig) -> dict:
    """Parameter shapes of a backbone configuration."""
    return {name: arr.shape for name, arr in build_backbone(config, seed=0).params.items()}
