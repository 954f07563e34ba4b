"""Versioned JSON checkpoints: parameters, config (with hash), connectome,
and the RNG seed state that produced the fit."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore
from .errors import CheckpointError
from .graph import Connectome
from .moe import ModelConfig, MoeModel

FORMAT_VERSION = 1


def config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CheckpointMeta:
    connectome: Connectome
    rng_state: dict | None
    train_config: dict | None


def save_checkpoint(path, model: MoeModel, connectome: Connectome,
                    rng_state: dict | None = None,
                    train_config: dict | None = None) -> None:
    cfg = model.config.to_dict()
    doc = {
        "format_version": FORMAT_VERSION,
        "model_config": cfg,
        "config_hash": config_hash(cfg),
        # list of [name, values] pairs: JSON objects would be re-sorted by
        # sort_keys, but the store's insertion order defines the flat-vector
        # layout and must survive a round trip
        "params": [[name, np.asarray(v).tolist()] for name, v in model.params.items()],
        "region_names": list(model.region_names),
        "connectome": {
            "names": list(connectome.region_names),
            "weights": [[float(w) for w in row] for row in connectome.adjacency],
        },
        "rng_state": rng_state,
        "train_config": train_config,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[MoeModel, CheckpointMeta]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format "
            f"{doc.get('format_version') if isinstance(doc, dict) else '?'}")
    try:
        cfg_dict = doc["model_config"]
        if config_hash(cfg_dict) != doc["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch (corrupt checkpoint)")
        cfg = ModelConfig.from_dict(cfg_dict)
        store = ParamStore()
        for name, v in doc["params"]:
            store.add(name, np.asarray(v, dtype=np.float64))
        conn = Connectome(
            region_names=tuple(doc["connectome"]["names"]),
            adjacency=np.asarray(doc["connectome"]["weights"], dtype=np.float64))
        model = MoeModel(config=cfg, params=store,
                         region_names=tuple(doc["region_names"]))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint: {e}") from None
    meta = CheckpointMeta(connectome=conn, rng_state=doc.get("rng_state"),
                          train_config=doc.get("train_config"))
    return model, meta
