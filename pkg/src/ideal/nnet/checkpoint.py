"""Weight checkpoints: little-endian float32 flat file plus a JSON header."""
import hashlib
import json
from pathlib import Path

import numpy as np

from .classifier import Classifier


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_weights(model, path, train_config=None):
    """Write ``<path>.bin`` and ``<path>.json``; returns the two paths."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    json_path = path.with_suffix(".json")
    flat = model.get_flat().astype("<f4")
    bin_path.write_bytes(flat.tobytes())
    header = {
        "format": "float32-le",
        "n_values": int(flat.size),
        "layer_shapes": model.layer_shapes(),
        "model": model.config(),
        "seed": model.seed,
        "config_hash": config_hash({"model": model.config(), "train": train_config or {}}),
    }
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return bin_path, json_path


def load_weights(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    if flat.size != header["n_values"]:
        raise ValueError(f"checkpoint holds {flat.size} values, header says {header['n_values']}")
    cfg = dict(header["model"])
    model = Classifier(**cfg)
    shapes = [[i, n, list(a.shape)] for i, n, a in model.net.parameters()]
    if shapes != header["layer_shapes"]:
        raise ValueError("checkpoint layer shapes do not match the model architecture")
    model.set_flat(flat.astype(model.dtype))
    return model
