"""Training configuration files.

The train spec is a versioned YAML document:

.. code-block:: yaml

    version: 1
    exemplars:
      - path: histology.png          # 8-bit RGB PNG
        directions: [0, 1, 2]        # slicing axes this exemplar constrains
        rotation: 0                  # 0 | 90 | 180 | 270
        flip: false
    histogram_match: false           # match later exemplars to the first
    iterations: 3000
    learning_rate: 0.1
    batch_size: 10
    slice_size: null                 # null = exemplar resolution
    seeds: {init: 0, noise: 0, offsets: 1}
    checkpoint_every: 0
    normalize_gradients: false
    output:
      model: model.stxg
      loss_log: loss.csv
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .imageio import ROTATIONS


class ConfigError(ValueError):
    """Invalid train spec, with the offending key in the message."""


@dataclass
class ExemplarSpec:
    path: str
    directions: tuple
    rotation: int = 0
    flip: bool = False


@dataclass
class TrainSpec:
    exemplars: list
    histogram_match: bool = False
    iterations: int = 3000
    learning_rate: float = 0.1
    batch_size: int = 10
    slice_size: int = None
    init_seed: int = 0
    noise_seed: int = 0
    offset_seed: int = 1
    checkpoint_every: int = 0
    normalize_gradients: bool = False
    model_path: str = "model.stxg"
    loss_log_path: str = "loss.csv"

    @property
    def directions(self):
        out = []
        for e in self.exemplars:
            out.extend(e.directions)
        return tuple(out)


def load_train_spec(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    version = doc.get("version", 1)
    if version != 1:
        raise ConfigError(f"{path}: unsupported version {version}")

    raw_exemplars = doc.get("exemplars")
    if not isinstance(raw_exemplars, list) or not raw_exemplars:
        raise ConfigError(f"{path}: 'exemplars' must be a non-empty list")
    base = os.path.dirname(os.path.abspath(path))
    exemplars = []
    for i, entry in enumerate(raw_exemplars):
        where = f"{path}: exemplars[{i}]"
        if not isinstance(entry, dict) or "path" not in entry:
            raise ConfigError(f"{where}: needs a 'path' key")
        img_path = entry["path"]
        if not os.path.isabs(img_path):
            img_path = os.path.join(base, img_path)
        if not os.path.exists(img_path):
            raise ConfigError(f"{where}.path: file not found: {img_path}")
        if "directions" in entry:
            dirs = entry["directions"]
        elif "direction" in entry:
            dirs = [entry["direction"]]
        else:
            raise ConfigError(f"{where}: needs 'direction' or 'directions'")
        if not isinstance(dirs, list) or not dirs:
            raise ConfigError(f"{where}.directions: must be a non-empty list")
        for d in dirs:
            if d not in (0, 1, 2):
                raise ConfigError(f"{where}.directions: {d} not in 0..2")
        rotation = entry.get("rotation", 0)
        if rotation not in ROTATIONS:
            raise ConfigError(
                f"{where}.rotation: {rotation} not in {list(ROTATIONS)}")
        flip = bool(entry.get("flip", False))
        exemplars.append(ExemplarSpec(path=img_path, directions=tuple(dirs),
                                      rotation=rotation, flip=flip))
    all_dirs = [d for e in exemplars for d in e.directions]
    if len(set(all_dirs)) != len(all_dirs):
        raise ConfigError(f"{path}: exemplars constrain a direction twice")
    if not 1 <= len(all_dirs) <= 3:
        raise ConfigError(
            f"{path}: total constrained directions must be 1..3, got "
            f"{len(all_dirs)}")

    def intval(key, default, minimum=None):
        v = doc.get(key, default)
        if v is None:
            return None
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConfigError(f"{path}: '{key}' must be an integer")
        if minimum is not None and v < minimum:
            raise ConfigError(f"{path}: '{key}' must be >= {minimum}")
        return v

    seeds = doc.get("seeds", {}) or {}
    if not isinstance(seeds, dict):
        raise ConfigError(f"{path}: 'seeds' must be a mapping")
    output = doc.get("output", {}) or {}
    if not isinstance(output, dict):
        raise ConfigError(f"{path}: 'output' must be a mapping")

    def outpath(key, default):
        p = output.get(key, default)
        return p if os.path.isabs(p) else os.path.join(base, p)

    lr = doc.get("learning_rate", 0.1)
    if not isinstance(lr, (int, float)) or isinstance(lr, bool) or lr < 0:
        raise ConfigError(f"{path}: 'learning_rate' must be a number >= 0")

    return TrainSpec(
        exemplars=exemplars,
        histogram_match=bool(doc.get("histogram_match", False)),
        iterations=intval("iterations", 3000, 1),
        learning_rate=float(lr),
        batch_size=intval("batch_size", 10, 1),
        slice_size=intval("slice_size", None, 1),
        init_seed=int(seeds.get("init", 0)),
        noise_seed=int(seeds.get("noise", 0)),
        offset_seed=int(seeds.get("offsets", 1)),
        checkpoint_every=intval("checkpoint_every", 0, 0),
        normalize_gradients=bool(doc.get("normalize_gradients", False)),
        model_path=outpath("model", "model.stxg"),
        loss_log_path=outpath("loss_log", "loss.csv"),
    )
