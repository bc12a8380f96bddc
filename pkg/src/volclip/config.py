"""Run configuration: defaults, config files (JSON or key=value lines),
CTCLIP_* environment variables, and --override flags, merged in that order.
Every run writes the resolved snapshot next to its outputs.
"""

from __future__ import annotations

import json
import os
from copy import deepcopy
from pathlib import Path
from typing import Optional, Sequence

from .encoders import PatchConfig, TextConfig
from .training import TrainConfig
from .volume import TargetGeometry

ENV_PREFIX = "CTCLIP_"

DEFAULTS = {
    "geometry": {"shape": [480, 480, 240], "spacing_mm": [0.75, 0.75, 1.5]},
    "vision": {
        "patch_xyz": [30, 30, 15],
        "embed_dim": 512,
        "depth_spatial": 4,
        "depth_temporal": 4,
        "heads": 8,
        "mlp_ratio": 4.0,
    },
    "text": {
        "max_len": 512,
        "embed_dim": 768,
        "depth": 4,
        "heads": 8,
        "mlp_ratio": 4.0,
    },
    "shared_dim": 512,
    "train": {
        "batch_size": 8,
        "steps": 200,
        "learning_rate": 1e-3,
        "weight_decay": 0.01,
        "seed": 0,
        "fraction": 1.0,
        "text_mode": "both",
        "accum_steps": 1,
        "temperature_init": 0.07,
        "loss": "infonce",
    },
    "finetune": {
        "steps": 100,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "weight_decay": 0.01,
        "chunk_size": 12,
        "chunk_step_mode": "accumulate",
        "train_scope": "all",
        "freeze_backbone": True,
    },
    "zeroshot": {
        "template_id": 7,
        "use_learned_temperature": True,
    },
    "eval": {
        "bootstrap_iterations": 500,
        "permutations": 1000,
        "threshold_method": "corner",
    },
}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def parse_config_file(path) -> dict:
    """JSON files load as-is; anything else is key=value lines with dotted
    keys (# comments allowed)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    config: dict = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        set_path(config, key.strip(), _parse_value(value.strip()))
    return config


def set_path(config: dict, dotted_key: str, value) -> None:
    parts = dotted_key.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def deep_merge(base: dict, override: dict) -> dict:
    out = deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = deepcopy(value)
    return out


def env_overrides(environ=None) -> dict:
    """CTCLIP_TRAIN_STEPS=500 -> {"train": {"steps": 500}}. Double
    underscores survive as single underscores inside one key segment."""
    environ = os.environ if environ is None else environ
    config: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        # single-level fallback: TRAIN_STEPS means train.steps
        if "." not in dotted and "_" in dotted:
            head, _, tail = dotted.partition("_")
            if head in DEFAULTS and isinstance(DEFAULTS[head], dict):
                dotted = f"{head}.{tail}"
        set_path(config, dotted, _parse_value(raw))
    return config


def resolve_config(config_path=None, overrides: Sequence[str] = (),
                   seed: Optional[int] = None, environ=None) -> dict:
    """defaults < file < environment < --override flags (< --seed)."""
    config = deepcopy(DEFAULTS)
    if config_path:
        config = deep_merge(config, parse_config_file(config_path))
    config = deep_merge(config, env_overrides(environ))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--override expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_path(config, key.strip(), _parse_value(value.strip()))
    if seed is not None:
        set_path(config, "train.seed", seed)
        set_path(config, "finetune.seed", seed)
    return config


def write_snapshot(config: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path


def geometry_from(config: dict) -> TargetGeometry:
    g = config["geometry"]
    return TargetGeometry(spacing_mm=tuple(g["spacing_mm"]), shape=tuple(g["shape"]))


def patch_config_from(config: dict) -> PatchConfig:
    v = config["vision"]
    return PatchConfig(
        patch_xyz=tuple(v["patch_xyz"]),
        embed_dim=v["embed_dim"],
        depth_spatial=v["depth_spatial"],
        depth_temporal=v["depth_temporal"],
        heads=v["heads"],
        mlp_ratio=v["mlp_ratio"],
    )


def text_config_from(config: dict, vocab_size: int) -> TextConfig:
    t = config["text"]
    return TextConfig(
        vocab_size=vocab_size,
        max_len=t["max_len"],
        embed_dim=t["embed_dim"],
        depth=t["depth"],
        heads=t["heads"],
        mlp_ratio=t["mlp_ratio"],
    )


def train_config_from(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        batch_size=t["batch_size"],
        steps=t["steps"],
        learning_rate=t["learning_rate"],
        weight_decay=t["weight_decay"],
        seed=t["seed"],
        fraction=t["fraction"],
        text_mode=t["text_mode"],
        accum_steps=t["accum_steps"],
        temperature_init=t["temperature_init"],
        loss=t.get("loss", "infonce"),
    )
