"""Flat key=value run configuration: file + command-line flag merge.

Grammar: one ``key = value`` per line, ``#`` starts a comment. Flags win
over file values; the DIVSYNTH_SEED environment variable wins over both
for the seed. Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _tuple2f(s):
    parts = [float(x) for x in str(s).split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated numbers, got {s!r}")
    return tuple(parts)


# key -> (parser, default); one registry for every knob a run can touch
KNOWN_KEYS: dict = {
    # synthetic world
    "image_size": (int, 32),
    "classes": (int, 4),
    "train_count": (int, 256),
    "test_count": (int, 64),
    "illumination": (_tuple2f, (0.65, 1.0)),
    "shading_strength": (float, 0.05),
    "seed": (int, 0),
    # training
    "base": (str, "crn"),
    "epochs": (int, 100),
    "lr": (float, 2e-4),
    "adam_b1": (float, 0.5),
    "adam_b2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "beta": (float, None),
    "lambda_c": (float, 0.3),
    "alpha": (float, 100.0),
    "checkpoint_every": (int, 0),
    "unet_width": (int, 16),
    "unet_depth": (int, 3),
    "dropout": (float, 0.5),
    "disc_width": (int, 16),
    "disc_stages": (int, 3),
    "crn_width": (int, 32),
    "crn_base": (int, 2),
    "phi_stages": (int, 2),
    "phi_width": (int, 12),
    "phi_seed": (int, 1234),
    "phi_scale": (float, 24.0),
    "phi_chroma": (float, 8.0),
    "augment_jitter": (int, 0),
    "augment_flip": (float, 0.0),
    # evaluation / acceptance thresholds (recorded in reports)
    "eval_samples": (int, 4),
    "diversity_k": (int, 8),
    "threshold_diversity_ratio": (float, 3.0),
    "threshold_mean_linkage": (float, 2.0),
    "threshold_accuracy_gap": (float, 0.05),
    # figures
    "figures": (lambda s: str(s).lower() in ("1", "true", "yes", "on"), True),
}


def parse_config_file(path) -> dict:
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = val
    return values


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> dict:
    """Merge defaults <- file <- flags (<- DIVSYNTH_SEED for the seed)."""
    out = {}
    for key, (parse, default) in KNOWN_KEYS.items():
        out[key] = default
    for source in (file_values or {}), (flag_values or {}):
        for key, val in source.items():
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if val is None:
                continue
            parse = KNOWN_KEYS[key][0]
            out[key] = val if not isinstance(val, str) else parse(val)
    env_seed = os.environ.get("DIVSYNTH_SEED")
    if env_seed is not None:
        try:
            out["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"DIVSYNTH_SEED must be an integer, got {env_seed!r}") from None
    return out


def format_resolved(cfg: dict) -> str:
    """Canonical echo of a fully-resolved config, one key per line."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
