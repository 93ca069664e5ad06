"""Run configuration: JSON schema, shipped presets, overrides."""

import copy
import json
import os
from importlib import resources

import jsonschema

DATA_DIR_ENV = "G2PT_DATA_DIR"

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "g2p-transformer run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "train"],
    "properties": {
        "dataset": {"enum": ["cmudict", "nettalk"]},
        "train": {"type": "string"},
        "dev": {"type": ["string", "null"]},
        "test": {"type": ["string", "null"]},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_enc_blocks": {"type": "integer", "minimum": 1},
                "n_dec_blocks": {"type": "integer", "minimum": 1},
                "d_m": {"type": "integer", "minimum": 2},
                "d_ff": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "max_len": {"type": "integer", "minimum": 3},
                "scale_embeddings": {"type": "boolean"},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patience": {"type": "integer", "minimum": 1},
                "decay": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "lr_floor": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "dev_size": {"type": "integer", "minimum": 1},
                "target_dev_wer": {"type": ["number", "null"], "minimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "dev": None,
    "test": None,
    "seed": 0,
    "output_dir": "runs/default",
    "model": {"n_enc_blocks": 4, "n_dec_blocks": 4, "d_m": 128, "d_ff": 512, "heads": 4,
              "dropout": 0.1, "max_len": 24, "scale_embeddings": True},
    "optimizer": {"lr": 2e-4, "beta1": 0.9, "beta2": 0.998, "adam_eps": 1e-8,
                  "clip_norm": 5.0},
    "schedule": {"patience": 50, "decay": 0.2, "lr_floor": 1e-7},
    "training": {"batch_size": 128, "max_epochs": 1000, "eval_every": 1, "dev_size": 1000,
                 "target_dev_wer": None},
}

BATCH_SIZE = {"cmudict": 128, "nettalk": 64}
SECTIONS = ("model", "optimizer", "schedule", "training")


class ConfigError(ValueError):
    pass


def preset_names():
    root = resources.files(__package__) / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _read_raw(path_or_preset):
    if os.path.exists(path_or_preset):
        with open(path_or_preset, encoding="utf-8") as fh:
            return json.load(fh)
    name = os.path.basename(path_or_preset)
    name = name[:-5] if name.endswith(".json") else name
    res = resources.files(__package__) / "configs" / f"{name}.json"
    if res.is_file():
        return json.loads(res.read_text(encoding="utf-8"))
    raise ConfigError(f"no config file or preset named {path_or_preset!r}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings. Keys may be dotted (``model.d_m``) or bare
    names of a field in any section (``n_enc_blocks``)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        if "." in key:
            section, name = key.split(".", 1)
            cfg.setdefault(section, {})[name] = value
            continue
        owners = [s for s in SECTIONS if key in DEFAULTS[s]]
        if owners:
            cfg.setdefault(owners[0], {})[key] = value
        elif key in SCHEMA["properties"]:
            cfg[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def resolve(cfg):
    """Fill defaults and validate against the schema."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from None
    out = copy.deepcopy(DEFAULTS)
    out["training"]["batch_size"] = BATCH_SIZE[cfg["dataset"]]
    for key, value in cfg.items():
        if key in SECTIONS:
            out[key].update(value)
        else:
            out[key] = value
    return out


def load_config(path_or_preset, overrides=()):
    return resolve(apply_overrides(_read_raw(path_or_preset), overrides))


def data_path(path):
    """Resolve a data path, relative ones against ``$G2PT_DATA_DIR`` if set."""
    if path is None or os.path.isabs(path):
        return path
    base = os.environ.get(DATA_DIR_ENV)
    return os.path.join(base, path) if base else path
