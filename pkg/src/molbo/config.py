"""Flat dotted-key experiment configuration.

Grammar, one setting per line::

    # comment
    key = value

Values are read as ``true``/``false``, ``none``, integers, floats, or
strings; a comma turns a value into a list (``surrogate.hidden = 50,50``).
Later sources win: preset < config file < command-line overrides. Any key
outside the schema is an error. A ``.json`` config is read as the flat
``config`` object of a run summary, so a run can be replayed from its echo.

Keys::

    pool, features, directions, out_dir, label
    seeds (count), seed_start, T, m
    representation = fingerprints | features | strings
    fingerprint.radius, fingerprint.width
    acquisition.name = ts | ei | ucb, acquisition.beta
    gap.baseline = best | first
    trace.wall_time
    surrogate.name = gp | laplace_mlp | lora_transformer
    surrogate.<option>   (options depend on the surrogate)
"""

import json
import os
from dataclasses import dataclass

from .loop import SURROGATE_DEFAULTS, SURROGATES, CampaignConfig, ConfigError

GENERAL_DEFAULTS = {
    "pool": None,
    "features": None,
    "directions": None,
    "out_dir": "runs",
    "label": None,
    "seeds": 5,
    "seed_start": 0,
    "T": 30,
    "m": 10,
    "representation": "fingerprints",
    "fingerprint.radius": 2,
    "fingerprint.width": 1024,
    "acquisition.name": "ts",
    "acquisition.beta": 2.0,
    "gap.baseline": "best",
    "trace.wall_time": True,
    "surrogate.name": "gp",
}
LIST_KEYS = {"directions", "surrogate.hidden", "surrogate.targets"}

PRESETS = {
    "gp-tanimoto": {"surrogate.name": "gp", "surrogate.kernel": "tanimoto",
                    "representation": "fingerprints", "m": 10, "T": 30, "seeds": 5},
    "gp-matern": {"surrogate.name": "gp", "surrogate.kernel": "matern52",
                  "representation": "features", "m": 10, "T": 30, "seeds": 5},
    "la-mlp": {"surrogate.name": "laplace_mlp", "surrogate.activation": "relu",
               "representation": "features", "m": 10, "T": 30, "seeds": 5},
    "la-mlp-fp": {"surrogate.name": "laplace_mlp", "surrogate.activation": "tanh",
                  "representation": "fingerprints", "m": 10, "T": 30, "seeds": 5},
    "lora-lla": {"surrogate.name": "lora_transformer", "representation": "strings",
                 "surrogate.base_weights": "@toy", "m": 5, "T": 30, "seeds": 5},
}


@dataclass
class RunSettings:
    """A campaign config plus the file-level settings around it."""

    campaign: CampaignConfig
    pool: str
    features: str
    directions: list
    out_dir: str
    label: str
    seeds: list
    flat: dict

    def echo(self):
        return dict(self.flat)


def parse_value(text):
    text = text.strip()
    if "," in text:
        return [parse_value(p) for p in text.split(",") if p.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def read_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        data = json.loads(text)
        data = data.get("config", data)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: no flat config object")
        return dict(data)
    return parse_text(text, path)


def parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def valid_keys(surrogate):
    keys = set(GENERAL_DEFAULTS)
    keys.update(f"surrogate.{k}" for k in SURROGATE_DEFAULTS.get(surrogate, {}))
    return sorted(keys)


def _coerce(key, value, default):
    if key in LIST_KEYS:
        if value is None:
            return None
        return list(value) if isinstance(value, (list, tuple)) else [value]
    if isinstance(value, list):
        raise ConfigError(f"{key} takes a single value, got a list")
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and default != "auto" and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def resolve(preset=None, file_values=None, overrides=None):
    """Merge sources into fully expanded settings; unknown keys fail fast."""
    merged = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; valid: {', '.join(sorted(PRESETS))}")
        merged.update(PRESETS[preset])
    merged.update(file_values or {})
    merged.update(overrides or {})
    name = merged.get("surrogate.name", GENERAL_DEFAULTS["surrogate.name"])
    if name not in SURROGATES:
        raise ConfigError(f"unknown surrogate {name!r}; valid: {', '.join(SURROGATES)}")
    allowed = valid_keys(name)
    unknown = sorted(set(merged) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}; valid keys: {', '.join(allowed)}")
    flat = dict(GENERAL_DEFAULTS)
    flat.update({f"surrogate.{k}": v for k, v in SURROGATE_DEFAULTS[name].items()})
    for key, value in merged.items():
        flat[key] = _coerce(key, value, flat.get(key))
    for key in LIST_KEYS:
        if isinstance(flat.get(key), tuple):
            flat[key] = list(flat[key])
    if flat["seeds"] < 1:
        raise ConfigError("seeds must be at least 1")
    options = {k[len("surrogate."):]: v for k, v in flat.items()
               if k.startswith("surrogate.") and k != "surrogate.name"}
    campaign = CampaignConfig(
        surrogate=name,
        options=options,
        representation=flat["representation"],
        acquisition=flat["acquisition.name"],
        beta=flat["acquisition.beta"],
        T=flat["T"],
        m=flat["m"],
        fp_radius=flat["fingerprint.radius"],
        fp_width=flat["fingerprint.width"],
        gap_baseline=flat["gap.baseline"],
        wall_time=flat["trace.wall_time"],
    )
    campaign.validate()
    seeds = list(range(flat["seed_start"], flat["seed_start"] + flat["seeds"]))
    return RunSettings(campaign, flat["pool"], flat["features"], flat["directions"],
                       flat["out_dir"], flat["label"], seeds, flat)
