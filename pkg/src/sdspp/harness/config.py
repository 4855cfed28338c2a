"""Harness configuration: a packaged YAML default merged with user overrides."""

from __future__ import annotations

import copy
import functools
import os
from importlib import resources
from pathlib import Path

import yaml

OUTPUT_ENV = "SDSPP_OUTPUT_DIR"


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@functools.lru_cache(maxsize=1)
def _packaged() -> dict:
    text = resources.files("sdspp.harness").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def default_config() -> dict:
    return copy.deepcopy(_packaged())


def parse_override(item: str) -> dict:
    """Turn ``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    """Packaged defaults, then the YAML file at ``path``, then each override in order."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            cfg = merge(cfg, yaml.safe_load(fh) or {})
    for item in overrides:
        cfg = merge(cfg, parse_override(item) if isinstance(item, str) else item)
    return cfg


def output_dir(explicit=None) -> Path:
    """Output directory: explicit argument, else $SDSPP_OUTPUT_DIR, else ./sdspp_output."""
    path = Path(explicit or os.environ.get(OUTPUT_ENV) or "sdspp_output")
    path.mkdir(parents=True, exist_ok=True)
    return path
