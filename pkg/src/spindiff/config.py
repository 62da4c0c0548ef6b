"""Project configuration: species registry and model parameters.

A config is a JSON document; boundary units follow the key suffixes
(``_MHz``, ``_cm3``, ``_mT`` ...) and are converted to SI on load. A user
file is merged over the packaged defaults, so it only needs the keys it
changes.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .spinham import SpinSpecies

CM3 = 1e6  # cm^-3 -> m^-3


def default_config() -> dict:
    text = resources.files("spindiff").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k == "species" and isinstance(v, list):
            # replace by name, append new
            names = {s["name"]: i for i, s in enumerate(out.get("species", []))}
            for s in v:
                if "name" not in s:
                    raise ConfigError("every species entry needs a name")
                if s["name"] in names:
                    out["species"][names[s["name"]]] = {**out["species"][names[s["name"]]], **s}
                else:
                    out.setdefault("species", []).append(s)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, *, use_defaults=True) -> dict:
    """Read a JSON config, merged over the defaults unless told otherwise."""
    base = default_config() if use_defaults else {}
    if path is None:
        return base
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be an object")
    if "constants" in user:
        raise ConfigError("overriding physical constants is not allowed")
    return _merge(base, user)


def species_from_dict(d: dict) -> SpinSpecies:
    try:
        return SpinSpecies(
            name=d["name"],
            S=float(d.get("S", 0.5)),
            I=float(d.get("I", 0.0)),
            g=d["g"],
            A=[a * 1e6 for a in d.get("A_MHz", [0, 0, 0])],
            concentration=float(d.get("concentration_cm3", 0.0)) * CM3,
            linewidth=None if d.get("linewidth_MHz") is None else float(d["linewidth_MHz"]) * 1e6,
            T1=d.get("T1_s"),
            abundance=float(d.get("abundance", 1.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"species entry missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad species entry {d.get('name', '?')!r}: {exc}") from exc


def species_registry(config: dict | None = None) -> dict[str, SpinSpecies]:
    config = default_config() if config is None else config
    if "species" not in config:
        raise ConfigError("config has no species registry")
    return {d["name"]: species_from_dict(d) for d in config["species"]}


def section(config: dict, name: str) -> dict:
    if name not in config or not isinstance(config[name], dict):
        raise ConfigError(f"config has no '{name}' section")
    return config[name]
