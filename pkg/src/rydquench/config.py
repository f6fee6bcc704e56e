"""TOML run configuration with unit-tagged quantities.

Every physical quantity is a string such as ``"4.05 MHz"`` or ``"0.6 h/J"``.
Two unit systems exist: laboratory (MHz, us, MHz/us, MHz*a^6) and
interaction units (J, h/J, J^2/h, J*a^6). A config must use one system
throughout; values are stored as plain floats in that system's base units,
in which the evolution operator is exp(-2 pi i H t) either way.
"""
from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

UNITS = {
    "lab": {
        "freq": {"MHz": 1.0, "kHz": 1e-3},
        "time": {"us": 1.0, "µs": 1.0, "ns": 1e-3},
        "rate": {"MHz/us": 1.0, "MHz/µs": 1.0},
        "c6": {"MHz*a^6": 1.0},
    },
    "J": {
        "freq": {"J": 1.0},
        "time": {"h/J": 1.0},
        "rate": {"J^2/h": 1.0},
        "c6": {"J*a^6": 1.0},
    },
}

_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S+)\s*$")

# section -> key -> (kind, default); kinds with a dimension carry units
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    "geometry": {
        "nx": ("int", 4),
        "ny": ("int", 4),
        "spacing_ratio": ("float", 1.028),
        "roi": ("floats", None),
    },
    "interaction": {
        "c6": ("c6", None),
        "cutoff": ("str", "nnn"),
        "r_max": ("float", None),
        "shift_mode": ("str", "cluster"),
    },
    "schedule": {
        "kind": ("str", "sudden"),
        "omega": ("freq", None),
        "pulse_area": ("float", None),
        "hold": ("time", None),
        "rise": ("time", None),
        "fall": ("time", None),
        "detunings": ("freqs", None),
        "delta_i": ("freq", None),
        "delta_f": ("freq", None),
        "rate": ("rate", None),
        "checkpoints": ("times", None),
        "n_checkpoints": ("int", 21),
    },
    "solver": {
        "method": ("str", "nlce"),
        "order": ("int", 9),
        "steps": ("int", 5),
        "tolerance": ("float", 1e-10),
        "start_order": ("int", 3),
        "ed_nx": ("int", 4),
        "ed_ny": ("int", 4),
    },
    "analysis": {
        "window": ("ints", [3, 3]),
        "fit_r_min": ("float", 1.0),
        "fit_r_max": ("float", 4.0),
        "subsystem": ("ints", [3, 3]),
        "alpha": ("float", 1.0),
        "snapshots": ("str", None),
    },
    "sampling": {
        "shots": ("int", 10000),
        "rydberg_removal_eff": ("float", 1.0),
        "filling": ("float", 1.0),
        "ground_detection_eff": ("float", 1.0),
    },
    "fit": {
        "scan": ("str", None),
        "grid_c6": ("c6s", None),
        "grid_detunings": ("freqs", None),
        "order": ("int", None),
        "weighting": ("str", "auto"),
        "alpha_min": ("float", 0.3),
        "grid_cache": ("str", None),
    },
    "output": {
        "dir": ("str", "out"),
        "prefix": ("str", ""),
        "plot": ("bool", True),
    },
}
TOP_LEVEL = {"seed": ("int", 0), "title": ("str", "")}


def parse_quantity(text, dimension: str) -> Tuple[float, str]:
    """'4.05 MHz' -> (4.05, 'lab'); raises ConfigError on unknown units."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        if text == 0:
            return 0.0, ""  # zero needs no unit
        raise ConfigError(f"quantity {text!r} lacks a unit tag")
    if not isinstance(text, str):
        raise ConfigError(f"quantity {text!r} must be a string like '1.0 MHz'")
    m = _QTY.match(text)
    if not m:
        raise ConfigError(f"cannot parse quantity {text!r}")
    value, unit = float(m.group(1)), m.group(2)
    for system, dims in UNITS.items():
        if unit in dims[dimension]:
            return value * dims[dimension][unit], system
    known = sorted(u for dims in UNITS.values() for u in dims[dimension])
    raise ConfigError(f"unit {unit!r} is not a {dimension} unit (expected one of {known})")


@dataclass
class RunConfig:
    sections: Dict[str, Dict[str, Any]]
    seed: int = 0
    title: str = ""
    unit_system: str = "lab"
    source: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    @property
    def hash(self) -> str:
        blob = json.dumps({"raw": self.raw}, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def units(self) -> Dict[str, str]:
        d = UNITS[self.unit_system]
        return {k: next(iter(v)) for k, v in d.items()}

    def replace(self, section: str, **kw) -> "RunConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections[section].update(kw)
        raw = json.loads(json.dumps(self.raw, default=str))
        raw.setdefault(section, {}).update(kw)
        return RunConfig(sections, self.seed, self.title, self.unit_system, self.source, raw)


def _convert(kind: str, value, where: str, systems: set):
    scalar_dims = {"freq": "freq", "time": "time", "rate": "rate", "c6": "c6"}
    list_dims = {"freqs": "freq", "times": "time", "c6s": "c6"}
    try:
        if kind in scalar_dims:
            v, sys_ = parse_quantity(value, scalar_dims[kind])
            if sys_:
                systems.add(sys_)
            return v
        if kind in list_dims:
            if not isinstance(value, list) or not value:
                raise ConfigError("expected a non-empty list")
            out = []
            for item in value:
                v, sys_ = parse_quantity(item, list_dims[kind])
                if sys_:
                    systems.add(sys_)
                out.append(v)
            return out
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError("expected an integer")
            return value
        if kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("expected a number")
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise ConfigError("expected a string")
            return value
        if kind == "bool":
            if not isinstance(value, bool):
                raise ConfigError("expected true or false")
            return value
        if kind in ("floats", "ints"):
            if not isinstance(value, list):
                raise ConfigError("expected a list")
            conv = float if kind == "floats" else int
            if kind == "ints" and not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
                raise ConfigError("expected a list of integers")
            return [conv(x) for x in value]
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise AssertionError(kind)


def _locate(text: Optional[str], section: Optional[str], key: str) -> str:
    """' (line N)' for ``key`` inside ``[section]`` of the raw TOML text, if found."""
    if not text:
        return ""
    current = None
    pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        head = re.match(r"^\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if section is not None and current == section and key == "":
                return f" (line {n})"
            continue
        if key and current == section and pat.match(line):
            return f" (line {n})"
    return ""


def parse_config(doc: Dict[str, Any], source: Optional[str] = None,
                 text: Optional[str] = None) -> RunConfig:
    label = source or "<config>"
    systems: set = set()
    sections: Dict[str, Dict[str, Any]] = {}
    top = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in SCHEMA:
                raise ConfigError(f"{label}{_locate(text, key, '')}: unknown section [{key}] "
                                  f"(allowed: {sorted(SCHEMA)})")
            continue
        if key not in TOP_LEVEL:
            raise ConfigError(f"{label}{_locate(text, None, key)}: unknown top-level key {key!r}")
        top[key] = _convert(TOP_LEVEL[key][0], value, f"{label}{_locate(text, None, key)}: {key}",
                            systems)
    for name, schema in SCHEMA.items():
        given = doc.get(name, {})
        unknown = sorted(set(given) - set(schema))
        if unknown:
            raise ConfigError(f"{label}{_locate(text, name, unknown[0])}: unknown key(s) {unknown} "
                              f"in [{name}] (allowed: {sorted(schema)})")
        sec = {}
        for key, (kind, default) in schema.items():
            if key in given:
                sec[key] = _convert(kind, given[key], f"{label}{_locate(text, name, key)}: [{name}].{key}",
                                    systems)
            else:
                sec[key] = default
        sections[name] = sec
    if len(systems) > 1:
        raise ConfigError(f"{label}: mixed unit systems {sorted(systems)}; use one throughout")
    cfg = RunConfig(sections, top.get("seed", 0), top.get("title", ""),
                    systems.pop() if systems else "lab", source, doc)
    _validate(cfg, label)
    return cfg


def _validate(cfg: RunConfig, label: str):
    g, i, s, sv = cfg["geometry"], cfg["interaction"], cfg["schedule"], cfg["solver"]
    if g["nx"] < 1 or g["ny"] < 1:
        raise ConfigError(f"{label}: [geometry] nx and ny must be >= 1")
    if not g["spacing_ratio"] > 0:
        raise ConfigError(f"{label}: [geometry].spacing_ratio must be positive")
    if g["roi"] is not None and len(g["roi"]) != 2:
        raise ConfigError(f"{label}: [geometry].roi must be [inner, outer]")
    if i["cutoff"] not in ("nn", "nnn", "radius"):
        raise ConfigError(f"{label}: [interaction].cutoff must be nn, nnn or radius")
    if i["cutoff"] == "radius" and not (i["r_max"] or 0) > 0:
        raise ConfigError(f"{label}: [interaction].r_max required for the radius cutoff")
    if i["shift_mode"] not in ("bulk", "cluster"):
        raise ConfigError(f"{label}: [interaction].shift_mode must be bulk or cluster")
    if s["kind"] not in ("sudden", "ramp"):
        raise ConfigError(f"{label}: [schedule].kind must be sudden or ramp")
    if s["kind"] == "sudden" and s["hold"] is not None and s["pulse_area"] is not None:
        raise ConfigError(f"{label}: [schedule] give either hold or pulse_area, not both")
    if s["detunings"] is not None and any(b <= a for a, b in zip(s["detunings"], s["detunings"][1:])):
        raise ConfigError(f"{label}: [schedule].detunings must be strictly increasing")
    if sv["method"] not in ("nlce", "ed", "both"):
        raise ConfigError(f"{label}: [solver].method must be nlce, ed or both")
    if sv["steps"] < 1:
        raise ConfigError(f"{label}: [solver].steps must be >= 1")
    if not 0 < cfg["analysis"]["alpha"] <= 1:
        raise ConfigError(f"{label}: [analysis].alpha must lie in (0, 1]")
    if cfg["sampling"]["shots"] < 2:
        raise ConfigError(f"{label}: [sampling].shots must be >= 2")
    for k in ("rydberg_removal_eff", "filling", "ground_detection_eff"):
        if not 0 <= cfg["sampling"][k] <= 1:
            raise ConfigError(f"{label}: [sampling].{k} must lie in [0, 1]")
    if cfg["fit"]["weighting"] not in ("auto", "uniform", "inverse-variance"):
        raise ConfigError(f"{label}: [fit].weighting must be auto, uniform or inverse-variance")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads_config(text, str(path))


def loads_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return parse_config(doc, source, text)
