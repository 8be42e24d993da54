"""YAML run configuration: network fields, delay model, adversaries, workload.

Example::

    seed: 7
    n: 4
    f: 1
    endpoints: [10.0.0.1:9000, 10.0.0.2:9000, 10.0.0.3:9000, 10.0.0.4:9000]
    delay: {min: 1, max: 40, distribution: uniform, delta: 10, gst: 0}
    adversaries: {3: silent}
    proposal_threshold: 10
    workload: {kind: constant_rate, rate: 100, duration: 5}
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Union

import yaml

from .network import DelayModel, SimConfig
from .workload import WorkloadItem, generate_workload

_DELAY_KEYS = {"min": "min_delay", "max": "max_delay", "distribution": "distribution",
               "delta": "delta", "gst": "gst"}


class ConfigError(ValueError):
    pass


def _gst(value):
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity", "never")):
        return None
    return int(value)


def parse_config(doc: dict[str, Any]) -> tuple[SimConfig, dict]:
    """Split a config document into a SimConfig and the workload spec."""
    doc = dict(doc or {})
    workload = doc.pop("workload", None) or {}
    kw: dict[str, Any] = {}
    delay = doc.pop("delay", None)
    if delay is not None:
        unknown = set(delay) - set(_DELAY_KEYS)
        if unknown:
            raise ConfigError(f"unknown delay keys: {sorted(unknown)}")
        dkw = {_DELAY_KEYS[k]: v for k, v in delay.items()}
        if "gst" in dkw:
            dkw["gst"] = _gst(dkw["gst"])
        kw["delay"] = DelayModel(**dkw)
    if "adversaries" in doc:
        kw["adversaries"] = {int(k): str(v) for k, v in (doc.pop("adversaries") or {}).items()}
    names = {f.name for f in fields(SimConfig)}
    for k, v in doc.items():
        if k not in names:
            raise ConfigError(f"unknown config key {k!r}")
        kw[k] = v
    if "n" in kw and "f" not in kw:
        kw["f"] = (kw["n"] - 1) // 3
    try:
        return SimConfig(**kw), dict(workload)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: Union[str, Path]) -> tuple[SimConfig, dict]:
    with Path(path).open() as fh:
        return parse_config(yaml.safe_load(fh))


def build_workload(spec: dict) -> list[WorkloadItem]:
    if not spec:
        return []
    spec = dict(spec)
    kind = spec.pop("kind", "constant_rate")
    return generate_workload(kind, **spec)
