"""One resolved configuration for a whole run: data and workload sources,
cost-model weights, partitioner/packer/estimator knobs, acceleration ratios,
and benchmark settings.  Loadable from a single TOML or JSON file, overridable
field by field, and hashable for provenance in reports.
"""

from __future__ import annotations

import hashlib
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

from .cdfs import CdfConfig
from .core import Distribution, WorkloadSpec
from .packing import RlConfig
from .partition import CostWeights, Limits, SgdConfig


@dataclass(frozen=True)
class RunConfig:
    """Everything a build/bench run needs, in one place.

    ``dataset`` and ``workload`` are file paths; an empty workload path means
    queries come from ``workload_spec`` instead.  ``estimator`` picks how the
    partitioner counts keyword matches: ``"exact"`` scans, ``"models"`` uses
    the fitted per-keyword distribution models.  ``sampling_ratio`` < 1
    trains on a stratified workload sample; ``clustering_ratio`` < 1
    pre-groups bottom clusters before level packing.
    """

    dataset: str = ""
    workload: str = ""
    workload_spec: WorkloadSpec = field(
        default_factory=lambda: WorkloadSpec(count=100))
    estimator: str = "exact"
    weights: CostWeights = field(default_factory=CostWeights)
    limits: Limits = field(default_factory=Limits)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    cdf: CdfConfig = field(default_factory=CdfConfig)
    sampling_ratio: float = 1.0
    clustering_ratio: float = 1.0
    repetitions: int = 100
    seed: int = 0
    buffer_capacity: int = 100_000

    def __post_init__(self) -> None:
        if self.estimator not in ("exact", "models"):
            raise ValueError(f"unknown estimator {self.estimator!r}; "
                             f"expected 'exact' or 'models'")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ValueError("sampling_ratio must be in (0, 1]")
        if not 0.0 < self.clustering_ratio <= 1.0:
            raise ValueError("clustering_ratio must be in (0, 1]")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")


_SECTIONS = {
    "workload_spec": WorkloadSpec,
    "weights": CostWeights,
    "limits": Limits,
    "sgd": SgdConfig,
    "rl": RlConfig,
    "cdf": CdfConfig,
}


def _coerce(cls, raw: Mapping[str, Any]):
    """Build a config dataclass from a plain mapping, with tuple/enum fixups
    and unknown-key rejection."""
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        if name == "distribution" and isinstance(value, str):
            value = Distribution(value.upper())
        elif name == "restarts":
            value = tuple((str(m), float(x)) for m, x in value)
        elif name == "hidden":
            value = tuple(int(v) for v in value)
        kwargs[name] = value
    missing = [n for n, f in known.items()
               if n not in kwargs and f.default is MISSING
               and f.default_factory is MISSING]  # type: ignore[misc]
    if missing:
        raise ValueError(f"{cls.__name__} requires keys: {missing}")
    return cls(**kwargs)


def _merge(base: dict, extra: Mapping) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _nest_dotted(overrides: Mapping[str, Any]) -> dict:
    """{"rl.epochs": 5, "seed": 1} -> {"rl": {"epochs": 5}, "seed": 1}"""
    out: dict[str, Any] = {}
    for key, value in overrides.items():
        parts = key.split(".")
        cur = out
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
    return out


def config_from_mapping(doc: Mapping[str, Any]) -> RunConfig:
    """Resolve a raw (possibly nested) mapping into a RunConfig."""
    doc = dict(doc)
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            section = doc.pop(name)
            if not isinstance(section, Mapping):
                raise ValueError(f"section {name!r} must be a table/object")
            kwargs[name] = _coerce(cls, section)
    top = _coerce(RunConfig, doc)  # validates the remaining scalar keys
    merged = {f.name: getattr(top, f.name) for f in fields(RunConfig)}
    merged.update(kwargs)
    return RunConfig(**merged)


def load_config(path: str | Path | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Load a RunConfig from a ``.toml`` or ``.json`` file, then apply
    dotted-key overrides (e.g. ``{"rl.epochs": 10, "seed": 3}``).

    With no path, the defaults plus overrides apply.  Unknown keys anywhere
    raise ValueError.
    """
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if p.suffix == ".toml":
            with open(p, "rb") as f:
                doc = tomllib.load(f)
        elif p.suffix == ".json":
            with open(p) as f:
                doc = json.load(f)
        else:
            raise ValueError(f"config must be .toml or .json, got {p.suffix!r}")
    if overrides:
        doc = _merge(doc, _nest_dotted(overrides))
    return config_from_mapping(doc)


def resolved_dict(cfg: RunConfig) -> dict[str, Any]:
    """The fully resolved config as plain JSON-serializable data."""

    def fix(v: Any) -> Any:
        if isinstance(v, Distribution):
            return v.value
        if is_dataclass(v) and not isinstance(v, type):
            return {k: fix(x) for k, x in asdict(v).items()}
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        return v

    return {f.name: fix(getattr(cfg, f.name)) for f in fields(RunConfig)}


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the canonical JSON form of the resolved config."""
    doc = json.dumps(resolved_dict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()
