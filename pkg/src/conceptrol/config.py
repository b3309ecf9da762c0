"""Run configuration: one JSON document plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .control import MODES, ConceptrolConfig
from .toy import VARIANTS, EngineConfig, _check_engine, make_schedule

DEFAULTS = {
    "mode": "direct",
    "engine": {f.name: f.default for f in fields(EngineConfig)},
    "schedule": {"T": 50, "beta_start": 1e-4, "beta_end": 0.02},
    "conceptrol": {
        "lambda": 1.0,
        "warmup_ratio": None,
        "suppression_epsilon": 1e-6,
        "concept_block": 4,
    },
    "seeds": [0],
    "output_dir": None,
    "emit": {"images": True, "traces": True, "csv": True, "head_maps": False},
    "variants": list(VARIANTS),
    "transfer_threshold": 0.95,
}

_PAIR_KEYS = {"concept_span": 2, "region": 4}
_FLOAT_ENGINE_KEYS = {"delta", "value_gain"}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is parsed as JSON and falls back to a plain string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, "empty override key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_override(doc: dict, path: list[str], value) -> None:
    node = doc
    for i, part in enumerate(path[:-1]):
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(path[: i + 1]), "not an object")
        node = nxt
    node[path[-1]] = value


@dataclass
class RunConfig:
    mode: str
    engine: EngineConfig
    schedule: dict
    conceptrol: ConceptrolConfig
    seeds: list[int]
    output_dir: str | None
    emit: dict = field(default_factory=lambda: dict(DEFAULTS["emit"]))
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    transfer_threshold: float = 0.95

    def make_schedule(self):
        s = self.schedule
        return make_schedule(s["T"], s["beta_start"], s["beta_end"])

    def echo(self) -> dict:
        """Everything that determines the artifacts; the output location is left out."""
        engine = {f.name: getattr(self.engine, f.name) for f in fields(EngineConfig)}
        for key in _PAIR_KEYS:
            engine[key] = list(engine[key])
        return {
            "mode": self.mode,
            "engine": engine,
            "schedule": dict(self.schedule),
            "conceptrol": self.conceptrol.to_dict(),
            "seeds": list(self.seeds),
            "emit": dict(self.emit),
            "variants": list(self.variants),
            "transfer_threshold": self.transfer_threshold,
        }


def _validate_engine(raw: dict) -> EngineConfig:
    values = {}
    for key, value in raw.items():
        name = f"engine.{key}"
        if key in _PAIR_KEYS:
            if not isinstance(value, (list, tuple)) or len(value) != _PAIR_KEYS[key] or not all(
                _is_int(v) for v in value
            ):
                raise ConfigError(name, f"expected a list of {_PAIR_KEYS[key]} integers, got {value!r}")
        elif key in _FLOAT_ENGINE_KEYS:
            if not _is_number(value) or value <= 0:
                raise ConfigError(name, f"expected a positive number, got {value!r}")
            value = float(value)
        elif not _is_int(value) or value < 1:
            if not (key == "planted_block" and _is_int(value) and value == 0):
                raise ConfigError(name, f"expected a positive integer, got {value!r}")
        values[key] = value
    engine = EngineConfig(**values)
    start, end = engine.concept_span
    if not 0 <= start < end <= engine.text_tokens:
        raise ConfigError("engine.concept_span", f"{list(engine.concept_span)} invalid for {engine.text_tokens} text tokens")
    try:
        _check_engine(engine)
    except ValueError as exc:
        msg = str(exc)
        key = msg.split()[0] if msg.startswith("engine.") else "engine"
        raise ConfigError(key, msg) from None
    return engine


def _validate_conceptrol(raw: dict, mode: str, engine: EngineConfig) -> ConceptrolConfig:
    lam = raw["lambda"]
    if not _is_number(lam) or lam < 0:
        raise ConfigError("conceptrol.lambda", f"must be a number >= 0, got {lam!r}")
    ratio = raw["warmup_ratio"]
    if ratio is not None and (not _is_number(ratio) or not 0 <= ratio <= 1):
        raise ConfigError("conceptrol.warmup_ratio", f"must lie in [0, 1], got {ratio!r}")
    eps = raw["suppression_epsilon"]
    if not _is_number(eps) or not 0 < eps < 1:
        raise ConfigError("conceptrol.suppression_epsilon", f"must lie in (0, 1), got {eps!r}")
    block = raw["concept_block"]
    if not _is_int(block) or not 0 <= block < engine.blocks:
        raise ConfigError("conceptrol.concept_block", f"must be an integer in 0..{engine.blocks - 1}, got {block!r}")
    if raw.get("mode", mode) != mode:
        raise ConfigError("conceptrol.mode", f"{raw['mode']!r} disagrees with top-level mode {mode!r}")
    return ConceptrolConfig(float(lam), None if ratio is None else float(ratio), float(eps), block, mode)


def validate(doc: dict) -> RunConfig:
    """Check every entry and build a :class:`RunConfig`; raises :class:`ConfigError`."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    base = copy.deepcopy(DEFAULTS)
    base["conceptrol"]["mode"] = None
    doc = _merge(base, doc)
    if doc["conceptrol"]["mode"] is None:
        del doc["conceptrol"]["mode"]

    mode = doc["mode"]
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {list(MODES)}, got {mode!r}")
    engine = _validate_engine(doc["engine"])

    sched = doc["schedule"]
    if not _is_int(sched["T"]) or sched["T"] < 1:
        raise ConfigError("schedule.T", f"must be a positive integer, got {sched['T']!r}")
    for key in ("beta_start", "beta_end"):
        if not _is_number(sched[key]) or not 0 < sched[key] < 1:
            raise ConfigError(f"schedule.{key}", f"must lie in (0, 1), got {sched[key]!r}")
    if sched["beta_start"] > sched["beta_end"]:
        raise ConfigError("schedule.beta_end", "must be >= schedule.beta_start")

    conceptrol = _validate_conceptrol(doc["conceptrol"], mode, engine)

    seeds = doc["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(_is_int(s) and s >= 0 for s in seeds):
        raise ConfigError("seeds", f"must be a non-empty list of non-negative integers, got {seeds!r}")
    out = doc["output_dir"]
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir", f"must be a path string, got {out!r}")
    for key, flag in doc["emit"].items():
        if not isinstance(flag, bool):
            raise ConfigError(f"emit.{key}", f"must be true or false, got {flag!r}")
    variants = doc["variants"]
    if not isinstance(variants, list) or not variants or any(v not in VARIANTS for v in variants):
        raise ConfigError("variants", f"must be a non-empty subset of {list(VARIANTS)}, got {variants!r}")
    threshold = doc["transfer_threshold"]
    if not _is_number(threshold):
        raise ConfigError("transfer_threshold", f"must be a number, got {threshold!r}")

    return RunConfig(
        mode=mode,
        engine=engine,
        schedule={"T": sched["T"], "beta_start": float(sched["beta_start"]), "beta_end": float(sched["beta_end"])},
        conceptrol=conceptrol,
        seeds=list(seeds),
        output_dir=out,
        emit=dict(doc["emit"]),
        variants=list(dict.fromkeys(variants)),
        transfer_threshold=float(threshold),
    )


def load_config(path=None, overrides=()) -> RunConfig:
    """Read the JSON file at ``path`` (defaults if None), apply overrides, validate."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"{path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
    for text in overrides:
        path_parts, value = parse_override(text)
        apply_override(doc, path_parts, value)
    return validate(doc)
