"""Run configuration: YAML loading, overrides, schema and invariant checks."""

from __future__ import annotations

import copy
import json
import math
import os
from importlib import resources
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .errors import ConfigError
from .evalkit import ATTACKS, parse_defense
from .fmask import PREDEFINED, FMaskConfig
from .segmenter import SegmenterConfig

ENV_ARTIFACTS = "RADAP_ARTIFACTS"
MASK_KINDS = ("fmask", "rmask", *PREDEFINED)


def default_config_path() -> Path:
    return Path(str(resources.files("radap") / "configs" / "default.yaml"))


def default_config() -> dict:
    return yaml.safe_load(default_config_path().read_text())


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config_file(path) -> dict:
    """Parse a YAML config (or a stage manifest, whose ``config`` snapshot is used)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "stage" in raw and isinstance(raw.get("config"), dict):
        raw = raw["config"]
    return raw


def apply_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    config = copy.deepcopy(config)
    for item in assignments or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return config


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the file at ``path``, then overrides; validated."""
    config = default_config()
    if path is not None:
        config = _merge(config, read_config_file(path))
    config = apply_overrides(config, overrides or [])
    validate(config)
    return config


def artifact_root(config: dict) -> Path:
    return Path(os.environ.get(ENV_ARTIFACTS) or config.get("artifacts") or "artifacts")


def _check_keys(section: str, values, allowed) -> list[str]:
    if not isinstance(values, dict):
        return [f"{section}: expected a mapping, got {type(values).__name__}"]
    return [f"{section}.{k}: unknown key" for k in values if k not in allowed]


def _area(section: str, value) -> list[str]:
    try:
        a, b = value
        if not (0 <= a < b <= 1):
            raise ValueError
    except (TypeError, ValueError):
        return [f"{section}.area_range: need 0 <= a < b <= 1, got {value!r}"]
    return []


def _try(section: str, fn) -> list[str]:
    try:
        fn()
    except (TypeError, ValueError) as exc:
        return [f"{section}: {exc}"]
    return []


def _positive(section: str, values: dict, *keys, integer=False) -> list[str]:
    errors = []
    for k in keys:
        v = values.get(k)
        ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) and v > 0
        if integer:
            ok = ok and isinstance(v, int)
        if not ok:
            errors.append(f"{section}.{k}: must be a positive {'integer' if integer else 'number'}, got {v!r}")
    return errors


def validate(config: dict) -> None:
    """Check every section against its schema; raise one error listing all problems."""
    defaults = default_config()
    errors = _check_keys("<root>", config, defaults)
    if errors and not isinstance(config, dict):
        raise ConfigError("\n".join(errors))
    if not isinstance(config.get("seed"), int) or isinstance(config.get("seed"), bool):
        errors.append(f"seed: must be an integer, got {config.get('seed')!r}")
    for section, allowed in defaults.items():
        if isinstance(allowed, dict) and section in config:
            errors += _check_keys(section, config[section], allowed)
    if errors:
        raise ConfigError("\n".join(errors))

    data = config["data"]
    if data["kind"] not in ("synthetic", "folder"):
        errors.append(f"data.kind: must be synthetic or folder, got {data['kind']!r}")
    elif data["kind"] == "folder" and not data.get("train_dir"):
        errors.append("data.train_dir: required when data.kind is folder")
    errors += _positive("data", data, "num_identities", "per_identity", "test_per_identity", "size", integer=True)

    mask = config["mask"]
    if mask["kind"] not in MASK_KINDS:
        errors.append(f"mask.kind: must be one of {MASK_KINDS}, got {mask['kind']!r}")
    size = mask["size"]
    if size is not None and not (isinstance(size, list) and len(size) == 2
                                 and all(isinstance(v, int) and v > 0 for v in size)):
        errors.append(f"mask.size: must be null or [H, W] positive integers, got {size!r}")
    rc = mask["rect_count"]
    if rc is not None and not (isinstance(rc, int) and rc >= 0):
        errors.append(f"mask.rect_count: must be null or a non-negative integer, got {rc!r}")
    area_errors = _area("mask", mask["area_range"])
    errors += area_errors + _positive("mask", mask, "count", integer=True)
    if not area_errors:
        errors += _try("mask", lambda: FMaskConfig(8, 8, mask["decay_power"], tuple(mask["area_range"])))

    fr = config["train-fr"]
    if fr["mode"] not in ("closed_set", "open_set"):
        errors.append(f"train-fr.mode: must be closed_set or open_set, got {fr['mode']!r}")
    errors += _positive("train-fr", fr, "epochs", "batch_size", "width", "embedding_dim", integer=True)
    errors += _positive("train-fr", fr, "lr")
    aug = fr["augment"]
    errors += _check_keys("train-fr.augment", aug, defaults["train-fr"]["augment"])
    if isinstance(aug, dict):
        area_errors = _area("train-fr.augment", aug.get("area_range", (0, 1)))
        errors += area_errors or _try("train-fr.augment", lambda: AugmentPolicy(**aug))

    fp = config["gen-fpatch"]
    errors += _area("gen-fpatch", fp["area_range"])
    errors += _positive("gen-fpatch", fp, "count", "max_steps", "batch_size", integer=True)
    errors += _positive("gen-fpatch", fp, "alpha", "eps")
    if not errors and fp["alpha"] > fp["eps"]:
        errors.append("gen-fpatch.alpha: must not exceed eps")
    cf = fp["clean_fraction"]
    if not isinstance(cf, (int, float)) or isinstance(cf, bool) or not 0 <= cf <= 1:
        errors.append(f"gen-fpatch.clean_fraction: must lie in [0, 1], got {cf!r}")

    seg = config["train-segmenter"]
    errors += _positive("train-segmenter", seg, "epochs", "batch_size", "width", integer=True)
    errors += _try("train-segmenter", lambda: SegmenterConfig(**seg))

    att = config["attack"]
    errors += _positive("attack", att, "alpha", "eps", "temperature")
    if att["goal"] not in ("evasion", "impersonation"):
        errors.append(f"attack.goal: must be evasion or impersonation, got {att['goal']!r}")
    if att["system"] not in ("closed_set", "open_set"):
        errors.append(f"attack.system: must be closed_set or open_set, got {att['system']!r}")
    if not (isinstance(att["steps"], int) and att["steps"] >= 0):
        errors.append(f"attack.steps: must be a non-negative integer, got {att['steps']!r}")
    if isinstance(att["alpha"], (int, float)) and isinstance(att["eps"], (int, float)) and att["alpha"] > att["eps"]:
        errors.append("attack.alpha: must not exceed eps")

    dfn = config["defend"]
    if dfn["saf_n"] is not None and not (isinstance(dfn["saf_n"], int) and 1 <= dfn["saf_n"] <= data["size"]):
        errors.append(f"defend.saf_n: must be null or an integer in [1, {data['size']}], got {dfn['saf_n']!r}")
    if not isinstance(dfn["fill_value"], (int, float)) or not 0 <= dfn["fill_value"] <= 1:
        errors.append(f"defend.fill_value: must lie in [0, 1], got {dfn['fill_value']!r}")

    ev = config["evaluate"]
    for axis in ("defenses", "masks", "attacks"):
        if not isinstance(ev[axis], list) or not ev[axis]:
            errors.append(f"evaluate.{axis}: must be a nonempty list")
    if not errors:
        for d in ev["defenses"]:
            errors += _try("evaluate.defenses", lambda: parse_defense(d))
        errors += [f"evaluate.masks: unknown mask {m!r}" for m in ev["masks"] if m not in MASK_KINDS]
        errors += [f"evaluate.attacks: unknown attack {a!r}" for a in ev["attacks"] if a not in ATTACKS]
    errors += _positive("evaluate", ev, "samples_per_cell", "num_genuine", "num_impostor", integer=True)
    if errors:
        raise ConfigError("\n".join(errors))


def snapshot(config: dict) -> dict:
    """JSON-safe deep copy for manifests."""
    return json.loads(json.dumps(config, default=str))
