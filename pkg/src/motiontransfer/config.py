"""Run configuration files (YAML, ``spec_version: 1``) and builders for library objects.

``default_config(command)`` returns every default explicitly so a written
config is self-describing.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .guidance import GuidanceConfig
from .models import GaussianMixtureToy, GaussianToy, ZeroModel
from .pipeline import SceneSpec, TransferSettings
from .schedule import make_schedule
from .solver import SolverError, SolverOptions

CONFIG_VERSION = 1
COMMANDS = ("converge", "invert", "amf", "pipeline")


class ConfigError(ValueError):
    pass


_DEFAULT_SCENE = {
    "frames": 8,
    "height": 16,
    "width": 16,
    "channels": 8,
    "background_seed": 0,
    "objects": [
        {"id": "car_a", "top": 2, "left": 1, "height": 3, "width": 3, "velocity": [0, 1], "seed": 11},
        {"id": "car_b", "top": 10, "left": 12, "height": 3, "width": 2, "velocity": [0, -1], "seed": 12},
    ],
}

_DEFAULT_PROVIDER = {"d_k": 16, "seed": 0, "key_seed": None, "temperature": 1.0, "positional": 0.0}

_DEFAULTS = {
    "converge": {
        "spec_version": CONFIG_VERSION,
        "seed": 0,
        "samples": 64,
        "steps": [8, 16, 32, 64, 128],
        "schedule": {"kind": "vp_cosine", "t_min": 0.03, "spacing": "uniform_lambda"},
        "model": {"type": "gaussian", "mean": [1.0, -0.5], "scale": 1.0, "parameterization": "noise"},
        "solvers": [
            {"solver": "rectpc", "order": 1, "midpoint": False},
            {"solver": "rectpc", "order": 2, "midpoint": False},
            {"solver": "rectpc", "order": 3, "midpoint": False},
        ],
    },
    "invert": {
        "spec_version": CONFIG_VERSION,
        "seeds": list(range(20)),
        "schedule": {"kind": "rectified_flow", "T": 32, "t_min": 0.02, "spacing": "uniform_lambda"},
        "model": {"type": "gaussian", "mean": [1.0, -0.5], "scale": 0.5, "parameterization": "noise"},
        "solvers": [
            {"solver": "ddim", "order": 1, "midpoint": False},
            {"solver": "rectpc", "order": 2, "midpoint": False},
            {"solver": "rectpc", "order": 3, "midpoint": False},
            {"solver": "rectpc", "order": 2, "midpoint": True},
        ],
    },
    "amf": {
        "spec_version": CONFIG_VERSION,
        "scene": _DEFAULT_SCENE,
        "provider": _DEFAULT_PROVIDER,
        "pairs": "consecutive",
        "same_frame": False,
        "post_softmax": False,
    },
    "pipeline": {
        "spec_version": CONFIG_VERSION,
        "seed": 0,
        "scene": {**_DEFAULT_SCENE, "frames": 4, "height": 8, "width": 8,
                  "objects": [
                      {"id": "car_a", "top": 1, "left": 0, "height": 3, "width": 3, "velocity": [0, 1], "seed": 11},
                      {"id": "car_b", "top": 5, "left": 4, "height": 2, "width": 3, "velocity": [0, -1], "seed": 12},
                  ]},
        "provider": _DEFAULT_PROVIDER,
        "schedule": {"kind": "rectified_flow", "T": 70, "t_min": 1e-3, "spacing": "uniform_t"},
        "solver": {"solver": "rectpc", "order": 2, "midpoint": False, "midpoint_time": "target",
                   "cache_pred_eval": False, "history_reset_tol": 1e-3},
        "templates": {"shifts": [[1, 0], [0, 1]], "scale": 0.1},
        "guidance": {
            "enabled": True,
            "object_weights": {},
            "default_weight": 1.0,
            "background_weight": 1.0,
            "alpha": 1.0,
            "guided_steps": 20,
            "inner_iters": 5,
            "lr_start": 0.008,
            "lr_end": 0.002,
            "pairs": "consecutive",
            "same_frame": False,
        },
    },
}


def default_config(command: str) -> dict:
    if command not in _DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    return copy.deepcopy(_DEFAULTS[command])


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, allow_unicode=True)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict) and key not in ("object_weights", "model"):
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path, command: str) -> dict:
    """Read a YAML config and fill in defaults; raises ``ConfigError`` on any problem."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, command)


def parse_config(text: str, command: str) -> dict:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    version = raw.get("spec_version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config must declare spec_version: {CONFIG_VERSION} (got {version!r})")
    return _merge(default_config(command), raw)


def build_schedule(cfg: dict, T: int | None = None):
    try:
        return make_schedule(cfg["kind"], int(T if T is not None else cfg["T"]), float(cfg["t_min"]),
                             cfg.get("spacing", "uniform_t"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule config: {exc}") from exc


def build_model(cfg: dict, schedule):
    kind = cfg.get("type")
    param = cfg.get("parameterization", "noise")
    try:
        if kind == "gaussian":
            return GaussianToy(schedule, cfg["mean"], float(cfg["scale"]), param)
        if kind == "mixture":
            comps = [(c["weight"], c["mean"], c["scale"]) for c in cfg["components"]]
            return GaussianMixtureToy(schedule, comps, param)
        if kind == "zero":
            return ZeroModel(schedule, int(cfg.get("dim", 2)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    raise ConfigError(f"unknown model type {kind!r}")


def build_solver(cfg: dict) -> SolverOptions:
    try:
        return SolverOptions(**cfg)
    except (TypeError, ValueError, SolverError) as exc:
        raise ConfigError(f"bad solver config {cfg!r}: {exc}") from exc


def build_scene(cfg: dict) -> SceneSpec:
    try:
        return SceneSpec.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene config: {exc}") from exc


def build_guidance(cfg: dict) -> GuidanceConfig | None:
    cfg = dict(cfg)
    if not cfg.pop("enabled", True):
        return None
    try:
        return GuidanceConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad guidance config: {exc}") from exc


def build_settings(cfg: dict) -> TransferSettings:
    sch, prov, tmpl = cfg["schedule"], cfg["provider"], cfg["templates"]
    return TransferSettings(
        schedule_kind=sch["kind"], steps=int(sch["T"]), t_min=float(sch["t_min"]), spacing=sch["spacing"],
        d_k=int(prov["d_k"]), provider_seed=int(prov["seed"]), key_seed=prov["key_seed"], temperature=float(prov["temperature"]),
        positional=float(prov["positional"]),
        template_shifts=tuple(tuple(s) for s in tmpl["shifts"]), template_scale=float(tmpl["scale"]),
    )
