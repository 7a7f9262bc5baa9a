"""Run configuration: a flat ``section.key = value`` text format checked
against a fixed schema.

Resolution order, later wins: schema defaults, profile preset, environment
variables (``DPF_DATA_ROOT``, ``DPF_CACHE_DIR``), config file, command-line
overrides.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .depth import PROVIDER_KINDS, DepthProviderConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_NONE = ("", "none", "null")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind):
    def parse(text: str):
        return None if text.strip().lower() in _NONE else kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _size(text: str) -> tuple[int, int]:
    h, w = text.lower().replace(",", "x").split("x")
    return int(h), int(w)


def _ratio(text: str) -> tuple[int, int]:
    a, b = text.split(":")
    return int(a), int(b)


# key -> (parser, default); defaults are the full-scale training protocol
SCHEMA: dict[str, tuple] = {
    "profile": (str, "full"),
    "seed": (int, 0),
    "output_dir": (str, "runs/default"),
    "runtime.workers": (int, 1),
    "data.root": (_optional(str), None),
    "data.depth_policy": (str, "sensor"),
    "data.depth_scale": (float, 1.0),
    "data.split_ratio": (_ratio, (5, 1)),
    "data.synthetic_train": (int, 64),
    "data.synthetic_test": (int, 16),
    "model.backbone": (str, "resnet101"),
    "model.image_size": (_size, (336, 448)),
    "model.head_hidden": (int, 2048),
    "model.ablation_mode": (str, "multiscale_cab"),
    "model.recursion_input": (str, "fused"),
    "model.shared_activation": (str, "relu"),
    "model.depth_norm": (str, "minmax"),
    "model.depth_max": (_optional(float), None),
    "model.backbone_weights": (_optional(str), None),
    "train.lr0": (float, 5e-5),
    "train.decay": (float, 0.98),
    "train.decay_every": (str, "epoch"),
    "train.epochs": (int, 150),
    "train.batch": (int, 8),
    "train.loss_epsilon": (float, 1e-8),
    "train.grad_clip": (_optional(float), None),
    "train.weight_decay": (float, 0.0),
    "train.flip_prob": (float, 0.5),
    "train.normalize_targets": (_bool, True),
    "train.max_steps": (_optional(int), None),
    "train.checkpoint_every": (int, 0),
    "depth.kind": (str, "pretrained"),
    "depth.weights_path": (_optional(str), None),
    "depth.fine_tune": (_bool, False),
    "depth.cache_dir": (_optional(str), None),
    "ablation.seeds": (int, 3),
}

PROFILES: dict[str, dict[str, object]] = {
    "full": {},
    "desk": {
        "model.backbone": "small",
        "model.image_size": (64, 80),
        "model.head_hidden": 256,
        "model.depth_norm": "fixed",
        "model.depth_max": 10.0,
        "train.lr0": 1e-3,
        "train.decay": 0.97,
        "train.epochs": 40,
        "depth.kind": "synthetic_oracle",
    },
}

ENV_KEYS = {"DPF_DATA_ROOT": "data.root", "DPF_CACHE_DIR": "depth.cache_dir"}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError("unknown key", key)
    parser = SCHEMA[key][0]
    try:
        return parser(text.strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {text.strip()!r} ({exc})", key) from None


def read_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def read_config_file(path) -> dict[str, object]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return read_config_text(path.read_text(encoding="utf-8"), str(path))


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            backbone=v["model.backbone"],
            image_size=v["model.image_size"],
            head_hidden=v["model.head_hidden"],
            ablation_mode=v["model.ablation_mode"],
            recursion_input=v["model.recursion_input"],
            shared_activation=v["model.shared_activation"],
            depth_norm=v["model.depth_norm"],
            depth_max=v["model.depth_max"],
            backbone_weights=v["model.backbone_weights"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr0=v["train.lr0"],
            decay=v["train.decay"],
            decay_every=v["train.decay_every"],
            epochs=v["train.epochs"],
            batch=v["train.batch"],
            seed=v["seed"],
            loss_epsilon=v["train.loss_epsilon"],
            grad_clip=v["train.grad_clip"],
            weight_decay=v["train.weight_decay"],
            flip_prob=v["train.flip_prob"],
            normalize_targets=v["train.normalize_targets"],
            max_steps=v["train.max_steps"],
            checkpoint_every=v["train.checkpoint_every"],
        )

    def depth_config(self) -> DepthProviderConfig:
        v = self.values
        try:
            return DepthProviderConfig(v["depth.kind"], v["depth.weights_path"], v["depth.fine_tune"])
        except ValueError as exc:
            raise ConfigError(str(exc), "depth.kind") from None

    def validate(self) -> "RunConfig":
        """Build every typed config once so schema violations surface before any work."""
        if self.values["profile"] not in PROFILES:
            raise ConfigError(f"unknown profile {self.values['profile']!r}", "profile")
        if self.values["data.depth_policy"] not in ("sensor", "none"):
            raise ConfigError("must be 'sensor' or 'none'", "data.depth_policy")
        self.model_config()
        self.train_config()
        if self.values["depth.kind"] not in PROVIDER_KINDS:
            raise ConfigError(f"unknown depth provider kind {self.values['depth.kind']!r}", "depth.kind")
        # the weights rule is checked by depth_config() once a command needs depth
        return self

    def to_json_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}


def resolve_config(config_file=None, overrides: dict[str, object] | None = None,
                   environ=None) -> RunConfig:
    """Merge the configuration layers; ``overrides`` hold already-parsed values."""
    environ = os.environ if environ is None else environ
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in SCHEMA:
            raise ConfigError("unknown key", key)
    file_values = read_config_file(config_file) if config_file else {}
    profile = overrides.get("profile", file_values.get("profile", SCHEMA["profile"][1]))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}", "profile")
    values = {k: default for k, (_, default) in SCHEMA.items()}
    values.update(PROFILES[profile])
    for env, key in ENV_KEYS.items():
        if environ.get(env):
            values[key] = environ[env]
    values.update(file_values)
    values.update(overrides)
    values["profile"] = profile
    return RunConfig(values).validate()
