"""Experiment configuration: defaults < preset < config file < command-line flags.

Config files are flat ``key = value`` text; ``#`` and ``;`` start comments.
Recognised keys are the field names of :class:`ExperimentConfig`.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, ValidationError
from .mas import Mode, SystemConfig, TopologyKind
from .model import ModelConfig
from .selection import SelectionParams

OUTPUT_ROOT_ENV = "VIF_OUTPUT_ROOT"

PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "circular": {"topology": "circular", "agents": 4, "turns": 20},
    "linear": {"topology": "linear", "agents": 5, "turns": 5},
    "layered": {"topology": "layered", "agents": 6, "turns": 6},
    "random": {"topology": "random", "agents": 6, "turns": 6},
    "single-agent": {"topology": "linear", "agents": 1, "turns": 1},
    "smoke": {"topology": "circular", "agents": 2, "turns": 3, "max_steps": 2},
}


@dataclass
class ExperimentConfig:
    preset: str = "default"
    # model
    depth: int = 12
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 512
    grid_side: int = 8
    # system
    topology: str = "circular"
    agents: int = 4
    turns: int = 20
    mode: str = "both"
    # selection
    omega: float = 0.3
    trend_tolerance: float = 0.15
    keynorm_buffer: int = 3
    # reallocation
    tau: float = 0.8
    alpha_middle: float = 0.1
    alpha_deep: float = 0.3
    realloc_first_turn: bool = True
    # relay and decoding
    relay_cap: int = 8
    max_steps: int = 4
    decode_temperature: float = 1.0
    # seeds; the specific ones default to ``seed``
    seed: int = 0
    model_seed: int | None = None
    scene_seed: int | None = None
    topology_seed: int | None = None
    # output
    output_dir: str | None = None
    svg: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        try:
            TopologyKind(self.topology)
        except ValueError:
            raise ConfigError(f"unknown topology {self.topology!r}") from None
        if self.mode not in ("baseline", "vif", "both"):
            raise ConfigError(f"mode must be baseline, vif or both, not {self.mode!r}")
        if self.turns < 1 or self.agents < 1:
            raise ConfigError("turns and agents must be >= 1")
        if self.relay_cap < 0 or self.max_steps < 1 or self.decode_temperature < 0:
            raise ConfigError("relay_cap >= 0, max_steps >= 1, decode_temperature >= 0 required")
        # constructing these runs their own range checks
        try:
            self.model_config()
            self.system_config().realloc_config(self.depth)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def modes(self) -> list[Mode]:
        if self.mode == "both":
            return [Mode.BASELINE, Mode.VIF]
        return [Mode(self.mode)]

    def resolved_seed(self, which: str) -> int:
        value = getattr(self, f"{which}_seed")
        return self.seed if value is None else value

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            heads=self.heads,
            model_dim=self.model_dim,
            ffn_dim=self.ffn_dim,
            vocab_size=self.vocab_size,
            grid_side=self.grid_side,
            rng_seed=self.resolved_seed("model"),
        )

    def selection_params(self) -> SelectionParams:
        return SelectionParams(
            omega=self.omega,
            trend_tolerance=self.trend_tolerance,
            keynorm_buffer=self.keynorm_buffer,
        )

    def system_config(self) -> SystemConfig:
        return SystemConfig(
            selection=self.selection_params(),
            tau=self.tau,
            alpha_middle=self.alpha_middle,
            alpha_deep=self.alpha_deep,
            relay_cap=self.relay_cap,
            max_steps=self.max_steps,
            decode_temperature=self.decode_temperature,
            decode_seed=self.seed,
            realloc_first_turn=self.realloc_first_turn,
        )

    def output_path(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV, "vif_out")
        return Path(root) / self.preset


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, raw: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    default = _FIELDS[key].default
    text = raw.strip()
    if key in ("preset", "topology", "mode"):
        return text
    if text.lower() in ("none", "null", ""):
        return None
    if key == "output_dir":
        return text
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, float):
            return float(text)
        return int(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return {k.replace("-", "_"): _coerce(k.replace("-", "_"), v) for k, v in parser["config"].items()}


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    file_values = read_config_file(path) if path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset = overrides.get("preset", file_values.get("preset", "default"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values: dict[str, Any] = {"preset": preset}
    for layer in (PRESETS[preset], file_values, overrides):
        for k, v in layer.items():
            values[k] = _coerce(k, v)
    return ExperimentConfig(**values).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        lines.append(f"{name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
