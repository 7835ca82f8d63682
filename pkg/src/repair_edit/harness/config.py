"""Run configuration: one flat dataclass, loaded from YAML/JSON plus ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import yaml

from ..distill import KDConfig
from ..merge import MergeConfig
from ..sidememory import RoutingMarginConfig

CONFIG_SCHEMA = "repair-config/1"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # stream
    n_edits: int = 30
    seed: int = 0
    mode: str = "qa"                 # qa | hallucination
    edit_window: int = 5
    # toy model
    vocab_size: int = 64
    hidden_dim: int = 32
    ffn_dim: int = 64
    embed_scale: float = 1.0
    key_scale: float = 1.0
    value_scale: float = 1.0
    unembed_scale: float = 1.0
    decay: float = 0.7
    key_bias: float = 0.0
    activation_fn: str = "gelu"
    unembed_init: str = "random"
    # synthetic corpus
    n_facts: int = 120
    rephrases_per_fact: int = 2
    target_len: int = 2
    n_anchors: int = 160
    n_calibration: int = 60
    # side memory
    n_shards: int = 2
    mask_ratio: float = 0.2
    edit_lr: float = 0.05
    n_iter: int = 30
    epsilon: Optional[float] = None  # None: calibrate from held-out anchors
    gamma1: float = 2.0
    gamma2: float = 20.0
    gamma: float = 10.0
    lambda_a: float = 1.0
    irrelevant_per_edit: int = 8
    irrelevant_sampling: str = "uniform"  # uniform | hardest
    candidate_pool: int = 128
    tie_policy: str = "least_loaded"
    # distillation
    lambda_kd: float = 1.0
    lambda_cos: float = 0.2
    theta_var: float = 1.0
    eps_cons: float = 0.6
    soft_kd: bool = False
    temperature: float = 2.0
    batch_size: int = 4
    max_recluster_rounds: int = 3
    # feedback
    tau_correct: float = 0.85
    tau_prune: float = 0.5
    tau_E: int = 10
    max_iter: int = 10000
    sigma_init: float = 0.01
    # merge
    alpha: float = 1.0
    merge_cadence: int = 30
    final_merge: bool = True
    # placeholders for the trade-off weights of the multi-objective; unused by the loop
    obj_alpha: float = 1.0
    obj_beta: float = 1.0
    obj_gamma: float = 1.0

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.n_edits >= 1, "n_edits must be >= 1")
        need(self.mode in ("qa", "hallucination"), f"mode must be qa or hallucination, got {self.mode!r}")
        need(self.edit_window >= 1, "edit_window must be >= 1")
        for name in ("vocab_size", "hidden_dim", "ffn_dim", "n_facts", "rephrases_per_fact",
                     "target_len", "n_anchors", "n_calibration", "n_shards", "n_iter",
                     "irrelevant_per_edit", "max_iter"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.vocab_size >= 16, "vocab_size must be >= 16 for the synthetic corpus")
        need(self.n_edits <= self.n_facts, "n_edits cannot exceed n_facts")
        for name in ("embed_scale", "key_scale", "value_scale", "unembed_scale", "edit_lr"):
            need(getattr(self, name) > 0, f"{name} must be > 0")
        need(0.0 <= self.decay < 1.0, "decay must lie in [0, 1)")
        need(np.isfinite(self.key_bias), "key_bias must be finite")
        need(self.activation_fn in ("gelu", "relu"), "activation_fn must be gelu or relu")
        need(self.unembed_init in ("random", "successor"), "unembed_init must be random or successor")
        need(0.0 < self.mask_ratio <= 1.0, "mask_ratio must lie in (0, 1]")
        need(self.epsilon is None or self.epsilon >= 0, "epsilon must be >= 0 or null")
        need(self.irrelevant_sampling in ("uniform", "hardest"), "irrelevant_sampling must be uniform or hardest")
        need(self.candidate_pool >= 1, "candidate_pool must be >= 1")
        need(self.tie_policy in ("least_loaded", "lowest_id"), "tie_policy must be least_loaded or lowest_id")
        need(0.0 < self.tau_prune <= 1.0, "tau_prune must lie in (0, 1]")
        need(0.0 < self.tau_correct < 1.0, "tau_correct must lie in (0, 1)")
        need(self.tau_E >= 0, "tau_E must be >= 0")
        need(self.sigma_init >= 0, "sigma_init must be >= 0")
        need(self.lambda_a >= 0 and self.lambda_kd >= 0, "loss weights must be >= 0")
        try:
            self.margin_config()
            self.kd_config()
            self.merge_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def margin_config(self) -> RoutingMarginConfig:
        return RoutingMarginConfig(self.gamma1, self.gamma2, self.gamma)

    def kd_config(self) -> KDConfig:
        return KDConfig(self.lambda_cos, self.theta_var, self.eps_cons,
                        self.temperature if self.soft_kd else 0.0,
                        self.batch_size, self.max_recluster_rounds)

    def merge_config(self) -> MergeConfig:
        return MergeConfig(self.alpha, self.merge_cadence)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data or {})
        schema = data.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: _coerce(known[k], v) for k, v in data.items()}
        return cls(**kwargs).validate()


def _coerce(f: dataclasses.Field, value):
    default = f.default
    if value is None:
        if f.name == "epsilon":
            return None
        raise ConfigError(f"{f.name} may not be null")
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float) or f.name == "epsilon":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw) if raw.strip() else raw
    return out


# Desk-scale benchmark: a wider model with dense ReLU features, where unmasked
# fine-tuning visibly damages unrelated prompts, and single-token objects.
PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {},
    "benchmark": {
        "vocab_size": 256, "hidden_dim": 128, "ffn_dim": 1024, "activation_fn": "relu",
        "key_bias": -0.5, "unembed_init": "successor", "target_len": 1, "n_anchors": 1000,
        "irrelevant_sampling": "hardest", "n_iter": 60, "edit_lr": 0.1, "eps_cons": 0.9,
    },
}


def benchmark_config(**overrides) -> RunConfig:
    """The benchmark preset with ``overrides`` applied; ``n_facts`` grows to fit ``n_edits``."""
    data = dict(PRESETS["benchmark"], **overrides)
    data.setdefault("n_facts", max(int(data.get("n_edits", RunConfig.n_edits)), RunConfig.n_facts))
    return RunConfig.from_dict(data)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                preset: str = "toy") -> RunConfig:
    """Preset values, then the file at ``path``, then ``overrides``."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    data: Dict[str, Any] = dict(PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            text = p.read_text()
            loaded = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data.update(loaded)
    data.update(overrides or {})
    return RunConfig.from_dict(data)
