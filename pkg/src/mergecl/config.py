"""Experiment configuration document: a single JSON file with strict keys.

Sections: "stream" (required), "model", "train", "output".  Unknown keys
anywhere are rejected so typos in strategy names or lambda cannot pass
silently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError, InputError
from .model import MlpConfig
from .strategies import TrainConfig
from .taskstream import StreamConfig

_STREAM_KEYS = {
    "num_tasks": int,
    "classes_per_task": int,
    "samples_per_class": int,
    "feature_dim": int,
    "class_separation": float,
    "within_class_std": float,
    "seed": int,
}
_MODEL_KEYS = {
    "input_dim": int,
    "hidden_dims": list,
    "activation": str,
    "seed": int,
}
_TRAIN_KEYS = {
    "lr_backbone": float,
    "lr_head": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "lambda": float,
    "strategy": str,
    "ewc_lambda": float,
    "ca_enabled": bool,
    "ca_samples_per_class": int,
    "ca_temperature": float,
    "ca_final_only": bool,
    "epsilon": float,
    "ema_beta": float,
    "init_policy": str,
}
_OUTPUT_KEYS = {"dir": str}


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig
    model: MlpConfig
    train: TrainConfig
    out_dir: str

    def document(self) -> dict:
        """Fully resolved config as a plain dict (defaults included)."""
        return {
            "stream": {
                "num_tasks": self.stream.num_tasks,
                "classes_per_task": self.stream.classes_per_task,
                "samples_per_class": self.stream.samples_per_class,
                "feature_dim": self.stream.feature_dim,
                "class_separation": self.stream.class_separation,
                "within_class_std": self.stream.within_class_std,
                "seed": self.stream.seed,
            },
            "model": {
                "input_dim": self.model.input_dim,
                "hidden_dims": list(self.model.hidden_dims),
                "activation": self.model.activation,
                "seed": self.model.seed,
            },
            "train": {
                "lr_backbone": self.train.lr_backbone,
                "lr_head": self.train.lr_head,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "seed": self.train.seed,
                "lambda": self.train.lam,
                "strategy": self.train.strategy,
                "ewc_lambda": self.train.ewc_lambda,
                "ca_enabled": self.train.ca_enabled,
                "ca_samples_per_class": self.train.ca_samples_per_class,
                "ca_temperature": self.train.ca_temperature,
                "ca_final_only": self.train.ca_final_only,
                "epsilon": self.train.epsilon,
                "ema_beta": self.train.ema_beta,
                "init_policy": self.train.init_policy,
            },
            "output": {"dir": self.out_dir},
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _check_section(name: str, raw: dict, schema: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {name!r}")
    out = {}
    for key, value in raw.items():
        want = schema[key]
        if want is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number, got {type(value).__name__}")
            out[key] = float(value)
        elif want is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer, got {type(value).__name__}")
            out[key] = value
        elif want is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be a boolean, got {type(value).__name__}")
            out[key] = value
        elif want is list:
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise ConfigError(f"{name}.{key} must be a list of integers")
            out[key] = value
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{name}.{key} must be a string, got {type(value).__name__}")
            out[key] = value
    return out


def parse_config(document: dict) -> ExperimentConfig:
    if not isinstance(document, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(document) - {"stream", "model", "train", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]!r}")
    if "stream" not in document:
        raise ConfigError("missing required section 'stream'")
    stream_kw = _check_section("stream", document["stream"], _STREAM_KEYS)
    model_kw = _check_section("model", document.get("model", {}), _MODEL_KEYS)
    train_kw = _check_section("train", document.get("train", {}), _TRAIN_KEYS)
    output_kw = _check_section("output", document.get("output", {}), _OUTPUT_KEYS)
    try:
        stream = StreamConfig(**stream_kw)
        if "input_dim" not in model_kw:
            model_kw["input_dim"] = stream.feature_dim
        if "hidden_dims" in model_kw:
            model_kw["hidden_dims"] = tuple(model_kw["hidden_dims"])
        model = MlpConfig(**model_kw)
        if "lambda" in train_kw:
            train_kw["lam"] = train_kw.pop("lambda")
        train = TrainConfig(**train_kw)
    except (InputError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if model.input_dim != stream.feature_dim:
        raise ConfigError(
            f"model.input_dim ({model.input_dim}) must equal stream.feature_dim ({stream.feature_dim})"
        )
    return ExperimentConfig(
        stream=stream, model=model, train=train, out_dir=output_kw.get("dir", "out")
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(document)
