"""
Run configuration: a JSON document with the sections encoder, pairing, metric
and train, plus `section.key=value` overrides from the command line.
"""
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Iterable

from encoder import EncoderConfig
from errors import ConfigError
from metric import LossConfig, NegSamplingConfig
from pairing import SubSeqConfig
from utils.config_fields import config_digest, from_section, require
from utils.custom_logger import log

SECTIONS = ("encoder", "pairing", "metric", "train")

# Alternative spellings, rewritten to the canonical (section, key) on load
ALIASES = {
    ("pairing", "m"): ("pairing", "min_length"),
    ("pairing", "M"): ("pairing", "max_length"),
    ("data", "validation_fraction"): ("train", "validation_fraction"),
}


@dataclass
class TrainSettings:
    learning_rate: float = 0.002
    batch_persons: int = 64
    epochs: int = 100
    sub_samples: int = 5
    validation_fraction: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        require(self.learning_rate > 0, f"learning_rate must be > 0, got {self.learning_rate}")
        require(self.batch_persons >= 2, f"batch_persons must be >= 2, got {self.batch_persons}")
        require(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        require(self.sub_samples >= 2, f"sub_samples must be >= 2, got {self.sub_samples}")
        require(
            0 <= self.validation_fraction < 1,
            f"validation_fraction must be in [0, 1), got {self.validation_fraction}",
        )
        require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1 and beta2 must be in [0, 1)")
        require(self.adam_eps > 0, f"adam_eps must be > 0, got {self.adam_eps}")
        require(self.clip_norm > 0, f"clip_norm must be > 0, got {self.clip_norm}")


def resolve_aliases(sections: dict[str, Any]) -> dict[str, Any]:
    """Copy of `sections` with every aliased key moved to its canonical place."""
    resolved = {
        name: dict(values) if isinstance(values, dict) else values
        for name, values in sections.items()
    }
    for (section, alias), (target, key) in ALIASES.items():
        values = resolved.get(section)
        if not isinstance(values, dict) or alias not in values:
            continue
        destination = resolved.setdefault(target, {})
        if key in destination:
            raise ConfigError(f"{section}.{alias} and {target}.{key} name the same setting")
        destination[key] = values.pop(alias)
        if not values and section not in SECTIONS:
            del resolved[section]
    return resolved


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pairing: SubSeqConfig = field(default_factory=SubSeqConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    negatives: NegSamplingConfig = field(default_factory=NegSamplingConfig)
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        # K lives in the train section; the pairing strategy follows it
        self.pairing = dataclasses.replace(self.pairing, k=self.train.sub_samples)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = resolve_aliases(data)
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {unknown}")

        pairing = dict(data.get("pairing") or {})
        if "k" in pairing:
            raise ConfigError("pairing has no key 'k'; set train.sub_samples instead")
        metric = dict(data.get("metric") or {})
        negatives = {
            key: metric.pop(src)
            for src, key in (("negative", "strategy"), ("neg_count", "neg_count"))
            if src in metric
        }
        train = from_section(TrainSettings, data.get("train"), "train")
        return cls(
            encoder=from_section(EncoderConfig, data.get("encoder"), "encoder"),
            pairing=from_section(SubSeqConfig, dict(pairing, k=train.sub_samples), "pairing"),
            loss=from_section(LossConfig, metric, "metric"),
            negatives=from_section(NegSamplingConfig, negatives, "metric"),
            train=train,
        )

    def to_dict(self) -> dict[str, Any]:
        pairing = dataclasses.asdict(self.pairing)
        del pairing["k"]
        return {
            "encoder": dataclasses.asdict(self.encoder),
            "pairing": pairing,
            "metric": dict(
                dataclasses.asdict(self.loss),
                negative=self.negatives.strategy,
                neg_count=self.negatives.neg_count,
            ),
            "train": dataclasses.asdict(self.train),
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())


def parse_override(text: str) -> tuple[str | None, str, Any]:
    """Split `section.key=value` (or `key=value`); the value is JSON or a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    path, raw = text.split("=", 1)
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if "." in path:
        section, key = path.split(".", 1)
        return section, key, value
    return None, path, value


def apply_overrides(sections: dict[str, dict[str, Any]], overrides: Iterable[str]):
    """Apply overrides in place; keys must exist in the default configuration."""
    known = TrainConfig().to_dict()
    for text in overrides:
        section, key, value = parse_override(text)
        if section is None:
            owners = [name for name, keys in known.items() if key in keys]
            if len(owners) != 1:
                raise ConfigError(
                    f"override key {key!r} is unknown"
                    if not owners
                    else f"override key {key!r} is ambiguous, use one of "
                    f"{[f'{o}.{key}' for o in owners]}"
                )
            section = owners[0]
        section, key = ALIASES.get((section, key), (section, key))
        if section not in known or key not in known[section]:
            raise ConfigError(f"override key {section}.{key} does not exist")
        log.debug(f"Override {section}.{key}={value!r}")
        sections.setdefault(section, {})[key] = value


def load_config(path: str | None, overrides: Iterable[str] = ()) -> TrainConfig:
    sections: dict[str, dict[str, Any]] = {}
    if path is not None:
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}") from e
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ConfigError(f"{path} must hold an object of section objects")
        sections = resolve_aliases(data)
    apply_overrides(sections, overrides)
    return TrainConfig.from_dict(sections)
