"""Experiment configuration tree.

A :class:`Config` groups every tunable setting; each key has a default and
unknown keys are rejected. It serializes to canonical JSON so a printed
banner can be fed back with ``--config`` to reproduce a command.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .distill import GatePolicy
from .encoder import EncoderConfig
from .peft import VARIANTS, AdapterConfig, LoraConfig, PromptConfig
from .synthdata import GenSpec, SplitSpec
from .trainkit import GATES, PretrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, data, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class PeftConfigs:
    adapter: AdapterConfig = AdapterConfig()
    prompt: PromptConfig = PromptConfig()
    lora: LoraConfig = LoraConfig()

    def for_variant(self, variant: str):
        return getattr(self, variant)


@dataclass(frozen=True)
class ProtocolConfig:
    variants: tuple = ("lora", "adapter", "prompt")
    gates: tuple = GATES
    trials: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "gates", tuple(self.gates))
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        bad = [g for g in self.gates if g not in GATES]
        if bad:
            raise ValueError(f"unknown gates {bad}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class Config:
    data: GenSpec = GenSpec()
    split: SplitSpec = SplitSpec()
    encoder: EncoderConfig = EncoderConfig()
    peft: PeftConfigs = PeftConfigs()
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig()
    gate: GatePolicy = GatePolicy()
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def __post_init__(self):
        d, e = self.data, self.encoder
        pairs = [("m", d.m, e.m), ("d_v", d.d_v, e.d_v), ("n_tokens/n", d.n_tokens, e.n), ("vocab", d.vocab, e.vocab)]
        for name, a, b in pairs:
            if a != b:
                raise ConfigError(f"data and encoder disagree on {name}: {a} vs {b}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "peft":
                out["peft"] = {k: asdict(getattr(value, k)) for k in VARIANTS}
            elif f.name == "protocol":
                out["protocol"] = {"variants": list(value.variants), "gates": list(value.gates), "trials": value.trials}
            else:
                out[f.name] = asdict(value)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        simple = {
            "data": GenSpec,
            "split": SplitSpec,
            "encoder": EncoderConfig,
            "pretrain": PretrainConfig,
            "train": TrainConfig,
            "gate": GatePolicy,
            "protocol": ProtocolConfig,
        }
        for name, klass in simple.items():
            if name in d:
                kw[name] = _build(klass, d[name], name)
        if "peft" in d:
            sub = d["peft"]
            if not isinstance(sub, dict):
                raise ConfigError("section 'peft' must be a mapping")
            extra = set(sub) - set(VARIANTS)
            if extra:
                raise ConfigError(f"unknown keys in 'peft': {sorted(extra)}")
            classes = {"adapter": AdapterConfig, "prompt": PromptConfig, "lora": LoraConfig}
            kw["peft"] = PeftConfigs(**{k: _build(classes[k], v, f"peft.{k}") for k, v in sub.items()})
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Config":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def override(self, section: str, **changes) -> "Config":
        """Copy with ``changes`` applied to one section (flags win over files)."""
        d = self.to_dict()
        d[section].update(changes)
        return Config.from_dict(d)

