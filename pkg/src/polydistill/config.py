"""Run configuration: a TOML file with CLI-flag overrides, validated strictly.

Unknown keys anywhere are rejected so typos fail fast, and the parsed config
is echoed verbatim into every report for provenance.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class PairSpec:
    src: str
    tgt: str

    @property
    def key(self) -> str:
        return f"{self.src}-{self.tgt}"


@dataclass
class DataSection:
    data_dir: str = "data"
    pairs: list[PairSpec] = field(default_factory=list)
    bpe_model: str = "bpe.model"
    bpe_merges: int = 4000
    max_len: int = 256
    tag_sources: bool = False


@dataclass
class ModelSection:
    d_model: int = 256
    d_ff: int = 1024
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 256


@dataclass
class TrainSection:
    total_steps: int = 30000
    check_every: int = 3000
    tau: float = 1.0
    lam: float = 0.5
    topk: int = 8
    token_budget: int = 8192
    warmup_steps: int = 4000
    dropout_individual: float = 0.2
    dropout_multilingual: float = 0.1
    dev_cap: int = 500
    seed: int = 1


@dataclass
class DecodeSection:
    beam: int = 4
    alpha: float = 1.0
    max_len: int = 128


# TOML keys that differ from field names (lambda is reserved in Python).
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_ALIASES = {v: k for k, v in _KEY_ALIASES.items()}


def _section_from_dict(cls, raw: dict, name: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = _KEY_ALIASES.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        kwargs[attr] = value
    return cls(**kwargs)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)

    def __post_init__(self):
        if not 0.0 <= self.train.lam <= 1.0:
            raise ConfigError(f"train.lambda must be in [0, 1], got {self.train.lam}")
        if self.train.tau < 0:
            raise ConfigError("train.tau must be >= 0")
        if self.train.check_every < 1:
            raise ConfigError("train.check_every must be >= 1")
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {"data": DataSection, "model": ModelSection, "train": TrainSection, "decode": DecodeSection}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in sections.items():
            section_raw = dict(raw.get(name, {}))
            if name == "data" and "pairs" in section_raw:
                section_raw["pairs"] = [
                    _section_from_dict(PairSpec, p, "data.pairs") for p in section_raw["pairs"]
                ]
            kwargs[name] = _section_from_dict(section_cls, section_raw, name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        raw = asdict(self)
        for name in ("data", "model", "train", "decode"):
            section = raw[name]
            for attr, key in _FIELD_ALIASES.items():
                if attr in section:
                    section[key] = section.pop(attr)
        return raw

    def apply_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply dotted-path overrides like {'train.lambda': 0.0}; None values are skipped."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in raw or not key:
                raise ConfigError(f"unknown override target {dotted!r}")
            raw[section][key] = value
        return RunConfig.from_dict(raw)

    def pair_path(self, pair: PairSpec, split: str, side: str) -> Path:
        return Path(self.data.data_dir) / f"{split}.{pair.key}.{side}"

    def bpe_path(self) -> Path:
        return Path(self.data.data_dir) / self.data.bpe_model
