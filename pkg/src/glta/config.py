"""Run configuration: an INI-style file with sections, overridable per key.

Every key can be overridden on the command line as ``--section.key=value``,
or ``--key=value`` when the key name is unique across sections.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .alignment import AlignConfig
from .graph import GraphConfig
from .llm_client import GenerationConfig
from .text_lm import LMConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    interactions: str = ""
    items: str = ""
    synthetic: bool = False
    syn_users: int = 40
    syn_items: int = 60
    syn_clusters: int = 2
    syn_in_cluster_p: float = 0.3
    syn_noise_p: float = 0.02
    syn_vocab_per_cluster: int = 12
    syn_words_per_item: int = 5


@dataclass
class LMSection(LMConfig):
    vocab_size: int = 5000
    pretrain: bool = False
    pretrain_epochs: int = 2
    pretrain_lr: float = 1e-3


@dataclass
class GenSection(GenerationConfig):
    cache: str = ""


@dataclass
class EvalConfig:
    ratio: float = 0.8
    cutoffs: tuple = (5, 10)
    mode: str = "firstk"


@dataclass
class AblationConfig:
    no_item_align: bool = False
    no_user_align: bool = False
    no_profile: bool = False
    no_prediction: bool = False


SECTIONS = {
    "data": DataConfig,
    "graph": GraphConfig,
    "lm": LMSection,
    "align": AlignConfig,
    "gen": GenSection,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}
# per-module seeds are derived from the run seed, never set directly
_DERIVED = {"seed"}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    lm: LMSection = field(default_factory=LMSection)
    align: AlignConfig = field(default_factory=AlignConfig)
    gen: GenSection = field(default_factory=GenSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        out = {"run": {"seed": self.seed}}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {k: _plain(v) for k, v in dataclasses.asdict(sec).items() if k not in _DERIVED}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for section, values in d.items():
            for key, value in values.items():
                cfg.set(section, key, value)
        cfg.validate()
        return cfg

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    def keys(self) -> dict[str, list[str]]:
        out = {"run": ["seed"]}
        for name, cls_ in SECTIONS.items():
            out[name] = [f.name for f in dataclasses.fields(cls_) if f.name not in _DERIVED]
        return out

    def set(self, section: str, key: str, value) -> None:
        if section == "run":
            if key != "seed":
                raise ConfigError(f"unknown key run.{key}")
            self.seed = int(value)
            return
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        sec = getattr(self, section)
        hints = typing.get_type_hints(type(sec))
        if key not in hints or key in _DERIVED:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(sec, key, _coerce(value, hints[key], f"{section}.{key}"))

    def override(self, dotted: str, value) -> None:
        if "." in dotted:
            section, key = dotted.split(".", 1)
            self.set(section, key, value)
            return
        owners = [s for s, ks in self.keys().items() if dotted in ks]
        if not owners:
            raise ConfigError(f"unknown key {dotted!r}")
        if len(owners) > 1:
            raise ConfigError(f"key {dotted!r} is ambiguous; use one of "
                              + ", ".join(f"{s}.{dotted}" for s in owners))
        self.set(owners[0], dotted, value)

    def validate(self) -> None:
        k, L = self.align.k, self.lm.max_len
        if k < 1:
            raise ConfigError("align.k must be >= 1")
        # header + user slot + profile/prediction markers leave at least this much
        budget = L - (16 + 2 * self.align.context_cap + 2 * (self.align.text_max_tokens + 1) + 2)
        if k > budget:
            raise ConfigError(f"align.k={k} does not fit max_len={L} after the prompt budget")
        cut = tuple(self.eval.cutoffs)
        if not cut or min(cut) < 1 or max(cut) > k:
            raise ConfigError(f"eval.cutoffs {cut} must lie in 1..align.k={k}")
        if self.align.label_policy not in ("sampled", "heldout"):
            raise ConfigError(f"align.label_policy must be sampled or heldout, got {self.align.label_policy!r}")
        if self.gen.mode not in ("offline", "external"):
            raise ConfigError(f"gen.mode must be offline or external, got {self.gen.mode!r}")
        if self.eval.mode not in ("firstk", "fl", "ar"):
            raise ConfigError(f"eval.mode must be firstk, fl or ar, got {self.eval.mode!r}")
        if not 0.0 < self.eval.ratio <= 1.0:
            raise ConfigError("eval.ratio must be in (0, 1]")
        if self.lm.d_model % self.lm.heads:
            raise ConfigError("lm.d_model must be divisible by lm.heads")

    def dumps(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                if isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _coerce(value, typ, name: str):
    if typ is bool or typ == "bool":
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return str(value)
        if typ is tuple or typing.get_origin(typ) is tuple:
            if isinstance(value, (list, tuple)):
                return tuple(int(x) for x in value)
            return tuple(int(x) for x in str(value).replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{name}: unsupported type {typ}")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (optional) and apply ``{dotted_key: value}`` overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string(text, source=str(path))
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for dotted, value in (overrides or {}).items():
        cfg.override(dotted, value)
    cfg.validate()
    return cfg
