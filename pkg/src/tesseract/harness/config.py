"""Experiment configuration files.

Grammar (an INI dialect read with ``configparser``)::

    file     := section*
    section  := "[" name ("." name)* "]" NEWLINE entry*
    entry    := key "=" value NEWLINE
    value    := python literal (int, float, str, list, tuple, bool, None)
                | "[" value ("," value)* "]"
                | bare word, read as a string

Sections ``experiment``, ``env``, ``mf``, ``mb``, ``mb.als``, ``ablation``
and ``verify`` are recognised; ``#`` and ``;`` start comment lines.  A
dotted key ``section.key`` names one entry and is what ``--override``
takes.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..model_based import MbConfig
from ..model_free import MfConfig

KINDS = ("model_based", "model_free", "ablation_rank", "ablation_env_rank", "verify")
VERIFY_KINDS = ("thm1", "thm3", "props")
ALGORITHMS = ("tac", "iac", "vdn")
ENV_TYPES = ("tensor_game", "mmdp", "file")
SECTIONS = ("experiment", "env", "mf", "mb", "mb.als", "ablation", "verify")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


class UnknownKindError(ConfigError):
    pass


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if text.startswith("[") and text.endswith("]"):  # list of bare words
        return [parse_value(item) for item in text[1:-1].split(",") if item.strip()]
    return text


def read_sections(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    out = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        out[name] = {k: parse_value(v) for k, v in cp.items(name)}
    return out


def apply_overrides(sections: dict, overrides) -> dict:
    """``overrides`` is an iterable of ``section.key=value`` strings."""
    out = {k: dict(v) for k, v in sections.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, value = item.split("=", 1)
        if "." not in path:
            raise ConfigError(f"override key {path!r} needs a section prefix")
        section, key = path.strip().rsplit(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override")
        out.setdefault(section, {})[key] = parse_value(value)
    return out


def _check_keys(section, given, allowed):
    extra = set(given) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")


_ENV_KEYS = {
    "tensor_game": ("type", "num_agents", "num_actions", "rank", "seed"),
    "mmdp": ("type", "num_states", "num_agents", "num_actions", "k1", "k2", "gamma",
             "transitions", "seed"),
    "file": ("type", "path"),
}
_ENV_REQUIRED = {
    "tensor_game": ("num_agents", "num_actions", "rank"),
    "mmdp": ("num_states", "num_agents", "num_actions", "k1", "k2", "gamma"),
    "file": ("path",),
}


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list
    env: dict = field(default_factory=dict)
    algorithms: list = field(default_factory=lambda: ["tac"])
    mf: dict = field(default_factory=dict)
    mb: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnknownKindError(f"unknown experiment kind {self.kind!r}")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        self.seeds = list(self.seeds)
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of nonnegative integers")
        self._validate()

    # -- validation ---------------------------------------------------------

    def _validate(self):
        if self.kind == "verify":
            what = self.verify.get("what")
            if what not in VERIFY_KINDS:
                raise UnknownKindError(f"unknown verify kind {what!r}")
            return
        etype = self.env.get("type")
        if etype not in ENV_TYPES:
            raise ConfigError(f"[env] type must be one of {ENV_TYPES}, got {etype!r}")
        _check_keys("env", self.env, _ENV_KEYS[etype])
        missing = [k for k in _ENV_REQUIRED[etype] if k not in self.env]
        if missing:
            raise ConfigError(f"[env] missing keys {missing}")
        _check_keys("mf", self.mf, [f.name for f in fields(MfConfig)])
        _check_keys("mb", self.mb, [f.name for f in fields(MbConfig)])
        if self.kind == "model_based":
            if etype == "tensor_game":
                raise ConfigError("model_based needs an mmdp environment")
        else:
            if etype == "mmdp":
                raise ConfigError(f"{self.kind} needs a tensor_game environment")
            bad = [a for a in self.algorithms if a not in ALGORITHMS]
            if not self.algorithms or bad:
                raise ConfigError(f"algorithms must be drawn from {ALGORITHMS}")
        if self.kind == "ablation_rank":
            ranks = self.ablation.get("ranks")
            if not ranks or not all(isinstance(k, int) and k >= 1 for k in ranks):
                raise ConfigError("[ablation] ranks must list positive integers")
        if self.kind == "ablation_env_rank":
            if etype != "tensor_game":
                raise ConfigError("ablation_env_rank needs a generated tensor_game")
            ranks = self.ablation.get("env_ranks")
            if not ranks or not all(isinstance(k, int) and k >= 1 for k in ranks):
                raise ConfigError("[ablation] env_ranks must list positive integers")
        # building the dataclasses surfaces type and range errors early
        try:
            self.mf_config(0)
            self.mb_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- accessors ------------------------------------------------------------

    def mf_config(self, seed: int, **extra) -> MfConfig:
        return MfConfig(**{**self.mf, **extra, "seed": seed})

    def mb_config(self, seed: int) -> MbConfig:
        return MbConfig(**{**self.mb, "seed": seed})

    def semantic(self) -> dict:
        """Everything that defines the experiment except seeds and output path."""
        d = asdict(self)
        d.pop("seeds")
        d.pop("out")
        if self.kind != "verify":
            d.pop("verify")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_sections(cls, sections: dict) -> "ExperimentConfig":
        exp = dict(sections.get("experiment", {}))
        if "kind" not in exp:
            raise ConfigError("[experiment] kind is required")
        kind = exp.pop("kind")
        verify = dict(sections.get("verify", {}))
        if isinstance(kind, str) and kind.startswith("verify:"):
            kind, verify["what"] = "verify", kind.split(":", 1)[1]
        seeds = exp.pop("seeds", exp.pop("seed", None))
        if seeds is None:
            raise ConfigError("[experiment] seeds is required")
        algorithms = exp.pop("algorithms", ["tac"])
        if isinstance(algorithms, str):
            algorithms = [algorithms]
        out = exp.pop("out", None)
        _check_keys("experiment", exp, ())
        mb = dict(sections.get("mb", {}))
        if "mb.als" in sections:
            mb["als"] = dict(sections["mb.als"])
        return cls(kind=kind, seeds=seeds, env=dict(sections.get("env", {})),
                   algorithms=list(algorithms), mf=dict(sections.get("mf", {})), mb=mb,
                   ablation=dict(sections.get("ablation", {})), verify=verify,
                   out=None if out is None else str(out))

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "ExperimentConfig":
        return cls.from_sections(apply_overrides(read_sections(text), overrides))

    @classmethod
    def from_file(cls, path, overrides=()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, overrides)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    group: str
    csv_path: str
    summary: dict
    wall_ms: float

    def to_dict(self) -> dict:
        return asdict(self)
