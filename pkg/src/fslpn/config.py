"""Run configuration: ``key = value`` files with sections, plus flag overrides."""
from __future__ import annotations

import configparser
import difflib
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig
from .pipeline import STAGE2_LOSSES, TrainConfig

SECTIONS = ("data", "model", "train", "eval")
OUT_DIR_ENV = "FSLPN_OUT_DIR"


@dataclass
class RunConfig:
    # [data]
    train_path: str | None = field(default=None, metadata={"section": "data"})
    test_path: str | None = field(default=None, metadata={"section": "data"})
    schema: str = field(default="unsw_nb15", metadata={"section": "data"})
    target_count: int | None = field(default=None, metadata={"section": "data"})
    correlation_threshold: float = field(default=0.7, metadata={"section": "data"})
    mi_bins: int = field(default=20, metadata={"section": "data"})
    # [model]
    channels: int = field(default=64, metadata={"section": "model"})
    conv_layers: int = field(default=9, metadata={"section": "model"})
    kernel_size: int = field(default=3, metadata={"section": "model"})
    out_dim: int = field(default=32, metadata={"section": "model"})
    # [train]
    learning_rate: float = field(default=0.001, metadata={"section": "train"})
    episodes: int = field(default=1000, metadata={"section": "train"})
    classifier_episodes: int | None = field(default=None, metadata={"section": "train"})
    ways: int = field(default=2, metadata={"section": "train"})
    shots: int = field(default=2, metadata={"section": "train"})
    queries: int = field(default=15, metadata={"section": "train"})
    tau: float = field(default=0.1, metadata={"section": "train"})
    beta: float = field(default=1.0, metadata={"section": "train"})
    alpha: float = field(default=0.001, metadata={"section": "train"})
    stage2_loss: str = field(default="infomax", metadata={"section": "train"})
    seed: int = field(default=0, metadata={"section": "train"})
    dtype: str = field(default="float32", metadata={"section": "train"})
    # [eval]
    eval_episodes: int = field(default=200, metadata={"section": "eval"})
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4], metadata={"section": "eval"})
    # not file keys
    command: str | None = field(default=None, metadata={"section": None})
    checkpoint: str | None = field(default=None, metadata={"section": None})
    out_dir: str = field(default="out", metadata={"section": None})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, episodes=self.episodes,
            classifier_episodes=self.classifier_episodes, ways=self.ways, shots=self.shots,
            queries=self.queries, tau=self.tau, beta=self.beta, alpha=self.alpha,
            stage2_loss=self.stage2_loss, seed=self.seed, dtype=self.dtype, eval_episodes=self.eval_episodes)

    def model_config(self, input_length: int) -> ModelConfig:
        return ModelConfig.default(input_length, channels=self.channels, conv_layers=self.conv_layers,
                                   kernel_size=self.kernel_size, out_dim=self.out_dim)

    def validate(self):
        if self.stage2_loss not in STAGE2_LOSSES:
            raise ConfigError(f"stage2_loss must be one of {STAGE2_LOSSES}, got {self.stage2_loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


FILE_KEYS = {f.name: f for f in fields(RunConfig) if f.metadata.get("section")}


def _type_name(f):
    return {"int": "integer", "float": "real number", "str": "string", "list": "comma-separated integers"}.get(
        str(f.type).split(" ")[0].split("|")[0].strip(), str(f.type))


def convert(key: str, text):
    """Convert a textual value to the field's type, or raise ConfigError naming the expected type."""
    f = FILE_KEYS[key]
    t = str(f.type)
    raw = text.strip() if isinstance(text, str) else text
    if not isinstance(raw, str):
        return raw
    if "None" in t and raw.lower() in ("", "none"):
        return None
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("list"):
            return [int(v) for v in raw.replace(" ", "").split(",") if v]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {_type_name(f)}, got {raw!r}") from None


def _unknown(key):
    near = difflib.get_close_matches(key, list(FILE_KEYS), n=1)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigError(f"unknown key {key!r}{hint}")


def parse_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Resolve defaults < file < environment (out_dir only) < flag overrides."""
    values = {}
    if path is not None:
        cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       default_section="__none__")
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {list(SECTIONS)}")
            for key, text in cp.items(section):
                if key not in FILE_KEYS:
                    raise _unknown(key)
                if FILE_KEYS[key].metadata["section"] != section:
                    raise ConfigError(f"key {key!r} belongs in [{FILE_KEYS[key].metadata['section']}], "
                                      f"not [{section}]")
                values[key] = convert(key, text)
    env = os.environ if env is None else env
    if env.get(OUT_DIR_ENV):
        values["out_dir"] = env[OUT_DIR_ENV]
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key in FILE_KEYS:
            values[key] = convert(key, val)
        elif key in ("command", "checkpoint", "out_dir"):
            values[key] = val
        else:
            raise _unknown(key)
    return RunConfig(**values).validate()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def serialize(cfg: RunConfig) -> str:
    """Text form accepted by :func:`parse_config` (runtime-only fields are emitted as comments)."""
    lines = [f"# command = {cfg.command}", f"# checkpoint = {cfg.checkpoint}", f"# out_dir = {cfg.out_dir}"]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for name, f in FILE_KEYS.items():
            if f.metadata["section"] == section:
                lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"
