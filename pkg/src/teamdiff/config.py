"""Run configuration files.

Grammar: ``key = value`` lines grouped under ``[section]`` headers, ``#``
starts a comment. Sections: env, data, model, train, eval. Unknown keys are
errors so typos never pass silently.

    [env]
    preset = pp            # pp | lbf | lbf-coop
    [train]
    K = 20
    epochs = 20
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .envs import ConfigError, make_env
from .pipeline import TrainConfig


@dataclass
class DataConfig:
    episodes: int = 2000
    seed: int = 0
    path: str = "data/dataset.padf"
    ego_noise: float = 0.1
    pool_seed: int = 0


@dataclass
class ModelWidths:
    d_z: int = 16
    d_c: int = 32
    d_h: int = 64
    d_a: int = 32
    enc_hidden: int = 64
    film_hidden: int = 64
    ff_hidden: int = 128
    body: str = "afm"

    def widths(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("body")
        return d


@dataclass
class EvalConfig:
    episodes: int = 50
    group: int = 4
    seed: int = 0
    samples: int = 1000
    threshold: float = 0.1
    state_seed: int = 0
    crossplay_episodes: int = 20


@dataclass
class RunConfig:
    env: dict = field(default_factory=lambda: {"preset": "pp"})
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelWidths = field(default_factory=ModelWidths)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    text: str = ""

    def make_env(self):
        kw = {k: v for k, v in self.env.items() if k != "preset"}
        return make_env(self.env.get("preset", "pp"), **kw)

    def snapshot(self) -> dict:
        return {"env": dict(self.env), "data": dataclasses.asdict(self.data),
                "model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train),
                "eval": dataclasses.asdict(self.eval)}


def _convert(raw: str, default, key: str):
    text = raw.strip()
    if text.lower() in ("none", "null") and (default is None or isinstance(default, float)):
        return None
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def _env_value(raw: str):
    text = raw.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        try:
            return tuple(int(p) for p in text.split(","))
        except ValueError:
            pass
    return text


def _fill(cls, section, name: str, base=None):
    obj = base if base is not None else cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        updates[key] = _convert(raw, getattr(obj, key), f"{name}.{key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                   interpolation=None, default_section="__defaults__")
    cp.optionxform = str  # keys are case-sensitive (K)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    sections = set(cp.sections())
    unknown = sections - {"env", "data", "model", "train", "eval"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    env = {"preset": "pp"}
    if "env" in sections:
        for k, v in cp["env"].items():
            env[k] = v.strip() if k == "preset" else _env_value(v)
    cfg = RunConfig(env=env, text=text)
    if "data" in sections:
        cfg.data = _fill(DataConfig, cp["data"], "data")
    if "model" in sections:
        cfg.model = _fill(ModelWidths, cp["model"], "model")
    if "train" in sections:
        cfg.train = _fill(TrainConfig, cp["train"], "train")
    if "eval" in sections:
        cfg.eval = _fill(EvalConfig, cp["eval"], "eval")
    # the environment must at least construct
    env_obj = cfg.make_env()
    cfg.train = dataclasses.replace(cfg.train, env=env_obj.name)
    if cfg.model.body not in ("afm", "mlp", "unet"):
        raise ConfigError(f"unknown denoiser body {cfg.model.body!r}")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
