"""Run configuration: flat ``key = value`` text with dotted namespaces.

Sections map onto dataclasses::

    model.*  ModelConfig (except the nested block)
    block.*  BlockConfig
    train.*  TrainConfig
    task.*   TaskSpec
    run.*    RunSection

Unknown keys are rejected. ``dump`` writes every field, so parsing the echo
reproduces an identical RunConfig.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .model import ModelConfig, TrainConfig
from .tasks import TaskSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    routing: str = "learned"           # learned | all_softmax | all_linear
    eval_seqs: int = 64
    eval_seed: int = 12345
    bench_lengths: tuple = (256, 512, 1024, 2048)
    bench_fractions: tuple = (0.0, 0.25, 0.5, 1.0)
    bench_decode_steps: int = 32
    gen_tokens: int = 32
    temperature: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    run: RunSection = field(default_factory=RunSection)


_NONE_OK = {("block", "sub_chunk")}


def _sections(cfg: RunConfig):
    return {"model": cfg.model, "block": cfg.model.block, "train": cfg.train,
            "task": cfg.task, "run": cfg.run}


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(section, key, raw, default):
    raw = raw.strip()
    try:
        if raw.lower() == "none" and (section, key) in _NONE_OK:
            return None
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int) or (default is None and (section, key) in _NONE_OK):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                kind = type(default[0])
                return tuple(kind(x) if kind is int else float(x) for x in items)
            return tuple(items)
        return raw
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: {e}") from None


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """pairs: iterable of (dotted_key, raw_value)."""
    secs = {k: {} for k in ("model", "block", "train", "task", "run")}
    current = _sections(cfg)
    for key, raw in pairs:
        if "." not in key:
            raise ConfigError(f"key {key!r} needs a section prefix (model., block., train., "
                              f"task., run.)")
        sec, name = key.split(".", 1)
        if sec not in secs:
            raise ConfigError(f"unknown section {sec!r} in key {key!r}")
        obj = current[sec]
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names or (sec == "model" and name == "block"):
            raise ConfigError(f"unknown key {key!r}")
        secs[sec][name] = _coerce(sec, name, raw, getattr(obj, name))
    try:
        block = replace(cfg.model.block, **secs["block"])
        model_kw = dict(secs["model"])
        if "layer_pattern" in model_kw and "n_layers" not in model_kw:
            model_kw["n_layers"] = len(model_kw["layer_pattern"])
        if "n_layers" in model_kw and "layer_pattern" not in model_kw:
            pat = cfg.model.layer_pattern
            model_kw["layer_pattern"] = tuple((pat * model_kw["n_layers"])[:model_kw["n_layers"]])
        model = replace(cfg.model, block=block, **model_kw)
        train = replace(cfg.train, **secs["train"])
        task = replace(cfg.task, **secs["task"])
        run = replace(cfg.run, **secs["run"])
        out = RunConfig(model=model, train=train, task=task, run=run)
        validate(out)
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    return out


def validate(cfg: RunConfig):
    try:
        cfg.train.validate(cfg.model.block.chunk)
        cfg.task.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.task.seq_len != cfg.train.seq_len:
        raise ConfigError(f"task.seq_len={cfg.task.seq_len} must equal "
                          f"train.seq_len={cfg.train.seq_len}")
    if cfg.task.vocab > cfg.model.vocab:
        raise ConfigError(f"model.vocab={cfg.model.vocab} is smaller than the task vocabulary "
                          f"({cfg.task.vocab})")
    if cfg.run.routing not in ("learned", "all_softmax", "all_linear"):
        raise ConfigError(f"run.routing must be learned|all_softmax|all_linear, "
                          f"got {cfg.run.routing!r}")
    for L in cfg.run.bench_lengths:
        if L % cfg.model.block.chunk:
            raise ConfigError(f"bench length {L} is not a multiple of block.chunk")


def parse_lines(text):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = s.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def loads(text, overrides=()) -> RunConfig:
    return apply_overrides(RunConfig(), list(parse_lines(text)) + list(overrides))


def load(path, overrides=()) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return loads(text, overrides)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for sec, obj in _sections(cfg).items():
        for f in dataclasses.fields(obj):
            if sec == "model" and f.name == "block":
                continue
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_set(items):
    """``--set key=value`` strings -> (key, value) pairs."""
    out = []
    for it in items or ():
        if "=" not in it:
            raise ConfigError(f"--set expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out
