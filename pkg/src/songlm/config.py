"""Run configuration: nested dataclasses, JSON loading with field-path errors, hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass

from .corpus import CorpusConfig
from .lelm import LeLMConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class RvqSection:
    stages: int = 2
    k: int = 64
    iters: int = 20
    max_samples: int = 20000


@dataclass(frozen=True)
class StageSection:
    steps: int = 2000
    batch_size: int = 8
    warmup: int = 200
    dropout: float = 0.5
    lr_scale: float = 1.0
    clip_norm: typing.Optional[float] = None


@dataclass(frozen=True)
class TrainerSection:
    stage1: StageSection = StageSection()
    stage2: StageSection = StageSection(steps=800, warmup=100)
    holdout: int = 100


@dataclass(frozen=True)
class RewardSection:
    hidden: int = 32
    steps: int = 400
    lr: float = 3e-3
    batch: int = 64
    votes: int = 5
    agree: int = 4
    noise_std: float = 0.05
    labeled_groups: int = 200
    heldout_frac: float = 0.3
    target: float = 0.8


@dataclass(frozen=True)
class DpoSection:
    beta: float = 0.1
    steps: int = 300
    batch_pairs: int = 4
    lr: float = 3e-4
    warmup: int = 10
    length_normalize: bool = False


@dataclass(frozen=True)
class AlignmentSection:
    lyrics: int = 200
    n_per_condition: int = 4
    gap: float = 2.0
    reward: RewardSection = RewardSection()
    dpo: DpoSection = DpoSection()
    mixed_baseline: bool = True
    merge_alpha: tuple = (1 / 3, 1 / 3, 1 / 3)
    sweep_alphas: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (0.5, 0.5, 0.0),
                           (0.5, 0.0, 0.5), (0.0, 0.5, 0.5), (1 / 3, 1 / 3, 1 / 3))


@dataclass(frozen=True)
class GenerationSection:
    k: typing.Optional[int] = None
    temperature: float = 0.9
    max_frames: int = 128


@dataclass(frozen=True)
class EvalSection:
    prompts: int = 50
    memorization_songs: int = 40
    ngram: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    corpus: CorpusConfig = CorpusConfig()
    rvq: RvqSection = RvqSection()
    lelm: LeLMConfig = LeLMConfig()
    trainer: TrainerSection = TrainerSection()
    alignment: AlignmentSection = AlignmentSection()
    generation: GenerationSection = GenerationSection()
    evalx: EvalSection = EvalSection()


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return from_dict(tp, value, path)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build ``cls`` from plain JSON data; errors name the offending field path."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}".lstrip("."), "unknown field")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _convert(hints[key], value, f"{path}.{key}".lstrip("."))
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from exc


def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(obj)


def validate(cfg: RunConfig) -> RunConfig:
    """Cross-module consistency checks."""
    c, m = cfg.corpus, cfg.lelm
    checks = [
        ("lelm.v_lyric", m.v_lyric == c.v_lyric + 2, f"must equal corpus.v_lyric + 2 = {c.v_lyric + 2}"),
        ("lelm.v_style", m.v_style == c.v_style, f"must equal corpus.v_style = {c.v_style}"),
        ("lelm.k_m", m.k_m == cfg.rvq.k + 1, f"must equal rvq.k + 1 = {cfg.rvq.k + 1} (EOS is the last id)"),
        ("lelm.k_v", m.k_v == cfg.rvq.k, f"must equal rvq.k = {cfg.rvq.k}"),
        ("lelm.k_a", m.k_a == cfg.rvq.k, f"must equal rvq.k = {cfg.rvq.k}"),
        ("lelm.max_frames", m.max_frames >= c.frames, "must cover corpus.frames"),
        ("generation.max_frames", cfg.generation.max_frames <= m.max_frames, "must not exceed lelm.max_frames"),
        ("threads", cfg.threads >= 1, "must be >= 1"),
        ("rvq.stages", cfg.rvq.stages >= 1, "must be >= 1"),
        ("alignment.n_per_condition", cfg.alignment.n_per_condition >= 1, "must be >= 1"),
        ("alignment.lyrics", cfg.alignment.lyrics >= 1, "must be >= 1"),
        ("evalx.prompts", cfg.evalx.prompts >= 1, "must be >= 1"),
        ("alignment.reward.heldout_frac", 0 < cfg.alignment.reward.heldout_frac < 1, "must lie in (0, 1)"),
        ("alignment.merge_alpha", len(cfg.alignment.merge_alpha) == 3, "needs three weights"),
        ("alignment.sweep_alphas", all(len(a) == 3 for a in cfg.alignment.sweep_alphas), "needs three weights per point"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(path, msg)
    from .alignment.merge import MergeError, MergeWeights
    for path, alphas in (("alignment.merge_alpha", [cfg.alignment.merge_alpha]),
                         ("alignment.sweep_alphas", cfg.alignment.sweep_alphas)):
        for a in alphas:
            try:
                MergeWeights(tuple(a))
            except MergeError as exc:
                raise ConfigError(path, str(exc)) from exc
    for i, st in enumerate((cfg.trainer.stage1, cfg.trainer.stage2)):
        if st.steps < 1:
            raise ConfigError(f"trainer.stage{i + 1}.steps", "must be >= 1")
        if not 0 <= st.dropout <= 1:
            raise ConfigError(f"trainer.stage{i + 1}.dropout", "must lie in [0, 1]")
    return cfg


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted ``key=value`` overrides to a plain config dict."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                raise ConfigError(".".join(parts[: i + 1]), "unknown section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(key, "unknown field")
        node[parts[-1]] = parse_value(text)
    return data


def load_config(path=None, overrides=(), seed: int | None = None, threads: int | None = None) -> RunConfig:
    data = to_dict(RunConfig())
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
        data = _merge(data, user, "")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if threads is not None:
        data["threads"] = threads
    return validate(from_dict(RunConfig, data))


def _merge(base: dict, user, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(path, "expected an object")
    out = dict(base)
    for key, value in user.items():
        sub = f"{path}.{key}".lstrip(".")
        if key not in base:
            raise ConfigError(sub, "unknown field")
        out[key] = _merge(base[key], value, sub) if isinstance(base[key], dict) else value
    return out


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
