"""Desk-scale evaluation: oracle metrics, memorization checks and correlation.

Oracle analogs replace the listening-based metrics: ``per_analog`` transcribes
decoded vocals, style similarity compares pooled accompaniment bands, and
musicality is melody smoothness.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .corpus import Lyrics, melody_smoothness, split_mixed, style_similarity_oracle, transcribe_oracle
from .rvq import RvqError, TokenStreams


class EvalError(ValueError):
    pass


def edit_distance(a, b) -> int:
    """Levenshtein distance (unit insert, delete and substitute costs)."""
    return kernels.levenshtein(np.asarray(a, dtype=np.int64).ravel(), np.asarray(b, dtype=np.int64).ravel())


def levenshtein_sim(a, b) -> float:
    n = max(len(a), len(b))
    if n == 0:
        return 1.0
    return 1.0 - edit_distance(a, b) / n


def _ngrams(seq, n: int) -> set:
    seq = [int(x) for x in seq]
    return {tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)}


def ngram_overlap(a, b, n: int = 5) -> float:
    """Share of distinct n-grams of ``a`` (the candidate) that also occur in ``b``."""
    if n < 1:
        raise EvalError("n must be >= 1")
    grams = _ngrams(a, n)
    if not grams:
        return 0.0
    return len(grams & _ngrams(b, n)) / len(grams)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise EvalError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise EvalError("pearson is undefined for zero variance")
    return float(np.clip(dx @ dy / (sx * sy), -1.0, 1.0))


def decoded_vocal(streams: TokenStreams, codec) -> np.ndarray:
    """Vocal features of a stream set; mixed-only streams are band-split."""
    try:
        vocal, _, mixed = codec.decode_streams(streams)
    except RvqError as exc:
        raise EvalError(f"streams do not match the codec: {exc}") from exc
    return vocal if vocal is not None else split_mixed(mixed)[0]


def per_analog(streams: TokenStreams, codec, lyrics) -> float:
    """Edit distance of the transcribed vocal against the lyrics, over lyric length, capped at 1."""
    symbols = lyrics.symbols if isinstance(lyrics, Lyrics) else np.asarray(lyrics, dtype=np.int64)
    if streams.dual and codec.mode != "dual-track":
        raise EvalError("dual-track streams need a dual-track codec")
    if streams.dual and (streams.k_v != codec.vocab("vocal") or streams.k_a != codec.vocab("accomp")):
        raise EvalError("stream vocabularies differ from the codec's")
    if len(streams) == 0:
        return 1.0 if len(symbols) else 0.0
    heard = transcribe_oracle(decoded_vocal(streams, codec))
    return min(edit_distance(heard, symbols) / max(len(symbols), 1), 1.0)


def mean_ci(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    half = 1.96 * v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return float(v.mean()), float(half)


@dataclass
class EvalPrompt:
    lyrics: Lyrics
    style: int
    prompt_tokens: np.ndarray
    prompt_features: np.ndarray
    ref: int = -1


@dataclass
class MetricsReport:
    models: dict = field(default_factory=dict)  # model name -> metric map
    meta: dict = field(default_factory=dict)    # seeds, config hash

    def add(self, name: str, metrics: dict) -> None:
        for key, val in metrics.items():
            if isinstance(val, float) and not math.isfinite(val):
                raise EvalError(f"metric {name}.{key} is not finite")
        self.models[name] = metrics

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    def write_csv(self, path, columns=("per_analog", "style_sim_text", "style_sim_audio", "musicality")) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(("model",) + tuple(columns)) + "\n")
            for name, m in self.models.items():
                fh.write(",".join([name] + [f"{m.get(c, float('nan')):.6f}" for c in columns]) + "\n")


def eval_conditions(prompts):
    from .corpus import Conditions
    return [Conditions(p.lyrics, p.style, p.ref, np.asarray(p.prompt_tokens)) for p in prompts]


def evaluate_model(model, codec, prompts, sampler_cfg, dual: bool = True, songs=None) -> dict:
    """Generate one song per prompt under text + audio conditioning and score it."""
    from .generation import generate_many
    streams = generate_many(model, eval_conditions(prompts), sampler_cfg, dual=dual)
    return score_streams(streams, codec, prompts, songs)


def score_streams(streams, codec, prompts, songs=None) -> dict:
    per, text, audio, music = [], [], [], []
    for st, p in zip(streams, prompts):
        per.append(per_analog(st, codec, p.lyrics))
        vocal, _, mixed = codec.decode_streams(st)
        if vocal is None:
            vocal = split_mixed(mixed)[0]
        if len(mixed):
            text.append(style_similarity_oracle(mixed, p.style))
            audio.append(style_similarity_oracle(mixed, p.prompt_features))
            music.append(melody_smoothness(vocal))
    per_mean, per_ci = mean_ci(per)
    out = {
        "per_analog": per_mean,
        "per_analog_ci": per_ci,
        "style_sim_text": float(np.mean(text)) if text else 0.0,
        "style_sim_audio": float(np.mean(audio)) if audio else 0.0,
        "musicality": float(np.mean(music)) if music else 0.0,
        "n": len(per),
    }
    if songs is not None:
        out["recon_mse"] = recon_mse(codec, songs)
    return out


def recon_mse(codec, songs) -> float:
    """Mean squared error of the codec's stage-0 mixed reconstruction."""
    errs = []
    for s in songs:
        _, _, mixed = codec.decode_streams(codec.token_streams(s.tracks))
        errs.append(float(np.mean((mixed.astype(np.float64) - s.tracks.mixed) ** 2)))
    return float(np.mean(errs))


def memorization(generated, training, n: int = 5) -> dict:
    """Max n-gram overlap and Levenshtein similarity of each generation to the training set."""
    overlaps, sims = [], []
    for g in generated:
        overlaps.append(max(ngram_overlap(g, t, n) for t in training))
        sims.append(max(levenshtein_sim(g, t) for t in training))
    return {"ngram_overlap": float(np.mean(overlaps)), "levenshtein_sim": float(np.mean(sims))}


def run_ablation(matrix_config, out_dir=None) -> MetricsReport:
    """Train and evaluate the five ablation variants under shared seeds."""
    from .pipeline import run_ablation as _run
    return _run(matrix_config, out_dir)
