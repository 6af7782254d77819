"""Synthetic songs and the oracles that score them.

Feature layout of a frame (D >= 8)::

    [0:4]  lyric band      symbol embedding of the sung lyric symbol
    [4]    pitch           melody contour
    [5:D]  accompaniment   chord template + style timbre + noise

Vocal frames only use the lyric band and pitch; accompaniment frames only use
the accompaniment band, so the fixed 0.5/0.5 mix is exactly separable.
"""
from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .numerics.rng import derive_seed, make_rng

LYRIC_BAND = slice(0, 4)
PITCH_DIM = 4
ACCOMP_START = 5
VOCAL_GAIN = 0.5
ACCOMP_GAIN = 0.5
WORLD_SEED = 20250


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    count: int = 2000
    frames: int = 128
    dim: int = 8
    v_lyric: int = 40
    v_style: int = 8
    prompt_frames: int = 16
    p_text_style: float = 0.5
    p_audio_prompt: float = 0.5
    sections: tuple = (2, 4)
    section_len: tuple = (4, 7)
    bar_frames: int = 16
    accomp_noise: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class StyleTag:
    id: int


@dataclass
class Lyrics:
    symbols: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)

    def __len__(self):
        return len(self.symbols)


@dataclass
class SongTracks:
    vocal: np.ndarray
    accompaniment: np.ndarray
    mixed: np.ndarray
    frame_rate: float = 25.0

    @property
    def frames(self) -> int:
        return self.vocal.shape[0]


@dataclass
class Conditions:
    """Lyrics plus optional style tag and optional audio prompt.

    ``prompt_ref`` names the reference song the prompt comes from;
    ``audio_prompt`` holds its mixed tokens once a codec has encoded them.
    """

    lyrics: Lyrics
    style: int | None = None
    prompt_ref: int | None = None
    audio_prompt: np.ndarray | None = None

    @property
    def has_audio(self) -> bool:
        return self.prompt_ref is not None or self.audio_prompt is not None


@dataclass
class Song:
    index: int
    seed: int
    style: int
    tracks: SongTracks
    conditions: Conditions


class SongWorld:
    """Fixed tables shared by the generator and the oracles."""

    def __init__(self, dim: int = 8, v_lyric: int = 40, v_style: int = 8, n_chords: int = 6):
        if dim < ACCOMP_START + 3:
            raise CorpusError(f"feature dimension must be >= {ACCOMP_START + 3}")
        self.dim = dim
        self.v_lyric = v_lyric
        self.v_style = v_style
        self.verse_marker = v_lyric
        self.chorus_marker = v_lyric + 1
        rng = make_rng(WORLD_SEED, "world", dim, v_lyric, v_style)
        lattice = np.array([p for p in itertools.product((-1, 0, 1), repeat=4) if any(p)], dtype=np.float64)
        if v_lyric + 2 > len(lattice):
            raise CorpusError(f"at most {len(lattice) - 2} lyric symbols supported")
        pick = rng.permutation(len(lattice))[: v_lyric + 2]
        self.symbol_table = (2.0 * lattice[pick]).astype(np.float32)
        band = dim - ACCOMP_START
        self.timbres = self._spread_directions(rng, v_style, band) * 1.5
        chords = rng.normal(size=(n_chords, band))
        self.chords = (0.5 * chords / np.linalg.norm(chords, axis=1, keepdims=True)).astype(np.float32)
        self.templates = np.stack([rng.choice(n_chords, size=4) for _ in range(v_style)])

    @staticmethod
    def _spread_directions(rng, n, dim):
        out = []
        tries = 0
        while len(out) < n:
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            tries += 1
            if tries < 5000 and any(float(v @ u) > 0.5 for u in out):
                continue
            out.append(v)
        return np.array(out, dtype=np.float32)

    def style_descriptor(self, style) -> np.ndarray:
        """Expected pooled accompaniment-band mean of a song in ``style``."""
        s = _style_id(style)
        if not 0 <= s < self.v_style:
            raise CorpusError(f"style {s} out of range")
        return (self.chords[self.templates[s]].mean(axis=0) + self.timbres[s]).astype(np.float64)

    @property
    def n_symbols(self) -> int:
        return self.v_lyric + 2


@functools.lru_cache(maxsize=8)
def get_world(dim: int = 8, v_lyric: int = 40, v_style: int = 8) -> SongWorld:
    return SongWorld(dim, v_lyric, v_style)


def world_for(cfg: CorpusConfig) -> SongWorld:
    return get_world(cfg.dim, cfg.v_lyric, cfg.v_style)


def _style_id(style) -> int:
    return int(style.id if isinstance(style, StyleTag) else style)


def gen_lyrics(rng: np.random.Generator, cfg: CorpusConfig) -> Lyrics:
    world = world_for(cfg)
    n_sections = int(rng.integers(cfg.sections[0], cfg.sections[1] + 1))

    def section():
        n = int(rng.integers(cfg.section_len[0], cfg.section_len[1] + 1))
        out = [int(rng.integers(cfg.v_lyric))]
        while len(out) < n:
            s = int(rng.integers(cfg.v_lyric))
            if s != out[-1]:
                out.append(s)
        return out

    chorus = section()
    symbols: list[int] = []
    for i in range(n_sections):
        if i % 2 == 0:
            symbols += [world.verse_marker] + section()
        else:
            symbols += [world.chorus_marker] + chorus
    return Lyrics(np.array(symbols, dtype=np.int64))


def frame_symbols(n_symbols: int, frames: int) -> np.ndarray:
    """Index of the lyric symbol sung at every frame (even split)."""
    t = np.arange(frames)
    return (t * n_symbols) // frames


def gen_song(seed: int, style, lyrics: Lyrics, frames: int = 128, world: SongWorld | None = None,
             bar_frames: int = 16, accomp_noise: float = 0.05) -> SongTracks:
    if lyrics is None or len(lyrics) == 0:
        raise CorpusError("lyrics must be non-empty")
    world = world or get_world()
    if len(lyrics) > frames:
        raise CorpusError(f"{len(lyrics)} lyric symbols do not fit in {frames} frames")
    if np.any(lyrics.symbols < 0) or np.any(lyrics.symbols >= world.n_symbols):
        raise CorpusError("lyric symbol out of range")
    s = _style_id(style)
    rng = make_rng(seed, "song", s)
    which = frame_symbols(len(lyrics), frames)

    steps = rng.choice(np.array([-0.2, -0.1, 0.0, 0.1, 0.2]), size=len(lyrics))
    notes = np.clip(np.cumsum(steps), -0.6, 0.6)
    glide = np.convolve(notes[which], np.ones(3) / 3.0, mode="same")
    glide[0], glide[-1] = notes[which[0]], notes[which[-1]]

    vocal = np.zeros((frames, world.dim), dtype=np.float32)
    vocal[:, LYRIC_BAND] = world.symbol_table[lyrics.symbols[which]]
    vocal[:, PITCH_DIM] = glide.astype(np.float32)

    accomp = np.zeros((frames, world.dim), dtype=np.float32)
    bars = (np.arange(frames) // bar_frames) % world.templates.shape[1]
    chord = world.chords[world.templates[s][bars]]
    noise = rng.normal(scale=accomp_noise, size=chord.shape)
    accomp[:, ACCOMP_START:] = (chord + world.timbres[s] + noise).astype(np.float32)

    mixed = np.float32(VOCAL_GAIN) * vocal + np.float32(ACCOMP_GAIN) * accomp
    return SongTracks(vocal, accomp, mixed)


def gen_dataset(cfg: CorpusConfig) -> list[Song]:
    if cfg.count <= 0:
        raise CorpusError("dataset count must be positive")
    world = world_for(cfg)
    rng = make_rng(cfg.seed, "dataset")
    styles = rng.integers(cfg.v_style, size=cfg.count)
    songs = []
    for i in range(cfg.count):
        item_rng = make_rng(cfg.seed, "item", i)
        seed = derive_seed(cfg.seed, "song-seed", i)
        lyrics = gen_lyrics(item_rng, cfg)
        has_style = bool(item_rng.random() < cfg.p_text_style)
        has_audio = bool(item_rng.random() < cfg.p_audio_prompt)
        prompt_ref = None
        if has_audio:
            same = np.flatnonzero(styles == styles[i])
            same = same[same != i]
            if len(same):
                prompt_ref = int(same[item_rng.integers(len(same))])
        tracks = gen_song(seed, int(styles[i]), lyrics, cfg.frames, world, cfg.bar_frames, cfg.accomp_noise)
        cond = Conditions(lyrics, int(styles[i]) if has_style else None, prompt_ref)
        songs.append(Song(i, seed, int(styles[i]), tracks, cond))
    return songs


def manifest_records(songs: list[Song]) -> list[dict]:
    return [
        {
            "index": s.index,
            "seed": s.seed,
            "style": s.style,
            "lyrics": s.conditions.lyrics.symbols.tolist(),
            "has_text_style": s.conditions.style is not None,
            "has_audio_prompt": s.conditions.prompt_ref is not None,
            "prompt_ref": s.conditions.prompt_ref,
        }
        for s in songs
    ]


def write_manifest(songs: list[Song], path) -> None:
    with open(path, "w") as fh:
        for rec in manifest_records(songs):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def songs_from_manifest(records: list[dict], cfg: CorpusConfig) -> list[Song]:
    """Regenerate songs from manifest records; bit-identical to the original run."""
    world = world_for(cfg)
    songs = []
    for rec in records:
        lyrics = Lyrics(rec["lyrics"])
        tracks = gen_song(rec["seed"], rec["style"], lyrics, cfg.frames, world, cfg.bar_frames, cfg.accomp_noise)
        cond = Conditions(lyrics, rec["style"] if rec["has_text_style"] else None, rec["prompt_ref"])
        songs.append(Song(rec["index"], rec["seed"], rec["style"], tracks, cond))
    return songs


# --- oracles -----------------------------------------------------------------

def transcribe_oracle(vocal: np.ndarray, world: SongWorld | None = None, silence: float = 0.5) -> np.ndarray:
    """Nearest-symbol readout of vocal frames, collapsing consecutive repeats.

    Frames whose lyric-band norm is below ``silence`` read as a blank, which
    separates repeats and is then dropped.
    """
    world = world or get_world()
    vocal = np.asarray(vocal, dtype=np.float32)
    if vocal.ndim != 2 or vocal.shape[1] != world.dim:
        raise CorpusError(f"expected (T, {world.dim}) vocal features, got {vocal.shape}")
    if len(vocal) == 0:
        return np.zeros(0, dtype=np.int64)
    band = np.ascontiguousarray(vocal[:, LYRIC_BAND])
    labels, _ = kernels.rvq_assign(band, world.symbol_table)
    blank = kernels.sqnorm_rows(band) < np.float32(silence * silence)
    labels = np.where(blank, -1, labels)
    keep = np.ones(len(labels), dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    collapsed = labels[keep]
    return collapsed[collapsed >= 0].astype(np.int64)


def pooled_accomp(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise CorpusError("style similarity needs a non-empty (T, D) feature sequence")
    return features[:, ACCOMP_START:].mean(axis=0)


def style_similarity_oracle(features: np.ndarray, target, world: SongWorld | None = None) -> float:
    """Cosine between pooled accompaniment-band means, mapped to [0, 1].

    ``target`` is a style (id or :class:`StyleTag`) or reference features.
    """
    world = world or get_world()
    a = pooled_accomp(features)
    if isinstance(target, (int, np.integer, StyleTag)):
        b = world.style_descriptor(target)
    else:
        b = pooled_accomp(target)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.5
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return 0.5 * (cos + 1.0)


def melody_smoothness(vocal: np.ndarray) -> float:
    pitch = np.asarray(vocal, dtype=np.float64)[:, PITCH_DIM]
    if len(pitch) < 2:
        return 0.0
    return -float(np.mean(np.diff(pitch) ** 2))


def musicality_oracle(tracks, seed: int, noise_std: float = 0.0) -> float:
    """Melody smoothness plus seeded observer noise; higher is better."""
    vocal = tracks.vocal if isinstance(tracks, SongTracks) else tracks
    vocal = np.asarray(vocal)
    if vocal.ndim != 2 or vocal.shape[1] <= PITCH_DIM:
        raise CorpusError("musicality oracle needs (T, D) vocal features")
    score = melody_smoothness(vocal)
    if noise_std > 0:
        score += float(make_rng(seed, "observer").normal(scale=noise_std))
    return score


def split_mixed(mixed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (vocal, accompaniment) from mixed features by band masking."""
    mixed = np.asarray(mixed, dtype=np.float32)
    vocal = np.zeros_like(mixed)
    accomp = np.zeros_like(mixed)
    vocal[:, :ACCOMP_START] = mixed[:, :ACCOMP_START] / np.float32(VOCAL_GAIN)
    accomp[:, ACCOMP_START:] = mixed[:, ACCOMP_START:] / np.float32(ACCOMP_GAIN)
    return vocal, accomp
