"""Residual vector quantization with a pinned zero codeword.

Entry 0 of every codebook is the zero vector and is never updated. Because
the nearest-codeword search always has the option of subtracting nothing, a
frame's residual norm can never grow from one stage to the next.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics.checkpoint import load_tensors, save_tensors
from .numerics.rng import derive_seed, make_rng

TRACKS = ("mixed", "vocal", "accomp")


class RvqError(ValueError):
    pass


@dataclass
class Codebook:
    stage: int
    entries: np.ndarray
    cluster_size: np.ndarray = None
    embed_sum: np.ndarray = None

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float32)
        k = self.entries.shape[0]
        if k < 2:
            raise RvqError("a codebook needs at least 2 entries")
        if np.any(self.entries[0] != 0):
            raise RvqError("entry 0 must be the zero vector")
        if not np.all(np.isfinite(self.entries)):
            raise RvqError("codebook entries must be finite")
        if self.cluster_size is None:
            self.cluster_size = np.ones(k, dtype=np.float64)
        if self.embed_sum is None:
            self.embed_sum = self.entries.astype(np.float64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class TokenStreams:
    mixed: np.ndarray
    vocal: np.ndarray | None = None
    accomp: np.ndarray | None = None
    k_m: int = 64
    k_v: int = 64
    k_a: int = 64

    def __post_init__(self):
        self.mixed = np.asarray(self.mixed, dtype=np.int64)
        if self.vocal is not None:
            self.vocal = np.asarray(self.vocal, dtype=np.int64)
            self.accomp = np.asarray(self.accomp, dtype=np.int64)
            if not (len(self.vocal) == len(self.accomp) == len(self.mixed)):
                raise RvqError("token streams must share one length")

    def __len__(self):
        return len(self.mixed)

    @property
    def dual(self) -> bool:
        return self.vocal is not None

    def validate(self) -> None:
        for name, seq, k in (("mixed", self.mixed, self.k_m), ("vocal", self.vocal, self.k_v),
                             ("accomp", self.accomp, self.k_a)):
            if seq is not None and len(seq) and (seq.min() < 0 or seq.max() >= k):
                raise RvqError(f"{name} token out of range [0, {k})")

    def to_json(self) -> dict:
        out = {"mixed": self.mixed.tolist()}
        if self.dual:
            out["vocal"] = self.vocal.tolist()
            out["accomp"] = self.accomp.tolist()
        return out

    @classmethod
    def from_json(cls, rec: dict, k_m=64, k_v=64, k_a=64) -> "TokenStreams":
        return cls(rec["mixed"], rec.get("vocal"), rec.get("accomp"), k_m, k_v, k_a)


def _assign_fast(x: np.ndarray, entries: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ entries.T) + (entries * entries).sum(1)[None, :]
    return np.argmin(d, axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    entries = np.zeros((k, x.shape[1]), dtype=np.float32)
    best = (x.astype(np.float64) ** 2).sum(1)
    for j in range(1, k):
        total = best.sum()
        if total > 0:
            pick = int(rng.choice(len(x), p=best / total))
        else:
            pick = int(rng.integers(len(x)))
        entries[j] = x[pick]
        best = np.minimum(best, ((x - entries[j]).astype(np.float64) ** 2).sum(1))
    return entries


def fit_codebooks(features: np.ndarray, stages: int, k: int, iters: int = 20, seed: int = 0,
                  decay: float = 0.99, batch: int = 512, max_samples: int = 20000) -> list[Codebook]:
    """Fit ``stages`` codebooks of ``k`` entries, stage s on the residuals of stages < s.

    Each stage is seeded with k-means++ and refined by EMA k-means. Entries
    unused for a whole pass are reseeded from random residuals.
    """
    x = np.ascontiguousarray(np.asarray(features, dtype=np.float32).reshape(-1, np.shape(features)[-1]))
    if stages < 1:
        raise RvqError("stages must be >= 1")
    if len(x) < k:
        raise RvqError(f"need at least K={k} samples, got {len(x)}")
    rng = make_rng(seed, "rvq-fit")
    if len(x) > max_samples:
        x = x[np.sort(rng.choice(len(x), size=max_samples, replace=False))]
    books: list[Codebook] = []
    residual = x.copy()
    for s in range(stages):
        entries = _kmeans_pp(residual, k, rng)
        cs = np.ones(k, dtype=np.float64)
        es = entries.astype(np.float64)
        for _ in range(iters):
            usage = np.zeros(k, dtype=np.float64)
            order = rng.permutation(len(residual))
            for start in range(0, len(order), batch):
                xb = residual[order[start : start + batch]]
                idx = _assign_fast(xb, entries)
                counts = np.bincount(idx, minlength=k).astype(np.float64)
                sums = np.zeros((k, x.shape[1]), dtype=np.float64)
                np.add.at(sums, idx, xb)
                usage += counts
                cs = decay * cs + (1 - decay) * counts
                es = decay * es + (1 - decay) * sums
                entries[1:] = (es[1:] / np.maximum(cs[1:], 1e-12)[:, None]).astype(np.float32)
            dead = np.flatnonzero(usage[1:] < 1) + 1
            if len(dead):
                picks = rng.choice(len(residual), size=len(dead), replace=len(dead) > len(residual))
                entries[dead] = residual[picks]
                cs[dead] = 1.0
                es[dead] = entries[dead]
        entries[0] = 0.0
        book = Codebook(s, entries, cs, es)
        books.append(book)
        _, residual = kernels.rvq_assign(residual, book.entries)
    return books


def encode(features: np.ndarray, codebooks: list[Codebook], return_residual: bool = False):
    """Per-stage nearest-codeword indices, shape (stages, T)."""
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != codebooks[0].dim:
        raise RvqError(f"expected (T, {codebooks[0].dim}) features, got {x.shape}")
    residual = np.ascontiguousarray(x)
    out = np.empty((len(codebooks), len(x)), dtype=np.int64)
    for s, book in enumerate(codebooks):
        out[s], residual = kernels.rvq_assign(residual, book.entries)
    if return_residual:
        return out, residual
    return out


def residual_sqnorms(features: np.ndarray, codebooks: list[Codebook]) -> np.ndarray:
    """Squared residual norms, shape (stages + 1, T); row 0 is the input itself."""
    residual = np.ascontiguousarray(features, dtype=np.float32)
    rows = [kernels.sqnorm_rows(residual)]
    for book in codebooks:
        _, residual = kernels.rvq_assign(residual, book.entries)
        rows.append(kernels.sqnorm_rows(residual))
    return np.stack(rows)


def decode(indices: np.ndarray, codebooks: list[Codebook]) -> np.ndarray:
    """Sum of the selected codewords over stages (fewer index rows use fewer stages)."""
    idx = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    if len(idx) > len(codebooks):
        raise RvqError(f"{len(idx)} index rows for {len(codebooks)} stages")
    out = np.zeros((idx.shape[1], codebooks[0].dim), dtype=np.float32)
    for s, row in enumerate(idx):
        if len(row) and (row.min() < 0 or row.max() >= codebooks[s].size):
            raise RvqError(f"stage {s} index out of range [0, {codebooks[s].size})")
        out = out + codebooks[s].entries[row]
    return out


@dataclass
class RvqCodec:
    """Mixed-track and/or dual-track codebooks."""

    books: dict = field(default_factory=dict)
    frame_rate: float = 25.0

    @property
    def mode(self) -> str:
        return "dual-track" if "vocal" in self.books else "mixed"

    def vocab(self, track: str) -> int:
        return self.books[track][0].size

    @classmethod
    def fit(cls, songs, stages: int = 1, k: int = 64, iters: int = 20, seed: int = 0,
            tracks=TRACKS, max_samples: int = 20000) -> "RvqCodec":
        attr = {"mixed": "mixed", "vocal": "vocal", "accomp": "accompaniment"}
        books = {}
        for track in tracks:
            feats = np.concatenate([getattr(s.tracks, attr[track]) for s in songs])
            books[track] = fit_codebooks(feats, stages, k, iters, seed=derive_seed(seed, "rvq", track),
                                         max_samples=max_samples)
        return cls(books)

    def encode_track(self, track: str, features: np.ndarray, stages: int | None = None) -> np.ndarray:
        books = self.books[track][: stages or len(self.books[track])]
        return encode(features, books)

    def decode_track(self, track: str, indices: np.ndarray) -> np.ndarray:
        return decode(indices, self.books[track])

    def token_streams(self, tracks) -> TokenStreams:
        """Stage-0 tokens of the mixed track and, when available, both separate tracks."""
        mixed = self.encode_track("mixed", tracks.mixed, 1)[0]
        vocal = accomp = None
        if "vocal" in self.books:
            vocal = self.encode_track("vocal", tracks.vocal, 1)[0]
            accomp = self.encode_track("accomp", tracks.accompaniment, 1)[0]
        k_v = self.vocab("vocal") if vocal is not None else 0
        k_a = self.vocab("accomp") if accomp is not None else 0
        return TokenStreams(mixed, vocal, accomp, self.vocab("mixed"), k_v, k_a)

    def decode_streams(self, streams: TokenStreams):
        """Decoded (vocal, accompaniment, mixed) features of stage-0 token streams."""
        mixed = self.decode_track("mixed", streams.mixed[None])
        if streams.dual:
            vocal = self.decode_track("vocal", streams.vocal[None])
            accomp = self.decode_track("accomp", streams.accomp[None])
            return vocal, accomp, np.float32(0.5) * vocal + np.float32(0.5) * accomp
        return None, None, mixed

    def tensors(self) -> dict:
        return {f"rvq.{track}.{b.stage}": b.entries for track, books in self.books.items() for b in books}

    def save(self, path) -> None:
        save_tensors(self.tensors(), path)

    @classmethod
    def load(cls, path) -> "RvqCodec":
        books: dict = {}
        for name, arr in load_tensors(path).items():
            _, track, stage = name.split(".")
            books.setdefault(track, []).append(Codebook(int(stage), arr))
        for track in books:
            books[track].sort(key=lambda b: b.stage)
        return cls(books)

