"""Sampling: the LM decodes mixed tokens while the AR decoder trails k steps behind.

Inference runs on plain float32 arrays through :mod:`songlm.kernels`. Every
kernel reduces each row in a fixed order, so the incremental (KV-cached) path
and the full-recompute path produce bit-identical hidden states.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .lelm import SEG_MIXED, LeLM, ModelError, build_prefix, make_lm_batch
from .numerics.rng import make_rng
from .rvq import TokenStreams


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    k: int | None = None  # None picks default_k(vocab)
    temperature: float = 0.9
    seed: int = 0
    max_frames: int = 128
    cache: bool = True

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise GenerationError("top-k needs k >= 1")
        if not self.temperature > 0:
            raise GenerationError("temperature must be positive")
        if self.max_frames < 1:
            raise GenerationError("max_frames must be >= 1")


def default_k(vocab: int) -> int:
    """50 for large vocabularies; 8 for desk-scale ones where 50 would be near-uniform."""
    return 50 if vocab >= 512 else 8


def top_k_sample(logits, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Keep the k largest logits (ties to the lowest index), apply temperature, sample."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or len(z) == 0:
        raise GenerationError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise GenerationError("logits must be finite")
    k = min(default_k(len(z)), len(z)) if cfg.k is None else cfg.k
    if not 1 <= k <= len(z):
        raise GenerationError(f"k={k} outside [1, {len(z)}]")
    order = np.argsort(-z, kind="stable")[:k]
    if k == 1:
        return int(order[0])
    s = z[order] / cfg.temperature
    p = np.exp(s - s[0])
    c = np.cumsum(p)
    pick = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return int(order[min(pick, k - 1)])


# --- inference stacks ----------------------------------------------------------

class _Stack:
    """Pre-LN causal transformer stack over float32 arrays.

    ``step`` consumes one position for every row of the batch. With
    ``cache=True`` keys and values are kept; otherwise the whole history is
    recomputed from scratch at every call.
    """

    def __init__(self, params: dict, prefix: str, layers: int, heads: int, batch: int, capacity: int,
                 cache: bool):
        self.w = params
        self.prefix = prefix
        self.layers = layers
        self.heads = heads
        self.batch = batch
        self.capacity = capacity
        self.cache = cache
        self.n = 0
        self.valid = np.zeros((batch, capacity), dtype=bool)
        self.inputs = []
        if cache and layers:
            dim = params[f"{prefix}.block0.ln1.g"].shape[0]
            shape = (layers, batch * heads, capacity, dim // heads)
            self.keys = np.zeros(shape, dtype=np.float32)
            self.values = np.zeros(shape, dtype=np.float32)

    def _qkv(self, i: int, x: np.ndarray):
        w, p = self.w, f"{self.prefix}.block{i}"
        h = kernels.layer_norm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        return tuple(kernels.matmul(h, w[f"{p}.attn.{n}.w"]) + w[f"{p}.attn.{n}.b"] for n in "qkv")

    def _finish(self, i: int, x: np.ndarray, att: np.ndarray) -> np.ndarray:
        w, p = self.w, f"{self.prefix}.block{i}"
        x = x + (kernels.matmul(att, w[f"{p}.attn.out.w"]) + w[f"{p}.attn.out.b"])
        h = kernels.layer_norm(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
        h = kernels.gelu(kernels.matmul(h, w[f"{p}.ffn.up.w"]) + w[f"{p}.ffn.up.b"])
        return x + (kernels.matmul(h, w[f"{p}.ffn.down.w"]) + w[f"{p}.ffn.down.b"])

    def step(self, x: np.ndarray, valid: np.ndarray) -> np.ndarray:
        if self.n >= self.capacity:
            raise GenerationError("context overflow")
        self.valid[:, self.n] = valid
        self.n += 1
        if self.cache:
            return self._step_cached(np.ascontiguousarray(x, dtype=np.float32))
        self.inputs.append(np.asarray(x, dtype=np.float32))
        return self._recompute()

    def _step_cached(self, x: np.ndarray) -> np.ndarray:
        b, d = x.shape
        hd, pos = self.heads, self.n - 1
        dh = d // hd
        keymask = np.repeat(self.valid, hd, axis=0).astype(np.uint8)
        keymask[:, pos] = 1
        for i in range(self.layers):
            q, k, v = self._qkv(i, x)
            self.keys[i, :, pos] = k.reshape(b * hd, dh)
            self.values[i, :, pos] = v.reshape(b * hd, dh)
            att = kernels.attend(q.reshape(b * hd, dh), self.keys[i], self.values[i], keymask, dh ** -0.5)
            x = self._finish(i, x, att.reshape(b, d))
        return x

    def _recompute(self) -> np.ndarray:
        n, hd = self.n, self.heads
        x = np.stack(self.inputs, axis=1)  # (B, n, d)
        b, _, d = x.shape
        dh = d // hd
        rows = x.reshape(b * n, d)
        valid = self.valid[:, :n]
        allowed = np.tril(np.ones((n, n), dtype=bool))[None] & valid[:, None, :]
        allowed |= np.eye(n, dtype=bool)[None]
        keymask = np.broadcast_to(allowed[:, None], (b, hd, n, n)).reshape(b * hd * n, n).astype(np.uint8)
        for i in range(self.layers):
            q, k, v = self._qkv(i, rows)
            q = q.reshape(b, n, hd, dh).transpose(0, 2, 1, 3).reshape(b * hd * n, dh)
            k = k.reshape(b, n, hd, dh).transpose(0, 2, 1, 3)
            v = v.reshape(b, n, hd, dh).transpose(0, 2, 1, 3)
            kk = np.broadcast_to(k[:, :, None], (b, hd, n, n, dh)).reshape(b * hd * n, n, dh)
            vv = np.broadcast_to(v[:, :, None], (b, hd, n, n, dh)).reshape(b * hd * n, n, dh)
            att = kernels.attend(q, kk, vv, keymask, dh ** -0.5)
            att = att.reshape(b, hd, n, dh).transpose(0, 2, 1, 3).reshape(b * n, d)
            rows = self._finish(i, rows, att)
        return rows.reshape(b, n, d)[:, -1]


def _arrays(model: LeLM) -> dict:
    return {name: np.ascontiguousarray(t.data, dtype=np.float32) for name, t in model.params.items()}


# --- generation ------------------------------------------------------------------

@dataclass
class AccessRecord:
    sample: int
    step: int        # decoder step t
    position: int    # mixed position whose hidden state was read
    available: int   # mixed tokens decoded for that sample at the time


def sample_rngs(seed: int, sample_seeds, stream: str):
    return [make_rng(seed, "generate", int(s), stream) for s in sample_seeds]


def generate_batch(model: LeLM, conds, cfg: SamplerConfig, sample_seeds=None, dual: bool = True,
                   access_log: list | None = None) -> list[TokenStreams]:
    """Generate one song per condition; row i is bit-identical to generating it alone.

    ``sample_seeds`` (default ``0..B-1``) pick the per-sample random streams.
    A sampled EOS ends that sample's mixed stream; its dual-track streams are
    truncated to the same length.
    """
    mcfg = model.cfg
    conds = list(conds)
    if not conds:
        return []
    b = len(conds)
    sample_seeds = list(range(b)) if sample_seeds is None else list(sample_seeds)
    if len(sample_seeds) != b:
        raise GenerationError("one sample seed per condition expected")
    frames = cfg.max_frames
    if dual and frames > mcfg.max_frames:
        raise GenerationError(f"{frames} frames exceed the decoder's {mcfg.max_frames}")
    try:
        prefixes = [build_prefix(c, False, False, mcfg) for c in conds]
        batch = make_lm_batch(mcfg, prefixes, np.zeros((b, frames), dtype=np.int64))
    except ModelError as exc:
        raise GenerationError(str(exc)) from exc
    w = _arrays(model)
    table = np.concatenate([w["lm.emb.special"], w["lm.emb.lyric"], w["lm.emb.style"], w["lm.emb.mixed"]])
    plen = batch.prefix_len
    lm = _Stack(w, "lm", mcfg.lm_layers, mcfg.lm_heads, b, plen + frames, cfg.cache)
    dec = _Stack(w, "dec", mcfg.dec_layers, mcfg.dec_heads, b, frames, cfg.cache) if dual else None

    def lm_feed(pos: int, ids: np.ndarray, segs: np.ndarray, positions: np.ndarray, valid: np.ndarray):
        x = table[ids] + w["lm.emb.segment"][segs]
        x = x + w["lm.pos"][positions]
        h = lm.step(x, valid)
        return kernels.layer_norm(h, w["lm.ln_f.g"], w["lm.ln_f.b"])

    hidden = None
    for pos in range(plen):
        hidden = lm_feed(pos, batch.ids[:, pos], batch.segments[:, pos], batch.positions[:, pos],
                         batch.key_valid[:, pos])

    rng_m = sample_rngs(cfg.seed, sample_seeds, "mixed")
    rng_v = sample_rngs(cfg.seed, sample_seeds, "vocal")
    rng_a = sample_rngs(cfg.seed, sample_seeds, "accomp")
    delay = mcfg.delay
    eos = mcfg.eos_id
    mixed = np.zeros((b, frames), dtype=np.int64)
    vocal = np.zeros((b, frames), dtype=np.int64)
    accomp = np.zeros((b, frames), dtype=np.int64)
    lengths = np.full(b, -1, dtype=np.int64)  # -1 while still decoding
    hist = np.zeros((b, frames, mcfg.lm_dim), dtype=np.float32)
    decoded = 0  # mixed positions with a stored hidden state
    next_t = 0

    def dec_step(t: int):
        rows = np.empty((b, mcfg.lm_dim), dtype=np.float32)
        for i in range(b):
            if lengths[i] >= 0:
                pos, available = min(t + delay, lengths[i] - 1), lengths[i]
            else:
                pos, available = min(t + delay, frames - 1), decoded
            if pos >= available:
                raise GenerationError(f"decoder step {t} would read undecoded mixed position {pos}")
            if access_log is not None:
                access_log.append(AccessRecord(int(sample_seeds[i]), t, int(pos), int(available)))
            rows[i] = hist[i, pos]
        prev_v = vocal[:, t - 1] if t else np.full(b, mcfg.k_v)
        prev_a = accomp[:, t - 1] if t else np.full(b, mcfg.k_a)
        x = np.concatenate([w["dec.emb.vocal"][prev_v], w["dec.emb.accomp"][prev_a], rows], axis=1)
        x = kernels.matmul(x, w["dec.fuse.w"]) + w["dec.fuse.b"]
        x = x + w["dec.pos"][t]
        x = dec.step(x, np.ones(b, dtype=bool))
        x = kernels.layer_norm(x, w["dec.ln_f.g"], w["dec.ln_f.b"])
        lv = kernels.matmul(x, w["heads.vocal.0.w"]) + w["heads.vocal.0.b"]
        la = kernels.matmul(x, w["heads.accomp.0.w"]) + w["heads.accomp.0.b"]
        for i in range(b):
            vocal[i, t] = top_k_sample(lv[i], cfg, rng_v[i])
            accomp[i, t] = top_k_sample(la[i], cfg, rng_a[i])

    off = mcfg.offsets["mixed"]
    for j in range(frames):
        logits = kernels.matmul(hidden, w["lm.head.mixed.w"]) + w["lm.head.mixed.b"]
        for i in range(b):
            if lengths[i] >= 0:
                mixed[i, j] = 0
                continue
            tok = top_k_sample(logits[i], cfg, rng_m[i])
            if tok == eos:
                if j == 0:
                    raise GenerationError(f"sample {sample_seeds[i]} produced EOS before any frame")
                lengths[i] = j
                tok = 0
            mixed[i, j] = tok
        if np.all(lengths >= 0):
            break
        positions = batch.positions[:, plen - 1] + 1 + j
        hidden = lm_feed(plen + j, off + mixed[:, j], np.full(b, SEG_MIXED), positions, np.ones(b, dtype=bool))
        hist[:, j] = hidden
        decoded = j + 1
        if dual and j - delay >= 0:
            dec_step(j - delay)
            next_t = j - delay + 1
    lengths[lengths < 0] = decoded
    if dual:
        for t in range(next_t, int(lengths.max())):
            dec_step(t)

    out = []
    for i in range(b):
        n = int(lengths[i])
        if dual:
            out.append(TokenStreams(mixed[i, :n].copy(), vocal[i, :n].copy(), accomp[i, :n].copy(),
                                    mcfg.k_m - 1, mcfg.k_v, mcfg.k_a))
        else:
            out.append(TokenStreams(mixed[i, :n].copy(), k_m=mcfg.k_m - 1))
    return out


def generate(model: LeLM, cond, cfg: SamplerConfig, dual: bool = True, access_log: list | None = None) -> TokenStreams:
    """Single-condition generation; the sample's random streams come from ``cfg.seed``."""
    return generate_batch(model, [cond], cfg, [0], dual, access_log)[0]


def generate_many(model: LeLM, conds, cfg: SamplerConfig, sample_seeds=None, dual: bool = True,
                  chunk: int = 64) -> list[TokenStreams]:
    """``generate_batch`` in chunks to bound memory; results do not depend on ``chunk``."""
    conds = list(conds)
    sample_seeds = list(range(len(conds))) if sample_seeds is None else list(sample_seeds)
    out = []
    for start in range(0, len(conds), chunk):
        out.extend(generate_batch(model, conds[start : start + chunk], cfg,
                                  sample_seeds[start : start + chunk], dual))
    return out
