"""Language model over mixed tokens plus a delayed dual-track AR decoder.

The LM reads ``[BOS][style][SEP][audio prompt][SEP][lyrics][SEP] S_m`` and
predicts each mixed token from strictly earlier positions. The AR decoder's
input at step t fuses the previous vocal and accompaniment tokens with the
LM's last-layer hidden state at mixed position ``min(t + k, T - 1)``; two head
groups then predict the vocal and accompaniment tokens of step t.

Parameter names fall into three groups: ``lm.*`` (embeddings, LM stack, the
mixed-token head), ``dec.*`` (decoder embeddings, fusion, decoder stack) and
``heads.*`` (vocal and accompaniment head groups).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Conditions
from .numerics import tensor as tn
from .numerics.params import ParamStore
from .numerics.rng import make_rng
from .numerics.tensor import Tensor

BOS, SEP, EOS, PAD = 0, 1, 2, 3
N_SPECIAL = 4
SEG_SPECIAL, SEG_STYLE, SEG_AUDIO, SEG_LYRIC, SEG_MIXED = range(5)
N_SEGMENTS = 5
IGNORE = -1
MASK_VALUE = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LeLMConfig:
    lm_layers: int = 4
    lm_dim: int = 64
    lm_heads: int = 4
    lm_ffn: int = 256
    dec_layers: int = 2
    dec_dim: int = 64
    dec_heads: int = 4
    dec_ffn: int = 256
    delay: int = 5
    v_lyric: int = 42
    v_style: int = 8
    k_m: int = 65
    k_v: int = 64
    k_a: int = 64
    max_context: int = 192
    max_frames: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        if self.dec_layers >= self.lm_layers:
            raise ModelError("the AR decoder must have fewer layers than the LM")
        for name in ("v_lyric", "v_style", "k_m", "k_v", "k_a"):
            if getattr(self, name) < 2:
                raise ModelError(f"{name} must be >= 2")
        if not 0 <= self.delay < self.max_frames:
            raise ModelError("delay must satisfy 0 <= k < max_frames")
        if self.lm_dim % self.lm_heads or self.dec_dim % self.dec_heads:
            raise ModelError("model width must be divisible by the head count")

    @property
    def eos_id(self) -> int:
        """Reserved mixed token that ends generation (last mixed id)."""
        return self.k_m - 1

    @property
    def offsets(self) -> dict:
        lyric = N_SPECIAL
        style = lyric + self.v_lyric
        mixed = style + self.v_style
        return {"special": 0, "lyric": lyric, "style": style, "mixed": mixed, "end": mixed + self.k_m}

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PrefixSequence:
    ids: np.ndarray
    segments: np.ndarray
    dropped_style: bool = False
    dropped_audio: bool = False

    def __len__(self):
        return len(self.ids)


def build_prefix(cond: Conditions, drop_style: bool, drop_audio: bool, cfg: LeLMConfig) -> PrefixSequence:
    """Token layout ``[BOS][style][SEP][audio][SEP][lyrics][SEP]``.

    A dropped or absent optional field contributes no tokens; its separator stays.
    """
    if cond.lyrics is None or len(cond.lyrics) == 0:
        raise ModelError("lyrics are required")
    off = cfg.offsets
    ids = [BOS]
    segs = [SEG_SPECIAL]
    use_style = cond.style is not None and not drop_style
    if use_style:
        if not 0 <= cond.style < cfg.v_style:
            raise ModelError(f"style id {cond.style} out of range")
        ids.append(off["style"] + int(cond.style))
        segs.append(SEG_STYLE)
    ids.append(SEP)
    segs.append(SEG_SPECIAL)
    use_audio = cond.has_audio and not drop_audio
    if use_audio:
        if cond.audio_prompt is None:
            raise ModelError("audio prompt referenced but not tokenized")
        prompt = np.asarray(cond.audio_prompt, dtype=np.int64)
        if len(prompt) and (prompt.min() < 0 or prompt.max() >= cfg.k_m):
            raise ModelError("audio prompt token out of range")
        ids.extend((off["mixed"] + prompt).tolist())
        segs.extend([SEG_AUDIO] * len(prompt))
    ids.append(SEP)
    segs.append(SEG_SPECIAL)
    lyr = cond.lyrics.symbols
    if lyr.min() < 0 or lyr.max() >= cfg.v_lyric:
        raise ModelError("lyric symbol out of range")
    ids.extend((off["lyric"] + lyr).tolist())
    segs.extend([SEG_LYRIC] * len(lyr))
    ids.append(SEP)
    segs.append(SEG_SPECIAL)
    if len(ids) >= cfg.max_context:
        raise ModelError(f"prefix of {len(ids)} tokens exceeds max context {cfg.max_context}")
    return PrefixSequence(np.array(ids, dtype=np.int64), np.array(segs, dtype=np.int64),
                          not use_style and cond.style is not None,
                          not use_audio and cond.has_audio)


def shift_right(seq: np.ndarray, bos: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    out = np.empty_like(seq)
    out[..., 0] = bos
    out[..., 1:] = seq[..., :-1]
    return out


# --- parameters ------------------------------------------------------------

def _block_params(prefix: str, dim: int, ffn: int, layers: int, rng, std: float, out: dict, dtype):
    proj_std = std / np.sqrt(2 * max(layers, 1))
    for i in range(layers):
        p = f"{prefix}.block{i}"
        out[f"{p}.ln1.g"] = np.ones(dim, dtype)
        out[f"{p}.ln1.b"] = np.zeros(dim, dtype)
        for name in ("q", "k", "v"):
            out[f"{p}.attn.{name}.w"] = rng.normal(0, std, (dim, dim)).astype(dtype)
            out[f"{p}.attn.{name}.b"] = np.zeros(dim, dtype)
        out[f"{p}.attn.out.w"] = rng.normal(0, proj_std, (dim, dim)).astype(dtype)
        out[f"{p}.attn.out.b"] = np.zeros(dim, dtype)
        out[f"{p}.ln2.g"] = np.ones(dim, dtype)
        out[f"{p}.ln2.b"] = np.zeros(dim, dtype)
        out[f"{p}.ffn.up.w"] = rng.normal(0, std, (dim, ffn)).astype(dtype)
        out[f"{p}.ffn.up.b"] = np.zeros(ffn, dtype)
        out[f"{p}.ffn.down.w"] = rng.normal(0, proj_std, (ffn, dim)).astype(dtype)
        out[f"{p}.ffn.down.b"] = np.zeros(dim, dtype)


def init_params(cfg: LeLMConfig, seed: int, dtype=np.float32) -> ParamStore:
    rng = make_rng(seed, "lelm-init")
    std = cfg.init_std
    d, dd = cfg.lm_dim, cfg.dec_dim
    p: dict = {}
    p["lm.emb.special"] = rng.normal(0, std, (N_SPECIAL, d)).astype(dtype)
    p["lm.emb.lyric"] = rng.normal(0, std, (cfg.v_lyric, d)).astype(dtype)
    p["lm.emb.style"] = rng.normal(0, std, (cfg.v_style, d)).astype(dtype)
    p["lm.emb.mixed"] = rng.normal(0, std, (cfg.k_m, d)).astype(dtype)
    p["lm.emb.segment"] = rng.normal(0, std, (N_SEGMENTS, d)).astype(dtype)
    p["lm.pos"] = rng.normal(0, std, (cfg.max_context, d)).astype(dtype)
    _block_params("lm", d, cfg.lm_ffn, cfg.lm_layers, rng, std, p, dtype)
    p["lm.ln_f.g"] = np.ones(d, dtype)
    p["lm.ln_f.b"] = np.zeros(d, dtype)
    p["lm.head.mixed.w"] = rng.normal(0, std, (d, cfg.k_m)).astype(dtype)
    p["lm.head.mixed.b"] = np.zeros(cfg.k_m, dtype)

    p["dec.emb.vocal"] = rng.normal(0, std, (cfg.k_v + 1, dd)).astype(dtype)
    p["dec.emb.accomp"] = rng.normal(0, std, (cfg.k_a + 1, dd)).astype(dtype)
    p["dec.fuse.w"] = rng.normal(0, 1.0 / np.sqrt(2 * dd + d), (2 * dd + d, dd)).astype(dtype)
    p["dec.fuse.b"] = np.zeros(dd, dtype)
    p["dec.pos"] = rng.normal(0, std, (cfg.max_frames, dd)).astype(dtype)
    _block_params("dec", dd, cfg.dec_ffn, cfg.dec_layers, rng, std, p, dtype)
    p["dec.ln_f.g"] = np.ones(dd, dtype)
    p["dec.ln_f.b"] = np.zeros(dd, dtype)
    p["heads.vocal.0.w"] = rng.normal(0, std, (dd, cfg.k_v)).astype(dtype)
    p["heads.vocal.0.b"] = np.zeros(cfg.k_v, dtype)
    p["heads.accomp.0.w"] = rng.normal(0, std, (dd, cfg.k_a)).astype(dtype)
    p["heads.accomp.0.b"] = np.zeros(cfg.k_a, dtype)
    return ParamStore(p)


def param_group(name: str) -> str:
    for group in ("lm", "dec", "heads"):
        if name.startswith(group + "."):
            return group
    raise ModelError(f"parameter {name!r} is outside lm.*/dec.*/heads.*")


@dataclass
class LeLM:
    cfg: LeLMConfig
    params: ParamStore
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: LeLMConfig, seed: int = 0, dtype=np.float32) -> "LeLM":
        return cls(cfg, init_params(cfg, seed, dtype), {"stage": 0, "init_seed": seed})

    def copy(self) -> "LeLM":
        return LeLM(self.cfg, self.params.copy(), dict(self.meta))

    def with_params(self, params: ParamStore) -> "LeLM":
        return LeLM(self.cfg, params, dict(self.meta))

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def save(self, path) -> None:
        from .numerics.checkpoint import save_checkpoint
        save_checkpoint(self.params, path)
        with open(str(path) + ".json", "w") as fh:
            json.dump({"config": self.cfg.to_json(), "meta": self.meta}, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "LeLM":
        from .numerics.checkpoint import load_checkpoint
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
        return cls(LeLMConfig(**side["config"]), load_checkpoint(path), side.get("meta", {}))


# --- batching ----------------------------------------------------------------

@dataclass
class LMBatch:
    ids: np.ndarray        # (B, P + T) unified token ids, prefixes left-padded
    segments: np.ndarray
    positions: np.ndarray
    key_valid: np.ndarray  # (B, P + T) False on padding
    prefix_len: int        # padded prefix length P
    frames: int            # T


def make_lm_batch(cfg: LeLMConfig, prefixes, mixed) -> LMBatch:
    """Left-pad prefixes to a common length and append the mixed tokens."""
    mixed = np.atleast_2d(np.asarray(mixed, dtype=np.int64))
    if len(prefixes) != len(mixed):
        raise ModelError("one prefix per mixed sequence expected")
    frames = mixed.shape[1]
    if frames and (mixed.min() < 0 or mixed.max() >= cfg.k_m):
        raise ModelError("mixed token out of range")
    plen = max(len(p) for p in prefixes)
    total = plen + frames
    if total > cfg.max_context:
        raise ModelError(f"context of {total} positions exceeds max context {cfg.max_context}")
    b = len(prefixes)
    ids = np.full((b, total), PAD, dtype=np.int64)
    segs = np.zeros((b, total), dtype=np.int64)
    valid = np.zeros((b, total), dtype=bool)
    pos = np.zeros((b, total), dtype=np.int64)
    off = cfg.offsets["mixed"]
    for i, pre in enumerate(prefixes):
        pad = plen - len(pre)
        ids[i, pad:plen] = pre.ids
        segs[i, pad:plen] = pre.segments
        ids[i, plen:] = off + mixed[i]
        segs[i, plen:] = SEG_MIXED
        valid[i, pad:] = True
        pos[i, pad:] = np.arange(total - pad)
    return LMBatch(ids, segs, pos, valid, plen, frames)


def attention_mask(key_valid: np.ndarray, dtype) -> np.ndarray:
    """Additive (B, 1, L, L) mask: causal, padding keys hidden, diagonal always visible."""
    length = key_valid.shape[1]
    causal = np.tril(np.ones((length, length), dtype=bool))
    allowed = causal[None] & key_valid[:, None, :]
    allowed |= np.eye(length, dtype=bool)[None]
    return np.where(allowed, 0.0, MASK_VALUE).astype(dtype)[:, None]


# --- forward ---------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    return x.reshape(b, length, heads, d // heads).transpose(0, 2, 1, 3)


def _block(model: LeLM, prefix: str, x: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    p = model.p
    h = tn.layer_norm(x, p(f"{prefix}.ln1.g"), p(f"{prefix}.ln1.b"))
    q = _split_heads(tn.linear(h, p(f"{prefix}.attn.q.w"), p(f"{prefix}.attn.q.b")), heads)
    k = _split_heads(tn.linear(h, p(f"{prefix}.attn.k.w"), p(f"{prefix}.attn.k.b")), heads)
    v = _split_heads(tn.linear(h, p(f"{prefix}.attn.v.w"), p(f"{prefix}.attn.v.b")), heads)
    a = tn.attention(q, k, v, mask)
    b, _, length, _ = a.shape
    a = a.transpose(0, 2, 1, 3).reshape(b, length, -1)
    x = x + tn.linear(a, p(f"{prefix}.attn.out.w"), p(f"{prefix}.attn.out.b"))
    h = tn.layer_norm(x, p(f"{prefix}.ln2.g"), p(f"{prefix}.ln2.b"))
    h = tn.gelu(tn.linear(h, p(f"{prefix}.ffn.up.w"), p(f"{prefix}.ffn.up.b")))
    return x + tn.linear(h, p(f"{prefix}.ffn.down.w"), p(f"{prefix}.ffn.down.b"))


def embed_tokens(model: LeLM, ids: np.ndarray, segments: np.ndarray, positions: np.ndarray) -> Tensor:
    p = model.p
    table = tn.concat([p("lm.emb.special"), p("lm.emb.lyric"), p("lm.emb.style"), p("lm.emb.mixed")], axis=0)
    x = tn.embedding(table, ids)
    x = x + tn.embedding(p("lm.emb.segment"), segments)
    return x + tn.embedding(p("lm.pos"), positions)


@dataclass
class LMOutput:
    hidden: Tensor       # (B, P + T, lm_dim) final-layer states (after the last norm)
    logits: Tensor       # (B, T, K_m)
    prefix_len: int

    def mixed_hidden(self) -> Tensor:
        """Hidden states at the T mixed-token positions."""
        return self.hidden[:, self.prefix_len:]


def lm_forward_batch(model: LeLM, batch: LMBatch) -> LMOutput:
    cfg = model.cfg
    x = embed_tokens(model, batch.ids, batch.segments, batch.positions)
    mask = attention_mask(batch.key_valid, x.dtype)
    for i in range(cfg.lm_layers):
        x = _block(model, f"lm.block{i}", x, mask, cfg.lm_heads)
    hidden = tn.layer_norm(x, model.p("lm.ln_f.g"), model.p("lm.ln_f.b"))
    start = batch.prefix_len - 1
    pred = hidden[:, start : start + batch.frames]
    logits = tn.linear(pred, model.p("lm.head.mixed.w"), model.p("lm.head.mixed.b"))
    return LMOutput(hidden, logits, batch.prefix_len)


def lm_forward(model: LeLM, prefix, mixed) -> tuple[Tensor, Tensor]:
    """Hidden states over ``[prefix || S_m]`` and mixed-token logits.

    A single :class:`PrefixSequence` with a 1-D token array returns unbatched
    ``(L_p + T, lm_dim)`` and ``(T, K_m)`` tensors.
    """
    single = isinstance(prefix, PrefixSequence)
    prefixes = [prefix] if single else list(prefix)
    out = lm_forward_batch(model, make_lm_batch(model.cfg, prefixes, mixed))
    if single:
        return out.hidden[0], out.logits[0]
    return out.hidden, out.logits


def delay_index(frames: int, k: int) -> np.ndarray:
    """Mixed position whose hidden state feeds decoder step t: ``min(t + k, T - 1)``."""
    return np.minimum(np.arange(frames) + k, frames - 1)


def dec_forward(model: LeLM, hidden, prev_v, prev_a, k: int | None = None,
                lengths=None) -> tuple[Tensor, Tensor]:
    """Vocal and accompaniment logits from mixed-position hidden states.

    ``hidden`` covers the T mixed positions, shape (B, T, lm_dim) or (T, lm_dim);
    ``prev_v``/``prev_a`` are the streams shifted right with BOS (= K) at t=0.
    ``lengths`` gives per-row true lengths of right-padded batches, so the
    clamp reads ``h[min(t + k, L_i - 1)]``.
    """
    cfg = model.cfg
    k = cfg.delay if k is None else k
    if not isinstance(hidden, Tensor):
        hidden = Tensor(hidden)
    single = hidden.ndim == 2
    if single:
        hidden = hidden.reshape(1, *hidden.shape)
    prev_v = np.atleast_2d(np.asarray(prev_v, dtype=np.int64))
    prev_a = np.atleast_2d(np.asarray(prev_a, dtype=np.int64))
    b, frames, _ = hidden.shape
    if prev_v.shape != (b, frames) or prev_a.shape != (b, frames):
        raise ModelError("previous-token streams must match the hidden length")
    if lengths is None and k >= frames:
        raise ModelError(f"delay k={k} must be smaller than T={frames}")
    if frames > cfg.max_frames:
        raise ModelError(f"T={frames} exceeds max_frames={cfg.max_frames}")
    p = model.p
    if lengths is None:
        hsel = hidden[:, delay_index(frames, k)]
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (b,) or lengths.min() < 1 or lengths.max() > frames:
            raise ModelError("lengths must lie in [1, T], one per row")
        idx = np.minimum(np.arange(frames)[None] + k, lengths[:, None] - 1)
        hsel = hidden[np.arange(b)[:, None], idx]
    x = tn.concat([tn.embedding(p("dec.emb.vocal"), prev_v), tn.embedding(p("dec.emb.accomp"), prev_a), hsel],
                  axis=-1)
    x = tn.linear(x, p("dec.fuse.w"), p("dec.fuse.b"))
    x = x + tn.embedding(p("dec.pos"), np.arange(frames))
    mask = attention_mask(np.ones((b, frames), dtype=bool), x.dtype)
    for i in range(cfg.dec_layers):
        x = _block(model, f"dec.block{i}", x, mask, cfg.dec_heads)
    x = tn.layer_norm(x, p("dec.ln_f.g"), p("dec.ln_f.b"))
    lv = tn.linear(x, p("heads.vocal.0.w"), p("heads.vocal.0.b"))
    la = tn.linear(x, p("heads.accomp.0.w"), p("heads.accomp.0.b"))
    if single:
        return lv[0], la[0]
    return lv, la


def ce_loss(logits: Tensor, targets: np.ndarray, ignore: int = IGNORE) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ModelError(f"logits {logits.shape} do not match targets {targets.shape}")
    valid = targets != ignore
    n = int(valid.sum())
    if n == 0:
        raise ModelError("every target position is padding")
    lp = tn.token_logprobs(logits, np.where(valid, targets, -1))
    return -lp.sum() * (1.0 / n)
