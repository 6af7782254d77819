"""Stage 1 (LM pre-training), stage 2 (AR decoder) and joint training.

Freezing is enforced through the parameter store: frozen tensors never enter
the autodiff graph and the optimizer skips them, so their bytes cannot change.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import Conditions
from .lelm import LeLM, build_prefix, ce_loss, dec_forward, lm_forward_batch, make_lm_batch, shift_right
from .numerics import tensor as tn
from .numerics.optim import AdamState, adam_step, noam_lr
from .numerics.rng import make_rng
from .rvq import TokenStreams

log = logging.getLogger(__name__)

STAGE_FROZEN = {"1": ("dec.*", "heads.*"), "2": ("lm.*",), "joint": ()}


class TrainError(ValueError):
    pass


@dataclass
class Example:
    conditions: Conditions
    streams: TokenStreams


@dataclass(frozen=True)
class StageConfig:
    stage: str = "1"
    steps: int = 2000
    batch_size: int = 8
    warmup: int = 200
    seed: int = 0
    dropout: float = 0.5
    lr_scale: float = 1.0
    clip_norm: float | None = None

    def __post_init__(self):
        if str(self.stage) not in STAGE_FROZEN:
            raise TrainError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.dropout <= 1.0:
            raise TrainError("dropout must lie in [0, 1]")
        if self.steps < 1:
            raise TrainError("steps must be >= 1")


class MetricsWriter:
    """Appends ``{step, stage, loss, lr, seed}`` records as JSON lines."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


class BatchSampler:
    """Epoch-wise shuffled batches with per-sample condition dropout.

    Dropout flags are drawn once per sample per epoch from a seeded stream, so
    every batch is reproducible from (seed, step).
    """

    def __init__(self, n: int, cfg: StageConfig):
        self.n = n
        self.cfg = cfg
        self._epoch = -1
        self._order = self._flags = None

    def _load_epoch(self, epoch: int):
        if epoch != self._epoch:
            self._order = make_rng(self.cfg.seed, "order", self.cfg.stage, epoch).permutation(self.n)
            u = make_rng(self.cfg.seed, "dropout", self.cfg.stage, epoch).random((self.n, 2))
            self._flags = u < self.cfg.dropout
            self._epoch = epoch

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Sample indices and (drop_style, drop_audio) flags for a 1-based step."""
        bs = min(self.cfg.batch_size, self.n)
        per_epoch = max(self.n // bs, 1)
        epoch, slot = divmod(step - 1, per_epoch)
        self._load_epoch(epoch)
        idx = self._order[slot * bs : (slot + 1) * bs]
        return idx, self._flags[idx]


def batch_prefixes(model: LeLM, dataset, idx, flags):
    return [build_prefix(dataset[i].conditions, bool(f[0]), bool(f[1]), model.cfg) for i, f in zip(idx, flags)]


def _stack(dataset, idx, attr):
    return np.stack([getattr(dataset[i].streams, attr) for i in idx])


def stage1_loss(model: LeLM, dataset, idx, flags):
    batch = make_lm_batch(model.cfg, batch_prefixes(model, dataset, idx, flags), _stack(dataset, idx, "mixed"))
    out = lm_forward_batch(model, batch)
    return ce_loss(out.logits, _stack(dataset, idx, "mixed"))


def dual_loss(model: LeLM, dataset, idx, flags, with_mixed: bool):
    cfg = model.cfg
    mixed = _stack(dataset, idx, "mixed")
    vocal = _stack(dataset, idx, "vocal")
    accomp = _stack(dataset, idx, "accomp")
    batch = make_lm_batch(cfg, batch_prefixes(model, dataset, idx, flags), mixed)
    if with_mixed:
        out = lm_forward_batch(model, batch)
        hidden = out.mixed_hidden()
    else:
        with tn.no_grad():
            out = lm_forward_batch(model, batch)
        hidden = tn.Tensor(out.mixed_hidden().data)
    lv, la = dec_forward(model, hidden, shift_right(vocal, cfg.k_v), shift_right(accomp, cfg.k_a))
    loss = ce_loss(lv, vocal) + ce_loss(la, accomp)
    if with_mixed:
        loss = loss + ce_loss(out.logits, mixed)
    return loss


def _train(model: LeLM, dataset, cfg: StageConfig, loss_fn: Callable, d_model: int,
           metrics: Callable | None) -> list[float]:
    if not dataset:
        raise TrainError("dataset is empty")
    params = model.params
    params.set_frozen(STAGE_FROZEN[str(cfg.stage)])
    sampler = BatchSampler(len(dataset), cfg)
    state = AdamState()
    losses = []
    try:
        for step in range(1, cfg.steps + 1):
            idx, flags = sampler.batch(step)
            loss = loss_fn(model, dataset, idx, flags)
            grads = tn.grad(loss, params)
            lr = noam_lr(step, d_model, cfg.warmup, cfg.lr_scale)
            adam_step(params, grads, state, lr, cfg.clip_norm)
            value = float(loss.data)
            losses.append(value)
            if metrics is not None:
                metrics({"step": step, "stage": str(cfg.stage), "loss": value, "lr": lr, "seed": cfg.seed})
            if step % 100 == 0:
                log.info("stage %s step %d loss %.4f", cfg.stage, step, value)
    finally:
        params.unfreeze_all()
    return losses


def train_stage1(model: LeLM, dataset, cfg: StageConfig, metrics=None):
    """Update lm.* on the mixed-token loss; dec.* and heads.* stay frozen."""
    if str(cfg.stage) != "1":
        raise TrainError("train_stage1 needs a stage-1 config")
    losses = _train(model, dataset, cfg, stage1_loss, model.cfg.lm_dim, metrics)
    model.meta["stage"] = 1
    return model, losses


def _require_dual(dataset):
    if not dataset:
        raise TrainError("dataset is empty")
    if any(not ex.streams.dual for ex in dataset):
        raise TrainError("dataset lacks dual-track tokens")


def train_stage2(model: LeLM, dataset, cfg: StageConfig, metrics=None):
    """Update dec.* and heads.* on the summed vocal + accompaniment loss; lm.* stays frozen."""
    if str(cfg.stage) != "2":
        raise TrainError("train_stage2 needs a stage-2 config")
    _require_dual(dataset)
    losses = _train(model, dataset, cfg, lambda *a: dual_loss(*a, with_mixed=False), model.cfg.dec_dim, metrics)
    model.meta["stage"] = 2
    return model, losses


def train_joint(model: LeLM, dataset, cfg: StageConfig, metrics=None):
    """All parameters against mixed + vocal + accompaniment losses (ablation only)."""
    if str(cfg.stage) != "joint":
        raise TrainError("train_joint needs a joint config")
    _require_dual(dataset)
    losses = _train(model, dataset, cfg, lambda *a: dual_loss(*a, with_mixed=True), model.cfg.lm_dim, metrics)
    model.meta["stage"] = 2
    model.meta["joint"] = True
    return model, losses


def dual_accuracy(model: LeLM, dataset, batch_size: int = 16) -> tuple[float, float]:
    """Teacher-forced next-token accuracy of the vocal and accompaniment heads."""
    _require_dual(dataset)
    cfg = model.cfg
    hit_v = hit_a = total = 0
    with tn.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            flags = np.zeros((len(idx), 2), dtype=bool)
            mixed = _stack(dataset, idx, "mixed")
            vocal = _stack(dataset, idx, "vocal")
            accomp = _stack(dataset, idx, "accomp")
            out = lm_forward_batch(model, make_lm_batch(cfg, batch_prefixes(model, dataset, idx, flags), mixed))
            lv, la = dec_forward(model, out.mixed_hidden(), shift_right(vocal, cfg.k_v), shift_right(accomp, cfg.k_a))
            hit_v += int((lv.data.argmax(-1) == vocal).sum())
            hit_a += int((la.data.argmax(-1) == accomp).sum())
            total += vocal.size
    return hit_v / total, hit_a / total


def mixed_loss(model: LeLM, dataset, batch_size: int = 16) -> float:
    """Mean mixed-token cross-entropy with all available conditions."""
    vals = []
    weights = []
    with tn.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            loss = stage1_loss(model, dataset, idx, np.zeros((len(idx), 2), dtype=bool))
            vals.append(float(loss.data))
            weights.append(len(idx))
    return float(np.average(vals, weights=weights))


def build_examples(songs, codec, prompt_frames: int = 16) -> list[Example]:
    """Tokenize songs; audio prompts are the leading mixed tokens of the referenced song."""
    streams = [codec.token_streams(s.tracks) for s in songs]
    by_index = {s.index: st for s, st in zip(songs, streams)}
    out = []
    for song, st in zip(songs, streams):
        cond = song.conditions
        prompt = None
        if cond.prompt_ref is not None:
            ref = by_index.get(cond.prompt_ref)
            if ref is None:
                raise TrainError(f"prompt reference {cond.prompt_ref} is not in the song set")
            prompt = ref.mixed[:prompt_frames].copy()
        out.append(Example(Conditions(cond.lyrics, cond.style, cond.prompt_ref, prompt), st))
    return out
