"""Preference fine-tuning of the whole model against a frozen reference."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..lelm import LeLM, ModelError, build_prefix, dec_forward, lm_forward_batch, make_lm_batch, shift_right
from ..numerics import tensor as tn
from ..numerics.optim import AdamState, adam_step
from ..numerics.rng import make_rng

log = logging.getLogger(__name__)


class DPOError(ValueError):
    pass


def _pad(seqs, fill):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def batch_seq_logprobs(model: LeLM, conds, streams_list, length_normalize: bool = False) -> tn.Tensor:
    """Teacher-forced completion log-likelihood per row, shape (B,).

    Sums mixed-token log-probabilities under the LM and, for dual-track
    streams, vocal and accompaniment log-probabilities under the AR decoder.
    Condition tokens are context only.
    """
    cfg = model.cfg
    if any(len(s) == 0 for s in streams_list):
        raise DPOError("empty token streams")
    dual = streams_list[0].dual
    if any(s.dual != dual for s in streams_list):
        raise DPOError("cannot mix dual-track and mixed-only streams in one batch")
    try:
        prefixes = [build_prefix(c, False, False, cfg) for c in conds]
        mixed, lengths = _pad([s.mixed for s in streams_list], 0)
        batch = make_lm_batch(cfg, prefixes, mixed)
    except ModelError as exc:
        raise DPOError(str(exc)) from exc
    valid = np.arange(mixed.shape[1])[None] < lengths[:, None]
    out = lm_forward_batch(model, batch)
    lp = tn.token_logprobs(out.logits, np.where(valid, mixed, -1)).sum(axis=1)
    if dual:
        vocal, _ = _pad([s.vocal for s in streams_list], 0)
        accomp, _ = _pad([s.accomp for s in streams_list], 0)
        if vocal.max() >= cfg.k_v or accomp.max() >= cfg.k_a or min(vocal.min(), accomp.min()) < 0:
            raise DPOError("dual-track token out of range")
        lv, la = dec_forward(model, out.mixed_hidden(), shift_right(vocal, cfg.k_v), shift_right(accomp, cfg.k_a),
                             lengths=lengths)
        lp = lp + tn.token_logprobs(lv, np.where(valid, vocal, -1)).sum(axis=1)
        lp = lp + tn.token_logprobs(la, np.where(valid, accomp, -1)).sum(axis=1)
    if length_normalize:
        streams = 3 if dual else 1
        lp = lp * (1.0 / (streams * lengths)).astype(lp.dtype)
    return lp


def seq_logprob(model: LeLM, condition, streams, length_normalize: bool = False) -> float:
    with tn.no_grad():
        return float(batch_seq_logprobs(model, [condition], [streams], length_normalize).data[0])


def dpo_loss(logp_w, logp_l, ref_logp_w, ref_logp_l, beta: float = 0.1) -> float:
    """-ln sigmoid(beta * ((logp_w - ref_w) - (logp_l - ref_l)))."""
    vals = np.array([logp_w, logp_l, ref_logp_w, ref_logp_l], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise DPOError("log-probabilities must be finite")
    if not beta > 0:
        raise DPOError("beta must be positive")
    margin = beta * ((vals[0] - vals[2]) - (vals[1] - vals[3]))
    return float(np.logaddexp(0.0, -margin))


@dataclass(frozen=True)
class DPOConfig:
    beta: float = 0.1
    steps: int = 200
    batch_pairs: int = 4
    lr: float = 5e-5
    warmup: int = 10
    seed: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise DPOError("beta must be positive")
        if self.steps < 1 or self.batch_pairs < 1:
            raise DPOError("steps and batch_pairs must be >= 1")


@dataclass
class DPOResult:
    losses: list = field(default_factory=list)
    epoch_margins: list = field(default_factory=list)
    reference_checksum: str = ""

    @property
    def initial_loss(self) -> float:
        return self.losses[0]


def _pair_batch(pairs, idx):
    conds = [pairs[i].condition for i in idx]
    return conds + conds, [pairs[i].winner.streams for i in idx] + [pairs[i].loser.streams for i in idx]


def _margins(policy, reference, pairs, idx, cfg):
    conds, streams = _pair_batch(pairs, idx)
    with tn.no_grad():
        ref = batch_seq_logprobs(reference, conds, streams, cfg.length_normalize).data
    lp = batch_seq_logprobs(policy, conds, streams, cfg.length_normalize)
    n = len(idx)
    delta = lp - tn.Tensor(ref)
    return (delta[:n] - delta[n:]) * cfg.beta


def train_stage3_dpo(model: LeLM, pairs, cfg: DPOConfig, metrics=None) -> tuple[LeLM, DPOResult]:
    """Fine-tune every parameter group; the reference is a frozen copy of ``model``."""
    if not pairs:
        raise DPOError("no preference pairs")
    reference = LeLM(model.cfg, model.params.copy(frozen=True), dict(model.meta))
    policy = model.copy()
    policy.params.unfreeze_all()
    result = DPOResult(reference_checksum=reference.params.checksum())
    state = AdamState()
    n = len(pairs)
    bs = min(cfg.batch_pairs, n)
    per_epoch = max(n // bs, 1)
    order = None
    epoch_m: list = []
    for step in range(1, cfg.steps + 1):
        epoch, slot = divmod(step - 1, per_epoch)
        if slot == 0:
            if epoch_m:
                result.epoch_margins.append(float(np.mean(epoch_m)))
                log.info("dpo epoch %d mean margin %.4f", epoch - 1, result.epoch_margins[-1])
                epoch_m = []
            order = make_rng(cfg.seed, "dpo-order", epoch).permutation(n)
        idx = order[slot * bs : (slot + 1) * bs]
        margin = _margins(policy, reference, pairs, idx, cfg)
        loss = (-tn.log_sigmoid(margin)).mean()
        lr = cfg.lr * min(1.0, step / max(cfg.warmup, 1))
        adam_step(policy.params, tn.grad(loss, policy.params), state, lr)
        value = float(loss.data)
        result.losses.append(value)
        epoch_m.extend(margin.data.tolist())
        if metrics is not None:
            metrics({"step": step, "stage": "3", "loss": value, "lr": lr, "seed": cfg.seed})
    if epoch_m:
        result.epoch_margins.append(float(np.mean(epoch_m)))
    if reference.params.checksum() != result.reference_checksum:
        raise DPOError("reference parameters changed during training")
    policy.meta["stage"] = 3
    return policy, result


def implicit_reward_accuracy(policy: LeLM, reference: LeLM, pairs, cfg: DPOConfig,
                             batch_pairs: int = 8) -> tuple[float, float]:
    """Share of pairs with a positive implicit-reward margin, and the mean margin."""
    margins = []
    with tn.no_grad():
        for start in range(0, len(pairs), batch_pairs):
            idx = np.arange(start, min(start + batch_pairs, len(pairs)))
            margins.extend(_margins(policy, reference, pairs, idx, cfg).data.tolist())
    m = np.array(margins)
    return float(np.mean(m > 0)), float(np.mean(m))


def initial_loss_is_ln2(result: DPOResult, tol: float = 1e-6) -> bool:
    return abs(result.initial_loss - math.log(2.0)) <= tol
