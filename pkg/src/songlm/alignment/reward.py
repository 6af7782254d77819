"""Musicality reward model: simulated labels, Bradley-Terry training, threshold tuning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..corpus import PITCH_DIM, musicality_oracle
from ..numerics import tensor as tn
from ..numerics.optim import AdamState, adam_step
from ..numerics.params import ParamStore
from ..numerics.rng import derive_seed, make_rng


class RewardError(ValueError):
    pass


class UnreachableTargetError(RewardError):
    def __init__(self, target: float, best: float):
        super().__init__(f"no threshold reaches {target:.0%} agreement; best is {best:.1%}")
        self.target = target
        self.best = best


def reward_features(vocal: np.ndarray, accomp: np.ndarray) -> np.ndarray:
    """Pooled mean/variance of both tracks plus pitch-contour statistics."""
    v = np.asarray(vocal, dtype=np.float64)
    a = np.asarray(accomp, dtype=np.float64)
    if len(v) < 2:
        return np.zeros(4 * v.shape[1] + 4)
    d = np.diff(v[:, PITCH_DIM])
    contour = [np.mean(d * d), np.mean(np.abs(d)), np.max(np.abs(d)), np.std(v[:, PITCH_DIM])]
    return np.concatenate([v.mean(0), v.var(0), a.mean(0), a.var(0), contour])


@dataclass
class LabeledPair:
    a: np.ndarray      # reward features of the first sample
    b: np.ndarray
    label: int         # 1 if a is preferred, 0 if b is


@dataclass
class RewardConfig:
    hidden: int = 32
    steps: int = 400
    lr: float = 3e-3
    batch: int = 64
    seed: int = 0


@dataclass
class RewardModel:
    params: ParamStore
    mu: np.ndarray
    sigma: np.ndarray
    history: list = field(default_factory=list)
    train_accuracy: float = float("nan")

    def _forward(self, x: np.ndarray):
        z = tn.Tensor(((np.asarray(x, dtype=np.float64) - self.mu) / self.sigma).astype(np.float32))
        p = self.params
        h = tn.tanh(tn.linear(z, p["rm.l1.w"], p["rm.l1.b"]))
        return tn.linear(h, p["rm.l2.w"], p["rm.l2.b"]).reshape(-1)

    def score(self, x: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return self._forward(np.atleast_2d(x)).data.astype(np.float64)

    def score_sample(self, sample) -> float:
        return float(self.score(reward_features(sample.vocal, sample.accomp))[0])


def bt_loss(r_w, r_l):
    """Bradley-Terry negative log-likelihood of the winner."""
    return -tn.log_sigmoid(r_w - r_l)


def simulate_labels(samples, seed: int, votes: int = 5, agree: int = 4, noise_std: float = 0.05,
                    max_pairs_per_group: int | None = None) -> list[LabeledPair]:
    """Simulated raters: noisy musicality calls, kept when at least ``agree`` of ``votes`` concur."""
    from .mining import group_samples
    out = []
    for key, group in sorted(group_samples(samples).items()):
        found = []
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                a, b = group[i], group[j]
                wins = 0
                for v in range(votes):
                    sa = musicality_oracle(a.vocal, derive_seed(seed, "vote", a.sid, v), noise_std)
                    sb = musicality_oracle(b.vocal, derive_seed(seed, "vote", b.sid, v), noise_std)
                    wins += sa > sb
                if wins >= agree or votes - wins >= agree:
                    found.append(LabeledPair(reward_features(a.vocal, a.accomp),
                                             reward_features(b.vocal, b.accomp), int(wins >= agree)))
        out.extend(found[:max_pairs_per_group] if max_pairs_per_group else found)
    return out


def pair_accuracy(rm: RewardModel, pairs) -> float:
    ra = rm.score(np.stack([p.a for p in pairs]))
    rb = rm.score(np.stack([p.b for p in pairs]))
    lab = np.array([p.label for p in pairs])
    return float(np.mean((ra > rb) == (lab == 1)))


def train_reward_model(pairs, cfg: RewardConfig | None = None) -> RewardModel:
    cfg = cfg or RewardConfig()
    if len(pairs) < 2:
        raise RewardError("need at least 2 labeled pairs")
    xa = np.stack([p.a for p in pairs])
    xb = np.stack([p.b for p in pairs])
    lab = np.array([p.label for p in pairs], dtype=bool)
    win = np.where(lab[:, None], xa, xb)
    lose = np.where(lab[:, None], xb, xa)
    allx = np.concatenate([xa, xb])
    mu = allx.mean(0)
    sigma = allx.std(0)
    sigma[sigma < 1e-8] = 1.0
    rng = make_rng(cfg.seed, "reward-init")
    dim = xa.shape[1]
    params = ParamStore({
        "rm.l1.w": rng.normal(0, dim ** -0.5, (dim, cfg.hidden)).astype(np.float32),
        "rm.l1.b": np.zeros(cfg.hidden, np.float32),
        "rm.l2.w": rng.normal(0, cfg.hidden ** -0.5, (cfg.hidden, 1)).astype(np.float32),
        "rm.l2.b": np.zeros(1, np.float32),
    })
    rm = RewardModel(params, mu, sigma)
    state = AdamState(beta2=0.999, eps=1e-8)
    order_rng = make_rng(cfg.seed, "reward-order")
    n = len(pairs)
    for step in range(cfg.steps):
        idx = order_rng.choice(n, size=min(cfg.batch, n), replace=False)
        loss = bt_loss(rm._forward(win[idx]), rm._forward(lose[idx])).mean()
        adam_step(params, tn.grad(loss, params), state, cfg.lr)
        rm.history.append(float(loss.data))
    rm.train_accuracy = pair_accuracy(rm, pairs)
    return rm


@dataclass
class ThresholdResult:
    delta: float
    accuracy: float
    coverage: float   # share of held-out pairs whose reward gap exceeds delta
    selected: int


def tune_threshold(rm, heldout_pairs, target: float = 0.80, min_selected: int = 10) -> ThresholdResult:
    """Smallest delta >= 0 whose gap-filtered held-out pairs agree with labels at >= target.

    Candidates are 0 and the observed gaps; a candidate must keep at least
    ``min_selected`` pairs so a lucky handful cannot pass.
    """
    if not heldout_pairs:
        raise RewardError("no held-out pairs")
    if callable(getattr(rm, "score", None)):
        ra = rm.score(np.stack([p.a for p in heldout_pairs]))
        rb = rm.score(np.stack([p.b for p in heldout_pairs]))
    else:
        raise RewardError("reward model must expose score()")
    lab = np.array([p.label for p in heldout_pairs])
    gap = np.abs(ra - rb)
    agree = (ra > rb) == (lab == 1)
    best = 0.0
    for delta in np.concatenate([[0.0], np.unique(gap)]):
        sel = gap > delta
        count = int(sel.sum())
        if count < max(min_selected, 1):
            break
        acc = float(agree[sel].mean())
        best = max(best, acc)
        if acc >= target:
            return ThresholdResult(float(delta), acc, count / len(gap), count)
    raise UnreachableTargetError(target, best)
