"""Win-lose pair construction for the three preference strategies."""
from __future__ import annotations

import json
from dataclasses import dataclass

from .mining import GeneratedSample, group_samples

FULL_SCALE_GAP = 40  # lyric-error gap on full-length songs
DESK_GAP = 2    # the same rule rescaled to short synthetic lyrics

TEXT_MIN, TEXT_MARGIN = 0.3, 0.1
AUDIO_MIN, AUDIO_MARGIN = 0.75, 0.1


class PairError(ValueError):
    pass


@dataclass
class PreferencePair:
    strategy: int
    winner: GeneratedSample
    loser: GeneratedSample
    score_w: float
    score_l: float

    @property
    def condition(self):
        return self.winner.condition

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "group": self.winner.group, "regime": self.winner.regime,
                "winner": self.winner.sid, "loser": self.loser.sid,
                "score_w": self.score_w, "score_l": self.score_l}


def strategy1_accepts(err_w: float, err_l: float, gap: float) -> bool:
    return err_l - err_w > gap


def strategy2_accepts(score_w: float, score_l: float, mode: str) -> bool:
    if mode == "text":
        return score_w >= TEXT_MIN and score_w - score_l >= TEXT_MARGIN
    if mode == "audio":
        return score_w >= AUDIO_MIN and score_w - score_l > AUDIO_MARGIN
    raise PairError(f"unknown mode {mode!r}")


def strategy3_accepts(r_w: float, r_l: float, delta: float) -> bool:
    return r_w - r_l > delta


def _ordered_pairs(samples, score, accept, strategy):
    """Every ordered pair (i, j) within a condition group that ``accept`` allows."""
    out = []
    for _, group in sorted(group_samples(samples).items()):
        for a in group:
            for b in group:
                if a is b:
                    continue
                sa, sb = score(a), score(b)
                if accept(sa, sb):
                    out.append(PreferencePair(strategy, a, b, sa, sb))
    return out


def build_pairs_strategy1(samples, gap_threshold: float = FULL_SCALE_GAP) -> list[PreferencePair]:
    """Lyric alignment: i wins over j when j makes more than ``gap_threshold`` extra errors."""
    return _ordered_pairs(samples, lambda s: s.scores["errors"],
                          lambda ew, el: strategy1_accepts(ew, el, gap_threshold), 1)


def build_pairs_strategy2(samples, mode: str) -> list[PreferencePair]:
    """Prompt consistency against the style tag (text) or the reference audio (audio)."""
    if mode not in ("text", "audio"):
        raise PairError(f"unknown mode {mode!r}")
    for s in samples:
        has = s.condition.style is not None if mode == "text" else s.condition.has_audio
        if not has:
            raise PairError(f"sample {s.sid} lacks the {mode} condition")
    key = "style_text" if mode == "text" else "style_audio"
    return _ordered_pairs(samples, lambda s: s.scores[key], lambda w, l: strategy2_accepts(w, l, mode), 2)


def build_pairs_strategy3(rm, delta: float, samples) -> list[PreferencePair]:
    """Musicality: the reward model ranks samples and gaps above ``delta`` become pairs."""
    for s in samples:
        s.scores["reward"] = rm.score_sample(s)
    return _ordered_pairs(samples, lambda s: s.scores["reward"], lambda w, l: strategy3_accepts(w, l, delta), 3)


def write_pairs(pairs, path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")
