"""Linear interpolation of specialized parameter sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics.params import ParamStore


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class MergeWeights:
    alpha: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in self.alpha)
        object.__setattr__(self, "alpha", a)
        if not a:
            raise MergeError("alpha is empty")
        if any(not np.isfinite(x) or x < 0 for x in a):
            raise MergeError("alpha entries must be finite and >= 0")
        if abs(sum(a) - 1.0) > 1e-9:
            raise MergeError(f"alpha must sum to 1, got {sum(a)!r}")


def _check(models) -> list[str]:
    if not models:
        raise MergeError("no models to merge")
    names = models[0].names()
    for m in models[1:]:
        if m.names() != names:
            raise MergeError("parameter name sets differ")
        for n in names:
            if m[n].shape != models[0][n].shape:
                raise MergeError(f"shape mismatch for {n}")
    return names


def interpolate_unnormalized(models, weights) -> ParamStore:
    """Elementwise sum of w_i * theta_i; weights are not validated."""
    names = _check(models)
    if len(weights) != len(models):
        raise MergeError("one weight per model expected")
    out = {}
    for n in names:
        acc = None
        for w, m in zip(weights, models):
            if w == 0:
                continue
            term = m[n].data * m[n].data.dtype.type(w)
            acc = term if acc is None else acc + term
        out[n] = acc if acc is not None else np.zeros_like(models[0][n].data)
    return ParamStore(out)


def interpolate(models, alpha) -> ParamStore:
    """Convex combination of parameter sets; alpha=(1, 0, 0) returns model 1's values exactly."""
    w = alpha if isinstance(alpha, MergeWeights) else MergeWeights(tuple(alpha))
    if len(w.alpha) != len(models):
        raise MergeError(f"{len(w.alpha)} weights for {len(models)} models")
    return interpolate_unnormalized(models, w.alpha)
