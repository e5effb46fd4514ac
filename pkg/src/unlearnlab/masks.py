"""Gradient aggregation and parameter masks for feasible updates.

Every function here works componentwise on flat gradient vectors ``g_u``
(objective) and ``g_c`` (constraint). A mask or focus vector ``w`` turns an
aggregate into an update direction ``-w * agg(g_u, g_c)``.

The agreement probability treats each batch gradient as the true gradient
plus independent Gaussian noise with per-component variance ``sigma2``. The
probability that the true components share a sign is

    f = phi_u * phi_c + (1 - phi_u) * (1 - phi_c),  phi = Phi(g / sqrt(sigma2 + eps))

which we evaluate in the equivalent centred form ``1/2 + 2 d_u d_c`` with
``d = Phi(x) - 1/2 = erf(x / sqrt(2)) / 2``. Thresholds are applied to
``2 d_u d_c`` directly, so a tiny ratio whose ``Phi(x)`` would round to 1/2
still decides the comparison with the correct sign.
``erf`` is the Cephes rational approximation shipped in ``scipy.special``
(relative error near machine precision over the real line).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import special

MASK_KINDS = ("none", "and", "prob", "bernoulli", "focus", "salun")


@dataclass(frozen=True)
class AggSpec:
    kind: str = "linear"
    alpha: float = 0.05
    beta: float = 0.95

    def __post_init__(self):
        if self.kind not in ("linear", "abs_min"):
            raise ValueError(f"unknown aggregation {self.kind!r}")
        if self.kind == "linear":
            if self.alpha < 0 or self.beta < 0:
                raise ValueError("linear aggregation needs alpha, beta >= 0")
            if self.alpha + self.beta <= 0:
                raise ValueError("linear aggregation needs alpha + beta > 0")


@dataclass(frozen=True)
class GradientPair:
    g_u: np.ndarray
    g_c: np.ndarray
    sigma2_u: np.ndarray
    sigma2_c: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=np.float64) for a in (self.g_u, self.g_c, self.sigma2_u, self.sigma2_c)]
        n = arrs[0].shape
        if any(a.shape != n for a in arrs):
            raise ValueError("gradients and variances must share one length")
        if np.any(arrs[2] < 0) or np.any(arrs[3] < 0):
            raise ValueError("variances must be non-negative")
        for name, a in zip(("g_u", "g_c", "sigma2_u", "sigma2_c"), arrs):
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class Mask:
    """Per-parameter weights in [0, 1] plus the rule that produced them."""

    weights: np.ndarray
    kind: str

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if np.any((w < 0) | (w > 1)):
            raise ValueError("mask weights must lie in [0, 1]")
        if self.kind != "focus" and not np.all((w == 0) | (w == 1)):
            raise ValueError(f"{self.kind} masks must be binary")
        object.__setattr__(self, "weights", w)

    @property
    def n_selected(self) -> int:
        return int(np.count_nonzero(self.weights))


def norm_cdf(x):
    """Standard normal CDF."""
    return special.ndtr(x)


def _centered_cdf(x):
    return 0.5 * special.erf(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def agg(spec: AggSpec, g_u, g_c) -> np.ndarray:
    """Componentwise sign-invariant combination of the two gradients.

    ``abs_min`` keeps whichever component is smaller in magnitude; ties keep
    the ``g_u`` value.
    """
    g_u = np.asarray(g_u, dtype=np.float64)
    g_c = np.asarray(g_c, dtype=np.float64)
    if g_u.shape != g_c.shape:
        raise ValueError("gradient lengths differ")
    if spec.kind == "linear":
        return spec.alpha * g_u + spec.beta * g_c
    return np.where(np.abs(g_c) < np.abs(g_u), g_c, g_u)


def mask_and(g_u, g_c) -> Mask:
    g_u = np.asarray(g_u, dtype=np.float64)
    g_c = np.asarray(g_c, dtype=np.float64)
    if g_u.shape != g_c.shape:
        raise ValueError("gradient lengths differ")
    # Sign test rather than the product, which can underflow to 0.
    agree = np.sign(g_u) * np.sign(g_c) > 0
    return Mask(agree.astype(np.float64), "and")


def _centered_parts(pair: GradientPair, eps: float):
    d_u = _centered_cdf(pair.g_u / np.sqrt(pair.sigma2_u + eps))
    d_c = _centered_cdf(pair.g_c / np.sqrt(pair.sigma2_c + eps))
    return d_u, d_c


def agree_prob(pair: GradientPair, eps: float = 1e-8) -> np.ndarray:
    """Posterior probability that the true gradient components share a sign."""
    d_u, d_c = _centered_parts(pair, eps)
    return 0.5 + 2.0 * d_u * d_c


def mask_prob(pair: GradientPair, p: float = 0.3, eps: float = 1e-8) -> Mask:
    """Select components whose agreement probability exceeds ``p`` (strictly)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    d_u, d_c = _centered_parts(pair, eps)
    # f > p  <=>  2 d_u d_c > p - 1/2
    if p == 0.5:
        keep = np.sign(d_u) * np.sign(d_c) > 0
    else:
        keep = 2.0 * d_u * d_c > p - 0.5
    return Mask(keep.astype(np.float64), "prob")


def mask_bernoulli(pair: GradientPair, eps: float = 1e-8, seed=None) -> Mask:
    """One independent Bernoulli(f_i) draw per component."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    f = agree_prob(pair, eps)
    return Mask((rng.random(f.shape) < f).astype(np.float64), "bernoulli")


def focus_vector(pair: GradientPair, eps: float = 1e-8) -> Mask:
    return Mask(agree_prob(pair, eps), "focus")


def mask_salun(g_forget) -> Mask:
    """Keep components at or above the median gradient magnitude."""
    a = np.abs(np.asarray(g_forget, dtype=np.float64))
    if a.size == 0:
        raise ValueError("empty gradient")
    return Mask((a >= np.median(a)).astype(np.float64), "salun")


def update_direction(mask: Mask | None, spec: AggSpec, g_u, g_c) -> np.ndarray:
    """``-weights * agg(g_u, g_c)``; ``mask=None`` means no masking."""
    a = agg(spec, g_u, g_c)
    if mask is None:
        return -a
    if mask.weights.shape != a.shape:
        raise ValueError("mask length differs from the gradients")
    return -mask.weights * a


def dump_mask_csv(path, mask: Mask) -> None:
    """Write ``(index, weight)`` rows for inspection or plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "weight"])
        for i, v in enumerate(mask.weights):
            w.writerow([i, repr(float(v))])


def load_mask_csv(path, kind: str) -> Mask:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    weights = np.zeros(len(rows))
    for idx, val in rows:
        weights[int(idx)] = float(val)
    return Mask(weights, kind)


def agree_prob_histogram(f, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Counts of agreement probabilities over ``bins`` equal bins of [0, 1]."""
    counts, edges = np.histogram(np.asarray(f), bins=bins, range=(0.0, 1.0))
    return counts, edges


def regime_counts(f, low: float = 0.35, high: float = 0.65) -> dict[str, int]:
    """Components likely disagreeing, uncertain, or likely agreeing."""
    f = np.asarray(f)
    return {
        "disagree": int(np.count_nonzero(f < low)),
        "uncertain": int(np.count_nonzero((f >= low) & (f <= high))),
        "agree": int(np.count_nonzero(f > high)),
    }
