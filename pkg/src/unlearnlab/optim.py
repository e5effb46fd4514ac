"""SGD step and Adam-style moment tracking used as a gradient-noise estimate.

The unlearning loop moves parameters with plain SGD; :class:`AdamState` only
keeps the exponential moving averages of the batch gradients so that their
spread can serve as the per-component noise variance of a batch gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def sgd_step(theta: np.ndarray, direction: np.ndarray, eta: float) -> np.ndarray:
    """``theta + eta * direction``."""
    theta = np.asarray(theta, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if eta <= 0:
        raise ValueError("eta must be positive")
    if theta.shape != direction.shape:
        raise ValueError("theta and direction lengths differ")
    if not np.all(np.isfinite(direction)):
        raise FloatingPointError("update direction contains non-finite values")
    return theta + eta * direction


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        if not (0 <= beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_update(state: AdamState, grad: np.ndarray) -> AdamState:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError("gradient length does not match the state")
    return replace(
        state,
        m=state.beta1 * state.m + (1 - state.beta1) * g,
        v=state.beta2 * state.v + (1 - state.beta2) * g * g,
        step_count=state.step_count + 1,
    )


def bias_corrected(state: AdamState) -> tuple[np.ndarray, np.ndarray]:
    if state.step_count < 1:
        raise ValueError("no gradient statistics yet (step_count = 0)")
    t = state.step_count
    return state.m / (1 - state.beta1**t), state.v / (1 - state.beta2**t)


def variance_estimate(state: AdamState, last_grad=None, centered: bool = True) -> np.ndarray:
    """Per-component variance of the batch gradient from the Adam moments.

    With ``centered`` (the default) this is ``max(0, v_hat - m_hat**2)`` on the
    bias-corrected moments. ``centered=False`` returns the raw ``v_hat``, an
    upper bound that also counts the squared mean.

    ``last_grad`` is only checked for shape; it should already have been
    folded into ``state`` with :func:`adam_update`.
    """
    m_hat, v_hat = bias_corrected(state)
    if last_grad is not None and np.shape(last_grad) != m_hat.shape:
        raise ValueError("last_grad length does not match the state")
    if not centered:
        return v_hat
    return np.maximum(v_hat - m_hat * m_hat, 0.0)


def per_batch_variance(per_example_grads: np.ndarray, batch_size: int | None = None) -> np.ndarray:
    """Variance of the batch-mean gradient from per-example gradients.

    Sample variance (``ddof=1``) of each component across the ``B`` rows,
    divided by ``batch_size`` (default ``B``).
    """
    g = np.asarray(per_example_grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 2:
        raise ValueError("need at least two per-example gradients")
    b = g.shape[0] if batch_size is None else batch_size
    return g.var(axis=0, ddof=1) / b
