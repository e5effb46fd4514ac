"""First-order unlearning as constrained minimisation.

Each method is a pair of objectives over the model parameters: an unlearning
objective ``U`` (loss ``loss_u`` averaged over dataset ``dataset_u``) and an
optional constraint ``C(theta) = E[L_C(theta) - L_C(theta_0)]`` over
``dataset_c``, where ``theta_0`` is the model before unlearning. A mask
add-on decides, per parameter, how much of the aggregated gradient to apply.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import masks as mk
from .data import DatasetSplit, batches, relabeled_train
from .metrics import MIA_KINDS, MetricsReport, report
from .nn_core import Batch, ModelSpec, grad, loss, per_example_grads
from .optim import AdamState, adam_update, per_batch_variance, sgd_step, variance_estimate

log = logging.getLogger(__name__)

METHODS = ("FT", "GA", "NGPlus", "SRL", "L1Sparse", "SCRUB")
ADDONS = ("none", "salun", "and", "prob", "bernoulli", "focus")
_NEEDS_VARIANCE = ("prob", "bernoulli", "focus")


class ConfigError(ValueError):
    pass


class UnlearningError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnlearnMethodSpec:
    """``loss_c`` is a tuple of ``(loss_kind, weight)`` terms, or ``None``."""

    name: str
    loss_u: str
    dataset_u: str
    loss_c: tuple | None = None
    dataset_c: str | None = None
    gamma: float = 0.0

    @property
    def constrained(self) -> bool:
        return self.loss_c is not None


def make_method(name: str, gamma: float = 1.0) -> UnlearnMethodSpec:
    ce = (("cross_entropy", 1.0),)
    table = {
        "FT": UnlearnMethodSpec("FT", "cross_entropy", "retain"),
        "GA": UnlearnMethodSpec("GA", "negative_cross_entropy", "forget"),
        "NGPlus": UnlearnMethodSpec("NGPlus", "negative_cross_entropy", "forget", ce, "retain"),
        "SRL": UnlearnMethodSpec("SRL", "cross_entropy", "relabeled_train", ce, "retain"),
        "L1Sparse": UnlearnMethodSpec("L1Sparse", "l1_param_norm", "retain", ce, "retain"),
        "SCRUB": UnlearnMethodSpec(
            "SCRUB", "negative_kl_to_reference", "forget",
            (("kl_to_reference", 1.0), ("cross_entropy", float(gamma))), "retain", float(gamma),
        ),
    }
    if name not in table:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return table[name]


@dataclass(frozen=True)
class AddOnSpec:
    kind: str = "none"
    p: float | None = None
    agg: mk.AggSpec = field(default_factory=mk.AggSpec)
    variance_provider: str = "adam"
    adam_moment: str = "centered"

    def __post_init__(self):
        if self.kind not in ADDONS:
            raise ConfigError(f"unknown add-on {self.kind!r}; choose from {', '.join(ADDONS)}")
        if (self.kind == "prob") != (self.p is not None):
            raise ConfigError("p must be given exactly when the add-on is 'prob'")
        if self.p is not None and not 0.0 < self.p < 1.0:
            raise ConfigError("p must lie in (0, 1)")
        if self.variance_provider not in ("adam", "per_example"):
            raise ConfigError(f"unknown variance provider {self.variance_provider!r}")
        if self.adam_moment not in ("centered", "raw"):
            raise ConfigError(f"unknown adam_moment {self.adam_moment!r}")


def check_compatible(method: UnlearnMethodSpec, addon: AddOnSpec) -> None:
    if not method.constrained and addon.kind not in ("none", "salun"):
        raise ConfigError(f"add-on {addon.kind!r} needs a constraint gradient; {method.name} has none")


@dataclass(frozen=True)
class UnlearnRunState:
    theta: np.ndarray
    adam_u: AdamState
    adam_c: AdamState
    epoch: int = 0
    batch_index: int = 0
    rte_seconds: float = 0.0

    @classmethod
    def start(cls, theta0) -> "UnlearnRunState":
        theta0 = np.array(theta0, dtype=np.float64)
        n = len(theta0)
        return cls(theta0, AdamState.zeros(n), AdamState.zeros(n))


def _weighted_terms(spec, theta, batch, terms, theta0, per_example=False):
    fn = per_example_grads if per_example else grad
    total = None
    for kind, weight in terms:
        if weight == 0:
            continue
        g = weight * fn(spec, theta, batch, kind, reference=theta0)
        total = g if total is None else total + g
    return total


def objective_grad(spec, theta, method, batch, theta0, per_example=False):
    return _weighted_terms(spec, theta, batch, ((method.loss_u, 1.0),), theta0, per_example)


def constraint_grad(spec, theta, method, batch, theta0, per_example=False):
    if not method.constrained:
        raise ConfigError(f"{method.name} has no constraint")
    return _weighted_terms(spec, theta, batch, method.loss_c, theta0, per_example)


def objective_value(spec, theta, method, batch, theta0) -> float:
    return loss(spec, theta, batch, method.loss_u, reference=theta0)


def constraint_value(spec: ModelSpec, method: UnlearnMethodSpec, theta, theta0, batch_c: Batch) -> float:
    """Mean constraint-loss increase over ``theta0``; exactly 0 at ``theta0``."""
    if not method.constrained:
        raise ConfigError(f"{method.name} has a null constraint")
    if np.array_equal(theta, theta0):
        return 0.0
    total = 0.0
    for kind, weight in method.loss_c:
        total += weight * (
            loss(spec, theta, batch_c, kind, reference=theta0) - loss(spec, theta0, batch_c, kind, reference=theta0)
        )
    return total


def gradient_pair(spec, state, method, addon, batch_u, batch_c, theta0):
    """Empirical gradients plus variances, advancing the Adam trackers if used.

    Returns ``(g_u, g_c, sigma2_u, sigma2_c, state)``; the variances are
    ``None`` when the add-on does not need them.
    """
    theta = state.theta
    need_var = addon.kind in _NEEDS_VARIANCE
    if need_var and addon.variance_provider == "per_example":
        pe_u = objective_grad(spec, theta, method, batch_u, theta0, per_example=True)
        pe_c = constraint_grad(spec, theta, method, batch_c, theta0, per_example=True)
        if len(pe_u) < 2 or len(pe_c) < 2:
            raise UnlearningError("per-example variance needs batches of at least two examples")
        return pe_u.mean(axis=0), pe_c.mean(axis=0), per_batch_variance(pe_u), per_batch_variance(pe_c), state
    g_u = objective_grad(spec, theta, method, batch_u, theta0)
    g_c = constraint_grad(spec, theta, method, batch_c, theta0) if method.constrained else None
    if not need_var:
        return g_u, g_c, None, None, state
    adam_u = adam_update(state.adam_u, g_u)
    adam_c = adam_update(state.adam_c, g_c)
    centered = addon.adam_moment == "centered"
    s_u = variance_estimate(adam_u, g_u, centered=centered)
    s_c = variance_estimate(adam_c, g_c, centered=centered)
    return g_u, g_c, s_u, s_c, replace(state, adam_u=adam_u, adam_c=adam_c)


def unlearn_step(spec: ModelSpec, state: UnlearnRunState, method: UnlearnMethodSpec, addon: AddOnSpec,
                 batch_u: Batch, batch_c: Batch | None, eta: float, eps: float = 1e-8, *,
                 theta0=None, salun_mask: mk.Mask | None = None, rng=None) -> UnlearnRunState:
    """One batch iteration: gradients, optional variances, mask, SGD update."""
    check_compatible(method, addon)
    if eta <= 0:
        raise ConfigError("eta must be positive")
    if theta0 is None:
        theta0 = state.theta
    g_u, g_c, s_u, s_c, state = gradient_pair(spec, state, method, addon, batch_u, batch_c, theta0)
    for name, g in (("objective", g_u), ("constraint", g_c)):
        if g is not None and not np.all(np.isfinite(g)):
            raise UnlearningError(
                f"non-finite {name} gradient in {method.name}/{addon.kind} "
                f"at epoch {state.epoch}, batch {state.batch_index}"
            )

    if not method.constrained:
        direction = -g_u
        if addon.kind == "salun":
            direction = -salun_mask.weights * g_u
    else:
        if addon.kind == "none":
            mask = None
        elif addon.kind == "salun":
            if salun_mask is None:
                raise ConfigError("the salun add-on needs a precomputed mask")
            mask = salun_mask
        elif addon.kind == "and":
            mask = mk.mask_and(g_u, g_c)
        else:
            pair = mk.GradientPair(g_u, g_c, s_u, s_c)
            if addon.kind == "prob":
                mask = mk.mask_prob(pair, addon.p, eps)
            elif addon.kind == "bernoulli":
                mask = mk.mask_bernoulli(pair, eps, rng if rng is not None else np.random.default_rng())
            else:
                mask = mk.focus_vector(pair, eps)
        direction = mk.update_direction(mask, addon.agg, g_u, g_c)

    theta = sgd_step(state.theta, direction, eta)
    if not np.all(np.isfinite(theta)):
        raise UnlearningError(f"parameters became non-finite in {method.name}/{addon.kind}")
    return replace(state, theta=theta, batch_index=state.batch_index + 1)


def dataset_for(role: str, split: DatasetSplit, srl_batch: Batch | None) -> Batch:
    if role == "retain":
        return split.retain
    if role == "forget":
        return split.forget
    if role == "relabeled_train":
        return srl_batch
    raise ConfigError(f"unknown dataset role {role!r}")


def _cycle(source: Batch, batch_size: int, rng):
    while True:
        yield from batches(source, batch_size, rng)


def salun_mask_for(spec, theta, forget: Batch) -> mk.Mask:
    """Median-magnitude mask of the full forget-set ascent gradient."""
    return mk.mask_salun(grad(spec, theta, forget, "negative_cross_entropy"))


def run_unlearning(spec: ModelSpec, theta0, method: UnlearnMethodSpec, addon: AddOnSpec,
                   split: DatasetSplit, *, epochs: int, eta: float, batch_size: int = 32,
                   seed=0, eps: float = 1e-8, theta_ideal=None, evaluate: bool = True,
                   mia_kinds=MIA_KINDS, clock=time.perf_counter, probe_epoch: int | None = None,
                   probe_bins: int = 20, trace: dict | None = None):
    """Unlearn from ``theta0`` and evaluate at every epoch boundary.

    Returns ``(theta, reports)`` where ``reports[0]`` describes ``theta0``
    (epoch 0) and ``reports[e]`` the model after epoch ``e``. ``rte_seconds``
    accumulates the wall-clock time of the update loop only.

    ``trace``, if given, is filled with per-epoch mean inner products of the
    two batch gradients and, when ``probe_epoch`` is set, the agreement
    probabilities (per-example variances) at that epoch's first batch.
    """
    if epochs < 1:
        raise ConfigError("epochs must be at least 1")
    check_compatible(method, addon)
    theta0 = np.array(theta0, dtype=np.float64)
    ss = np.random.SeedSequence(seed)
    s_relabel, s_u, s_c, s_mask, s_mia = ss.spawn(5)
    rng_u, rng_c = np.random.default_rng(s_u), np.random.default_rng(s_c)
    rng_mask = np.random.default_rng(s_mask)
    mia_seed = int(s_mia.generate_state(1)[0])

    srl_batch = relabeled_train(split, spec.num_classes, s_relabel) if method.dataset_u == "relabeled_train" else None
    data_u = dataset_for(method.dataset_u, split, srl_batch)
    data_c = dataset_for(method.dataset_c, split, srl_batch) if method.constrained else None
    n_steps = -(-len(data_u) // batch_size)
    if data_c is not None:
        n_steps = max(n_steps, -(-len(data_c) // batch_size))
    loader_u = _cycle(data_u, batch_size, rng_u)
    loader_c = _cycle(data_c, batch_size, rng_c) if data_c is not None else None

    def evaluate_at(theta, epoch, rte):
        if not evaluate:
            return MetricsReport(epoch, float("nan"), float("nan"), float("nan"), rte_seconds=rte)
        return report(spec, theta, split, theta_ideal, epoch=epoch, rte_seconds=rte,
                      seed=mia_seed, mia_kinds=mia_kinds)

    if trace is not None:
        trace.setdefault("inner_products", [])
    state = UnlearnRunState.start(theta0)
    reports = [evaluate_at(state.theta, 0, 0.0)]
    salun_mask = None
    for epoch in range(1, epochs + 1):
        state = replace(state, epoch=epoch, batch_index=0)
        inner = []
        t0 = clock()
        if addon.kind == "salun" and salun_mask is None:
            salun_mask = salun_mask_for(spec, theta0, split.forget)
        for b in range(n_steps):
            batch_u = next(loader_u)
            batch_c = next(loader_c) if loader_c is not None else None
            if trace is not None and method.constrained:
                t_pause = clock()
                if epoch == probe_epoch and b == 0 and min(len(batch_u), len(batch_c)) >= 2:
                    trace["agree_prob"] = _probe(spec, state.theta, method, batch_u, batch_c, theta0, eps)
                inner.append(float(
                    objective_grad(spec, state.theta, method, batch_u, theta0)
                    @ constraint_grad(spec, state.theta, method, batch_c, theta0)
                ))
                t0 += clock() - t_pause
            state = unlearn_step(spec, state, method, addon, batch_u, batch_c, eta, eps,
                                 theta0=theta0, salun_mask=salun_mask, rng=rng_mask)
        state = replace(state, rte_seconds=state.rte_seconds + (clock() - t0))
        if trace is not None and inner:
            trace["inner_products"].append(float(np.mean(inner)))
            log.debug("epoch %d mean <g_u, g_c> = %.3e", epoch, trace["inner_products"][-1])
        reports.append(evaluate_at(state.theta, epoch, state.rte_seconds))
    return state.theta, reports


def _probe(spec, theta, method, batch_u, batch_c, theta0, eps):
    pe_u = objective_grad(spec, theta, method, batch_u, theta0, per_example=True)
    pe_c = constraint_grad(spec, theta, method, batch_c, theta0, per_example=True)
    pair = mk.GradientPair(pe_u.mean(axis=0), pe_c.mean(axis=0), per_batch_variance(pe_u), per_batch_variance(pe_c))
    return mk.agree_prob(pair, eps)
