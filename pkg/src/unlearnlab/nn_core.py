"""Fully connected classifiers over a flat parameter vector.

A parameter vector is a plain 1-D float64 ``numpy`` array. Its meaning is
fixed by the :class:`ModelSpec` layout: layers in order, each layer's weight
matrix (shape ``(fan_in, fan_out)``, row-major) followed by its bias. Masks,
gradients and updates all live in that same coordinate system.

Gradients are computed by hand-written backpropagation, both averaged over a
batch and per example.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOSS_KINDS = (
    "cross_entropy",
    "negative_cross_entropy",
    "kl_to_reference",
    "negative_kl_to_reference",
    "l1_param_norm",
)
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered ``(name, shape)`` records defining the flattening."""
        out = []
        for k, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            out.append((f"W{k}", (fan_in, fan_out)))
            out.append((f"b{k}", (fan_out,)))
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", ())),
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "relu"),
        )


@dataclass(frozen=True)
class Batch:
    """Labelled examples: ``x`` is ``(B, input_dim)``, ``y`` integer ``(B,)``."""

    x: np.ndarray
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y)
        if x.ndim != 2:
            raise ValueError("inputs must be a matrix")
        if y.ndim != 1 or len(y) != len(x):
            raise ValueError("labels must be a vector matching the inputs")
        if len(y) and not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integers")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y.astype(np.int64))

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.x[idx], self.y[idx])

    @staticmethod
    def concat(*batches: "Batch") -> "Batch":
        return Batch(
            np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches])
        )


def check_batch(spec: ModelSpec, batch: Batch) -> None:
    if len(batch) < 1:
        raise ValueError("batch is empty")
    if batch.x.shape[1] != spec.input_dim:
        raise ValueError(f"input width {batch.x.shape[1]} != input_dim {spec.input_dim}")
    if batch.y.min() < 0 or batch.y.max() >= spec.num_classes:
        raise ValueError("label out of range")


def unflatten(spec: ModelSpec, theta: np.ndarray) -> list[np.ndarray]:
    """Split ``theta`` into the arrays of ``spec.layout`` (views, not copies)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({spec.num_params},)")
    arrays, start = [], 0
    for _, shape in spec.layout:
        size = int(np.prod(shape))
        arrays.append(theta[start : start + size].reshape(shape))
        start += size
    return arrays


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def init_params(spec: ModelSpec, seed) -> np.ndarray:
    """He-normal weights (Glorot for tanh), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in spec.layout:
        if name.startswith("W"):
            fan_in, fan_out = shape
            scale = np.sqrt(2.0 / fan_in) if spec.activation == "relu" else np.sqrt(2.0 / (fan_in + fan_out))
            arrays.append(rng.normal(0.0, scale, size=shape))
        else:
            arrays.append(np.zeros(shape))
    return flatten(arrays)


def _act(spec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(spec, z, a):
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _forward_cache(spec, theta, x):
    arrays = unflatten(spec, theta)
    acts, pre = [x], []
    a = x
    n_layers = len(arrays) // 2
    for k in range(n_layers):
        W, b = arrays[2 * k], arrays[2 * k + 1]
        z = a @ W + b
        pre.append(z)
        a = z if k == n_layers - 1 else _act(spec, z)
        acts.append(a)
    return arrays, pre, acts


def forward(spec: ModelSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape ``(B, num_classes)``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (B, {spec.input_dim}), got {x.shape}")
    return _forward_cache(spec, theta, x)[2][-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be (B, K) and labels (B,)")
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def kl_divergence(logits_ref: np.ndarray, logits_cur: np.ndarray) -> float:
    """Batch mean of KL(softmax(ref) || softmax(cur))."""
    logits_ref = np.asarray(logits_ref, dtype=np.float64)
    logits_cur = np.asarray(logits_cur, dtype=np.float64)
    if logits_ref.shape != logits_cur.shape:
        raise ValueError("logit shapes differ")
    lp_ref, lp_cur = log_softmax(logits_ref), log_softmax(logits_cur)
    kl = (np.exp(lp_ref) * (lp_ref - lp_cur)).sum(axis=1)
    # Rounding can leave a tiny negative value for equal distributions.
    return float(max(kl.mean(), 0.0))


def loss(spec, theta, batch: Batch, loss_kind: str, reference=None) -> float:
    """Mean batch loss of the given kind (see :data:`LOSS_KINDS`)."""
    if loss_kind == "l1_param_norm":
        return float(np.abs(theta).sum())
    check_batch(spec, batch)
    logits = forward(spec, theta, batch.x)
    if loss_kind in ("cross_entropy", "negative_cross_entropy"):
        val = cross_entropy(logits, batch.y)
        return val if loss_kind == "cross_entropy" else -val
    if loss_kind in ("kl_to_reference", "negative_kl_to_reference"):
        if reference is None:
            raise ValueError(f"{loss_kind} needs a reference parameter vector")
        lp_ref = log_softmax(forward(spec, reference, batch.x))
        lp_cur = log_softmax(logits)
        val = float((np.exp(lp_ref) * (lp_ref - lp_cur)).sum(axis=1).mean())
        return val if loss_kind == "kl_to_reference" else -val
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _output_delta(spec, theta, batch, loss_kind, reference, logits):
    """d(per-example loss)/d(logits), shape (B, K)."""
    p = softmax(logits)
    if loss_kind in ("cross_entropy", "negative_cross_entropy"):
        delta = p.copy()
        delta[np.arange(len(batch)), batch.y] -= 1.0
        sign = -1.0 if loss_kind == "negative_cross_entropy" else 1.0
    elif loss_kind in ("kl_to_reference", "negative_kl_to_reference"):
        if reference is None:
            raise ValueError(f"{loss_kind} needs a reference parameter vector")
        delta = p - softmax(forward(spec, reference, batch.x))
        sign = 1.0 if loss_kind == "kl_to_reference" else -1.0
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return sign * delta


def per_example_grads(spec, theta, batch: Batch, loss_kind: str, reference=None) -> np.ndarray:
    """Gradients of each example's loss, stacked as a ``(B, N)`` array.

    Row ``n`` is the gradient of the loss on example ``n`` alone; the row mean
    equals :func:`grad` on the whole batch.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if loss_kind == "l1_param_norm":
        check_batch(spec, batch)
        return np.tile(np.sign(theta), (len(batch), 1))
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    check_batch(spec, batch)
    arrays, pre, acts = _forward_cache(spec, theta, batch.x)
    delta = _output_delta(spec, theta, batch, loss_kind, reference, acts[-1])
    n_layers = len(arrays) // 2
    B = len(batch)
    blocks = [None] * len(arrays)
    for k in range(n_layers - 1, -1, -1):
        blocks[2 * k] = np.einsum("bi,bj->bij", acts[k], delta).reshape(B, -1)
        blocks[2 * k + 1] = delta
        if k > 0:
            delta = (delta @ arrays[2 * k].T) * _act_deriv(spec, pre[k - 1], acts[k])
    return np.concatenate(blocks, axis=1)


def grad(spec, theta, batch: Batch, loss_kind: str, reference=None) -> np.ndarray:
    """Gradient of the mean batch loss with respect to ``theta``.

    The l1 subgradient uses ``sign(0) = 0``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if loss_kind == "l1_param_norm":
        return np.sign(theta)
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    check_batch(spec, batch)
    arrays, pre, acts = _forward_cache(spec, theta, batch.x)
    B = len(batch)
    delta = _output_delta(spec, theta, batch, loss_kind, reference, acts[-1]) / B
    n_layers = len(arrays) // 2
    blocks = [None] * len(arrays)
    for k in range(n_layers - 1, -1, -1):
        blocks[2 * k] = acts[k].T @ delta
        blocks[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ arrays[2 * k].T) * _act_deriv(spec, pre[k - 1], acts[k])
    return flatten(blocks)


def predict(spec, theta, inputs) -> np.ndarray:
    """Argmax class; ties go to the lowest index."""
    return np.argmax(forward(spec, theta, inputs), axis=1)


def save_checkpoint(path, spec: ModelSpec, theta: np.ndarray) -> None:
    """Write a plain-text JSON checkpoint; floats are stored losslessly."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise ValueError("parameter vector does not match spec")
    doc = {
        "spec": spec.to_dict(),
        "layout": [[name, list(shape)] for name, shape in spec.layout],
        "values": [float(v) for v in theta],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    spec = ModelSpec.from_dict(doc["spec"])
    layout = [(name, tuple(shape)) for name, shape in doc["layout"]]
    if layout != spec.layout:
        raise ValueError("checkpoint layout does not match its model spec")
    theta = np.array(doc["values"], dtype=np.float64)
    if theta.shape != (spec.num_params,):
        raise ValueError("checkpoint has the wrong number of values")
    return spec, theta
