"""Accuracies, ideal-model comparisons and population membership inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSplit
from .nn_core import Batch, ModelSpec, forward, log_softmax, predict

log = logging.getLogger(__name__)

MIA_KINDS = ("correctness", "confidence", "logits", "entropy", "mix_entropy")

CSV_COLUMNS = [
    "run_id", "seed", "method", "addon", "epoch",
    "ua", "ra", "ta", "rua", "fid",
    "mia_correctness", "mia_confidence", "mia_logits", "mia_entropy", "mia_mix_entropy",
    "rte_seconds",
]


def accuracy(spec: ModelSpec, theta, batch: Batch) -> float:
    """Percentage of examples whose argmax prediction matches the label."""
    if len(batch) == 0:
        raise ValueError("accuracy of an empty batch")
    return 100.0 * float(np.mean(predict(spec, theta, batch.x) == batch.y))


def rua(spec, theta_unlearned, theta_ideal, forget: Batch) -> float:
    """Forget-set accuracy of the unlearned model minus that of the ideal one."""
    if len(forget) == 0:
        raise ValueError("empty forget set")
    return accuracy(spec, theta_unlearned, forget) - accuracy(spec, theta_ideal, forget)


def fidelity(spec, theta_unlearned, theta_ideal, forget: Batch) -> float:
    """Percentage of forget examples on which both models predict the same class."""
    if len(forget) == 0:
        raise ValueError("empty forget set")
    a = predict(spec, theta_unlearned, forget.x)
    b = predict(spec, theta_ideal, forget.x)
    return 100.0 * float(np.mean(a == b))


def mia_features(spec, theta, batch: Batch, kind: str) -> np.ndarray:
    """Attack features, one row per example.

    ``confidence`` is the softmax probability of the true label.
    ``mix_entropy`` is the label-aware modified entropy
    ``-(1 - p_y) ln p_y - sum_{i != y} p_i ln(1 - p_i)``.
    """
    logits = forward(spec, theta, batch.x)
    if kind == "logits":
        return logits
    lp = log_softmax(logits)
    p = np.exp(lp)
    rows = np.arange(len(batch))
    if kind == "correctness":
        return (np.argmax(logits, axis=1) == batch.y).astype(np.float64)[:, None]
    if kind == "confidence":
        return p[rows, batch.y][:, None]
    if kind == "entropy":
        return np.maximum(-(p * lp).sum(axis=1), 0.0)[:, None]
    if kind == "mix_entropy":
        p_y = p[rows, batch.y]
        lp_y = lp[rows, batch.y]
        # log1p(-p) is -inf only when p == 1, where the p * log term is 0.
        with np.errstate(divide="ignore", invalid="ignore"):
            other = np.where(p < 1.0, p * np.log1p(-p), 0.0)
        other[rows, batch.y] = 0.0
        val = -(1.0 - p_y) * lp_y - other.sum(axis=1)
        return np.maximum(val, 0.0)[:, None]
    raise ValueError(f"unknown MIA feature {kind!r}")


def fit_linear_svm(X, y, reg: float = 1.0, iters: int = 2000):
    """Linear soft-margin SVM by full-batch subgradient descent.

    Minimises ``reg / (2 n) * |w|^2 + mean(max(0, 1 - s (w.x + b)))`` with
    ``s = 2 y - 1`` and step ``1 / sqrt(t)``; returns the average of the
    iterates over the second half of the run. Fully deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    s = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    n, d = X.shape
    lam = reg / n
    w, b = np.zeros(d), 0.0
    w_avg, b_avg, n_avg = np.zeros(d), 0.0, 0
    for t in range(1, iters + 1):
        margin = s * (X @ w + b)
        active = margin < 1.0
        coef = np.where(active, -s, 0.0) / n
        step = 1.0 / math.sqrt(t)
        w = w - step * (lam * w + X.T @ coef)
        b = b - step * coef.sum()
        if t > iters // 2:
            w_avg += w
            b_avg += b
            n_avg += 1
    return w_avg / n_avg, b_avg / n_avg


def membership_score(member, nonmember, target, seed=0, reg=1.0, iters=2000) -> float:
    """Fraction of ``target`` rows that a linear attack calls members.

    The attack is trained on a balanced sample (the larger pool is subsampled
    with ``seed``) after standardising with the training statistics.
    """
    rng = np.random.default_rng(seed)
    member = np.asarray(member, dtype=np.float64)
    nonmember = np.asarray(nonmember, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    k = min(len(member), len(nonmember))
    if k == 0:
        raise ValueError("member and non-member pools must be non-empty")
    if len(member) > k:
        member = member[np.sort(rng.choice(len(member), k, replace=False))]
    if len(nonmember) > k:
        nonmember = nonmember[np.sort(rng.choice(len(nonmember), k, replace=False))]
    X = np.vstack([member, nonmember])
    y = np.concatenate([np.ones(k), np.zeros(k)])
    mu, sd = X.mean(axis=0), X.std(axis=0)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    if not np.any(live):
        log.warning("MIA features have no variance; using the constant 1/2 rule")
        return 0.5
    Z = (X[:, live] - mu[live]) / sd[live]
    w, b = fit_linear_svm(Z, y, reg=reg, iters=iters)
    Zt = (target[:, live] - mu[live]) / sd[live]
    return float(np.mean(Zt @ w + b > 0))


def mia_attack(spec, theta, split: DatasetSplit, kind: str, seed=0) -> float:
    """Population attack: retain = members, test = non-members, scored on forget."""
    if len(split.retain) == 0 or len(split.test) == 0:
        raise ValueError("retain and test sets must be non-empty")
    return membership_score(
        mia_features(spec, theta, split.retain, kind),
        mia_features(spec, theta, split.test, kind),
        mia_features(spec, theta, split.forget, kind),
        seed=seed,
    )


@dataclass
class MetricsReport:
    epoch: int
    ua: float
    ra: float
    ta: float
    rua: float = float("nan")
    fid: float = float("nan")
    mia: dict = field(default_factory=dict)
    rte_seconds: float = 0.0

    def row(self, run_id="", seed=0, method="", addon="") -> dict:
        out = {
            "run_id": run_id, "seed": seed, "method": method, "addon": addon,
            "epoch": self.epoch, "ua": self.ua, "ra": self.ra, "ta": self.ta,
            "rua": self.rua, "fid": self.fid, "rte_seconds": self.rte_seconds,
        }
        for k in MIA_KINDS:
            out[f"mia_{k}"] = self.mia.get(k, float("nan"))
        return out

    @classmethod
    def from_row(cls, row: dict) -> "MetricsReport":
        return cls(
            epoch=int(row["epoch"]),
            ua=float(row["ua"]), ra=float(row["ra"]), ta=float(row["ta"]),
            rua=float(row["rua"]), fid=float(row["fid"]),
            mia={k: float(row[f"mia_{k}"]) for k in MIA_KINDS},
            rte_seconds=float(row["rte_seconds"]),
        )


def report(spec, theta, split: DatasetSplit, theta_ideal=None, epoch=0, rte_seconds=0.0,
           seed=0, mia_kinds=MIA_KINDS) -> MetricsReport:
    """All metrics for one model at one epoch."""
    out = MetricsReport(
        epoch=epoch,
        ua=accuracy(spec, theta, split.forget),
        ra=accuracy(spec, theta, split.retain),
        ta=accuracy(spec, theta, split.test),
        rte_seconds=float(rte_seconds),
    )
    if theta_ideal is not None:
        out.rua = rua(spec, theta, theta_ideal, split.forget)
        out.fid = fidelity(spec, theta, theta_ideal, split.forget)
    out.mia = {k: mia_attack(spec, theta, split, k, seed=seed) for k in mia_kinds}
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["epoch"] = int(r["epoch"])
        for c in CSV_COLUMNS[5:]:
            r[c] = float(r[c])
    return rows
